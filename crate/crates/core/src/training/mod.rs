//! Focal-loss training with Adam, linear warm-up and a single step decay.

mod adam;
mod checkpoint;
mod focal;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, SamplerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use focal::{focal_loss, focal_loss_value, PROB_EPS};

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::graph::EdgeRules;
use crate::layers::{FusionMode, HgnnModel, ModalityMask, ModelConfig, PoolingMode};
use crate::metrics::{evaluate, EvalResult};
use crate::tensor::{rng_from_seed, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub decay_factor: f64,
    pub decay_at_iter: u64,
    pub warmup_iters: u64,
    pub gamma: f64,
    pub layers: usize,
    pub hidden: usize,
    pub edges: EdgeRules,
    pub seed: u64,
    /// Seed of the train/validation shuffle, kept apart from `seed` so that
    /// runs with different seeds share one held-out split.
    pub split_seed: u64,
    pub val_fraction: f64,
    pub max_iters: u64,
    pub batch_size: usize,
    pub pooling: PoolingMode,
    pub fusion: FusionMode,
    pub modality: ModalityMask,
    /// Held-out evaluation period in iterations; 0 evaluates only at the end.
    pub eval_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.005,
            decay_factor: 0.1,
            decay_at_iter: 1500,
            warmup_iters: 1000,
            gamma: 2.0,
            layers: 4,
            hidden: 512,
            edges: EdgeRules::default(),
            seed: 0,
            split_seed: 0,
            val_fraction: 0.2,
            max_iters: 3000,
            batch_size: 32,
            pooling: PoolingMode::Learned,
            fusion: FusionMode::Attention,
            modality: ModalityMask::Both,
            eval_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return bad(format!("decay_factor must be > 0, got {}", self.decay_factor));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return bad(format!("gamma must be >= 0, got {}", self.gamma));
        }
        if self.layers == 0 || self.hidden == 0 || self.batch_size == 0 {
            return bad("layers, hidden and batch_size must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad(format!("val_fraction must be in [0, 1), got {}", self.val_fraction));
        }
        let betas_ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2);
        if !betas_ok || self.eps.is_nan() || self.eps <= 0.0 {
            return bad("adam betas must be in [0, 1) and eps > 0".into());
        }
        self.edges.validate()
    }

    /// Model layout for a dataset with the given feature dims and node counts.
    pub fn model_config(&self, d_audio: usize, d_video: usize, n_audio: usize, n_video: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            d_audio,
            d_video,
            n_audio,
            n_video,
            hidden: self.hidden,
            layers: self.layers,
            num_classes,
            pooling: self.pooling,
            fusion: self.fusion,
            modality: self.modality,
        }
    }
}

/// Learning rate at a 0-based iteration: linear warm-up from 0, then the base
/// rate, then `lr * decay_factor` from `decay_at_iter` on.
pub fn lr_at(iter: u64, cfg: &TrainConfig) -> f64 {
    if iter >= cfg.decay_at_iter {
        cfg.lr * cfg.decay_factor
    } else if iter < cfg.warmup_iters {
        cfg.lr * iter as f64 / cfg.warmup_iters as f64
    } else {
        cfg.lr
    }
}

/// Seeded train/validation split: `(train, val)` sample indices.
pub fn split_indices(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut n_val = (n as f64 * val_fraction).round() as usize;
    if n_val >= n {
        n_val = n.saturating_sub(1);
    }
    let val = idx[..n_val].to_vec();
    let mut train = idx[n_val..].to_vec();
    train.sort_unstable();
    let mut val = val;
    val.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub map: Option<f64>,
    pub roc_auc: Option<f64>,
}

/// Renders the metric history as `iter,loss,lr,map,roc_auc` CSV.
pub fn history_csv(rows: &[HistoryRow]) -> String {
    let mut out = String::from("iter,loss,lr,map,roc_auc\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.iter, r.loss, r.lr, opt(r.map), opt(r.roc_auc));
    }
    out
}

pub fn write_history_csv(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    std::fs::write(path, history_csv(rows)).map_err(Error::at_path(path))
}

/// Validates that a dataset can feed a model built from `cfg`, returning the
/// model layout.
pub fn preflight(dataset: &Dataset, cfg: &TrainConfig) -> Result<ModelConfig> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    let (d_audio, d_video) = dataset.dims()?;
    let first = &dataset.samples[0].graph;
    let (n_audio, n_video) = (first.n_audio(), first.n_video());
    if cfg.pooling == PoolingMode::Learned {
        let odd = dataset.count_mismatches(n_audio, n_video);
        if !odd.is_empty() {
            return Err(Error::Dataset(format!(
                "learned pooling needs uniform node counts ({n_audio} audio, {n_video} video); differing items: {}",
                odd.join(", ")
            )));
        }
    }
    let model = cfg.model_config(d_audio, d_video, n_audio, n_video, dataset.num_classes);
    model.validate()?;
    Ok(model)
}

/// Stateful training loop over one dataset.
///
/// Mini-batches are drawn from per-epoch shuffles of the training split; the
/// shuffle for epoch `e` depends only on `(seed, e)`, so the sampler position
/// is fully described by the iteration count.
#[derive(Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: HgnnModel<f32>,
    pub adam: AdamState<f32>,
    pub iteration: u64,
    pub history: Vec<HistoryRow>,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    names: Vec<String>,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

impl Trainer {
    pub fn new(dataset: &Dataset, cfg: &TrainConfig) -> Result<Self> {
        let model_cfg = preflight(dataset, cfg)?;
        let model = HgnnModel::new(model_cfg, &mut rng_from_seed(cfg.seed))?;
        let adam = AdamState::new(model.params().iter().map(|(_, t)| t.shape()), cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Self::assemble(dataset, cfg.clone(), model, adam, 0))
    }

    /// Continues from a checkpoint; the dataset must match its layout.
    pub fn resume(dataset: &Dataset, checkpoint: Checkpoint) -> Result<Self> {
        let expected = preflight(dataset, &checkpoint.train)?;
        if expected != checkpoint.model.config {
            return Err(Error::Dataset(format!(
                "checkpoint model {:?} does not fit dataset layout {:?}",
                checkpoint.model.config, expected
            )));
        }
        Ok(Self::assemble(
            dataset,
            checkpoint.train,
            checkpoint.model,
            checkpoint.adam,
            checkpoint.iteration,
        ))
    }

    fn assemble(dataset: &Dataset, config: TrainConfig, model: HgnnModel<f32>, adam: AdamState<f32>, iteration: u64) -> Self {
        let (train_idx, val_idx) = split_indices(dataset.len(), config.val_fraction, config.split_seed);
        let names = model.param_names();
        Trainer {
            config,
            model,
            adam,
            iteration,
            history: Vec::new(),
            train_idx,
            val_idx,
            names,
            epoch_cache: None,
        }
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val_idx
    }

    /// Held-out samples, or the training samples when the split left none.
    pub fn eval_samples(&self, dataset: &Dataset) -> Vec<Sample> {
        let idx = if self.val_idx.is_empty() { &self.train_idx } else { &self.val_idx };
        idx.iter().map(|&i| dataset.samples[i].clone()).collect()
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = rng_from_seed(self.config.seed);
            rng.set_stream(epoch + 1);
            let mut order = self.train_idx.clone();
            order.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("filled above").1
    }

    fn batch(&mut self, iter: u64) -> Vec<usize> {
        let n = self.train_idx.len() as u64;
        let b = self.config.batch_size as u64;
        (iter * b..(iter + 1) * b)
            .map(|pos| {
                let (epoch, offset) = (pos / n, pos % n);
                self.epoch_order(epoch)[offset as usize]
            })
            .collect()
    }

    pub fn sampler_state(&self) -> SamplerState {
        SamplerState {
            seed: self.config.seed,
            split_seed: self.config.split_seed,
            next_position: self.iteration * self.config.batch_size as u64,
        }
    }

    /// Mean focal loss and batch-averaged gradients at the current weights.
    pub fn loss_and_grads(&self, dataset: &Dataset, batch: &[usize]) -> Result<(f64, Vec<Tensor<f32>>)> {
        let mut grads: Vec<Tensor<f32>> = self
            .model
            .params()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows(), t.cols()))
            .collect();
        let scale = 1.0 / batch.len() as f32;
        let mut loss_sum = 0.0f64;
        for &i in batch {
            let sample = &dataset.samples[i];
            let mut tape = Tape::new();
            let out = self.model.forward(&mut tape, &sample.graph)?;
            let loss = focal_loss(&mut tape, out.probs, &sample.labels, self.config.gamma)?;
            loss_sum += tape.value(loss).get(0, 0) as f64;
            tape.backward(loss)?;
            for (acc, var) in grads.iter_mut().zip(&out.params.all) {
                if let Some(g) = tape.grad(*var) {
                    for (a, &x) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += x * scale;
                    }
                }
            }
        }
        Ok((loss_sum / batch.len() as f64, grads))
    }

    /// One optimizer step; returns the recorded history row.
    pub fn step(&mut self, dataset: &Dataset) -> Result<HistoryRow> {
        let iter = self.iteration;
        let lr = lr_at(iter, &self.config);
        let batch = self.batch(iter);
        let (loss, grads) = self.loss_and_grads(dataset, &batch)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "focal_loss" });
        }
        let mut params = self.model.params_mut();
        adam_step(&mut params, &grads, &self.names, &mut self.adam, lr)?;
        self.iteration += 1;

        let every = self.config.eval_every;
        let due = (every > 0 && self.iteration.is_multiple_of(every)) || self.iteration == self.config.max_iters;
        let (map, roc_auc) = if due {
            let eval = evaluate(&self.model, &self.eval_samples(dataset))?;
            info!(
                "iter {} loss {loss:.5} lr {lr:.6} mAP {:?} AUC {:?}",
                self.iteration, eval.map, eval.roc_auc
            );
            (eval.map, eval.roc_auc)
        } else {
            (None, None)
        };
        let row = HistoryRow {
            iter,
            loss,
            lr,
            map,
            roc_auc,
        };
        self.history.push(row.clone());
        Ok(row)
    }

    /// Steps until `iteration == until` (or `max_iters` when `None`).
    pub fn run(&mut self, dataset: &Dataset, until: Option<u64>) -> Result<()> {
        let until = until.unwrap_or(self.config.max_iters);
        while self.iteration < until {
            self.step(dataset)?;
        }
        Ok(())
    }

    pub fn evaluate(&self, dataset: &Dataset) -> Result<EvalResult> {
        evaluate(&self.model, &self.eval_samples(dataset))
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            train: self.config.clone(),
            model: self.model.clone(),
            adam: self.adam.clone(),
            iteration: self.iteration,
            sampler: self.sampler_state(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryRow>,
    /// Metrics on the held-out split after the final iteration.
    pub eval: EvalResult,
}

/// Full training run to `cfg.max_iters`.
pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(dataset, cfg)?;
    trainer.run(dataset, None)?;
    let eval = trainer.evaluate(dataset)?;
    Ok(TrainOutcome {
        checkpoint: trainer.checkpoint(),
        history: trainer.history,
        eval,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub map: Option<f64>,
    pub roc_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub runs: Vec<SeedResult>,
    pub map_mean: f64,
    pub map_std: f64,
    pub roc_auc_mean: f64,
    pub roc_auc_std: f64,
}

/// Mean and sample standard deviation; std is 0 for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(runs: Vec<SeedResult>) -> SeedSummary {
    let maps: Vec<f64> = runs.iter().filter_map(|r| r.map).collect();
    let aucs: Vec<f64> = runs.iter().filter_map(|r| r.roc_auc).collect();
    let (map_mean, map_std) = mean_std(&maps);
    let (roc_auc_mean, roc_auc_std) = mean_std(&aucs);
    SeedSummary {
        runs,
        map_mean,
        map_std,
        roc_auc_mean,
        roc_auc_std,
    }
}

/// Independent runs, one per seed, each scored on the shared held-out split.
/// `on_run` sees every finished run (for writing checkpoints, say).
pub fn run_seeds(
    dataset: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    mut on_run: impl FnMut(u64, &TrainOutcome) -> Result<()>,
) -> Result<SeedSummary> {
    if seeds.is_empty() {
        return Err(Error::Config("run_seeds needs at least one seed".into()));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let outcome = train(dataset, &TrainConfig { seed, ..cfg.clone() })?;
        on_run(seed, &outcome)?;
        runs.push(SeedResult {
            seed,
            map: outcome.eval.map,
            roc_auc: outcome.eval.roc_auc,
        });
    }
    Ok(summarize(runs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(500, &cfg), 0.0025);
        assert_eq!(lr_at(1000, &cfg), 0.005);
        assert_eq!(lr_at(1499, &cfg), 0.005);
        assert_eq!(lr_at(1500, &cfg), 0.005 * 0.1);
        assert_eq!(lr_at(0, &cfg), 0.0);
        // continuous at the end of warm-up
        assert!((lr_at(999, &cfg) - 0.005).abs() <= 0.005 / 1000.0 + 1e-15);
    }

    #[test]
    fn split_is_seeded_and_disjoint() {
        let (tr, va) = split_indices(100, 0.2, 1);
        assert_eq!((tr.len(), va.len()), (80, 20));
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!(split_indices(100, 0.2, 1), (tr.clone(), va.clone()));
        assert_ne!(split_indices(100, 0.2, 2).1, va);
        assert_eq!(split_indices(1, 0.2, 0), (vec![0], vec![]));
    }

    #[test]
    fn mean_std_single_and_pair() {
        assert_eq!(mean_std(&[0.4]), (0.4, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { gamma: -1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..Default::default() }.validate().is_err());
        let cfg: TrainConfig = serde_json::from_str(r#"{"hidden": 8, "fusion": "gcn"}"#).unwrap();
        assert_eq!(cfg.hidden, 8);
        assert_eq!(cfg.fusion, FusionMode::Gcn);
        assert_eq!(cfg.lr, 0.005);
    }

    #[test]
    fn history_csv_format() {
        let rows = [
            HistoryRow { iter: 0, loss: 0.5, lr: 0.0, map: None, roc_auc: None },
            HistoryRow { iter: 1, loss: 0.25, lr: 0.001, map: Some(1.0), roc_auc: Some(0.75) },
        ];
        assert_eq!(history_csv(&rows), "iter,loss,lr,map,roc_auc\n0,0.5,0,,\n1,0.25,0.001,1,0.75\n");
    }
}

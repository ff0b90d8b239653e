use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use hgav::data::{generate_synthetic, load_dataset, DatasetManifest, SynthMode, SynthSpec};
use hgav::graph::{cross_modal_edges, temporal_edges, BinaryAdjacency, EdgeRules};
use hgav::layers::{attention_node_scores, FusionMode, ModalityMask, PoolingMode};
use hgav::metrics::evaluate;
use hgav::training::{run_seeds, write_history_csv, Checkpoint, TrainConfig, Trainer};
use hgav::{Error, Result};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "hgav", version, about = "Heterogeneous audio-visual graph networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic audio-visual dataset.
    GenSynth(GenSynthArgs),
    /// Train a model (one run per seed).
    Train(TrainArgs),
    /// Evaluate a checkpoint on every item of a dataset.
    Eval(EvalArgs),
    /// Print the edge lists built for given node counts.
    InspectGraph(InspectArgs),
    /// Export per-audio-node attention for one item as CSV.
    DumpAttention(DumpArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModeArg {
    AudioOnlySolvable,
    FusionRequired,
}

impl From<ModeArg> for SynthMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::AudioOnlySolvable => SynthMode::AudioOnlySolvable,
            ModeArg::FusionRequired => SynthMode::FusionRequired,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FusionArg {
    Attention,
    Gcn,
    Off,
}

impl From<FusionArg> for FusionMode {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Attention => FusionMode::Attention,
            FusionArg::Gcn => FusionMode::Gcn,
            FusionArg::Off => FusionMode::Off,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PoolingArg {
    Learned,
    Mean,
    Max,
    Sum,
}

impl From<PoolingArg> for PoolingMode {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Learned => PoolingMode::Learned,
            PoolingArg::Mean => PoolingMode::Mean,
            PoolingArg::Max => PoolingMode::Max,
            PoolingArg::Sum => PoolingMode::Sum,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ModalityArg {
    Both,
    AudioOnly,
    VideoOnly,
}

impl From<ModalityArg> for ModalityMask {
    fn from(m: ModalityArg) -> Self {
        match m {
            ModalityArg::Both => ModalityMask::Both,
            ModalityArg::AudioOnly => ModalityMask::AudioOnly,
            ModalityArg::VideoOnly => ModalityMask::VideoOnly,
        }
    }
}

#[derive(Args, Debug)]
struct GenSynthArgs {
    /// JSON file with generator settings; omitted fields take defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    mode: Option<ModeArg>,
    #[arg(long)]
    n_items: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON run config (`train`, `data`, `out` keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset manifest.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; each run goes to `out/seed_<s>`.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Continue from a checkpoint; its stored config is used.
    #[arg(long, conflicts_with = "seeds")]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_iters: Option<u64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    fusion: Option<FusionArg>,
    #[arg(long)]
    pooling: Option<PoolingArg>,
    #[arg(long)]
    modality: Option<ModalityArg>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    /// JSON run config; only `train.edges` is read.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_audio: usize,
    #[arg(long)]
    n_video: usize,
}

#[derive(Args, Debug)]
struct DumpArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    item: String,
}

/// Run configuration file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    train: TrainConfig,
    data: Option<PathBuf>,
    out: Option<PathBuf>,
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::at_path(path))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(Error::at_path(path))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(Error::at_path(path))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}")?;
    Ok(())
}

fn gen_synth(args: GenSynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &args.spec {
        Some(p) => read_json(p)?,
        None => SynthSpec::default(),
    };
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(m) = args.mode {
        spec.mode = m.into();
    }
    if let Some(n) = args.n_items {
        spec.n_items = n;
    }
    if let Some(s) = args.noise_sigma {
        spec.noise_sigma = s;
    }
    let data = generate_synthetic(&spec)?;
    let manifest = data.write(&args.out)?;
    write_json(&args.out.join("spec.json"), &spec)?;
    print_json(&json!({
        "manifest": manifest,
        "items": spec.n_items,
        "n_audio": spec.n_audio,
        "n_video": spec.n_video,
        "d_audio": spec.d_audio,
        "d_video": spec.d_video,
        "num_classes": spec.num_classes,
        "mode": spec.mode,
        "spec": spec,
    }))
}

fn apply_overrides(cfg: &mut TrainConfig, a: &TrainArgs) {
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.max_iters {
        cfg.max_iters = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.hidden {
        cfg.hidden = v;
    }
    if let Some(v) = a.layers {
        cfg.layers = v;
    }
    if let Some(v) = a.eval_every {
        cfg.eval_every = v;
    }
    if let Some(v) = a.fusion {
        cfg.fusion = v.into();
    }
    if let Some(v) = a.pooling {
        cfg.pooling = v.into();
    }
    if let Some(v) = a.modality {
        cfg.modality = v.into();
    }
}

fn train(args: TrainArgs) -> Result<()> {
    let mut run: RunConfig = match &args.config {
        Some(p) => read_json(p)?,
        None => RunConfig::default(),
    };
    if args.data.is_some() {
        run.data = args.data.clone();
    }
    if args.out.is_some() {
        run.out = args.out.clone();
    }
    let data = run.data.clone().ok_or_else(|| Error::Config("no dataset: pass --data or set `data`".into()))?;
    let out = run.out.clone().ok_or_else(|| Error::Config("no output dir: pass --out or set `out`".into()))?;

    let resumed = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(ck) = &resumed {
        run.train = ck.train.clone();
        if let Some(v) = args.max_iters {
            run.train.max_iters = v;
        }
    } else {
        apply_overrides(&mut run.train, &args);
    }
    run.train.validate()?;
    create_dir(&out)?;
    write_json(&out.join("effective_config.json"), &run)?;
    eprintln!("effective config: {}", serde_json::to_string(&run)?);

    let dataset = load_dataset(&data, &run.train.edges)?;
    info!("loaded {} items from {}", dataset.len(), data.display());

    if let Some(mut ck) = resumed {
        ck.train.max_iters = run.train.max_iters;
        let mut trainer = Trainer::resume(&dataset, ck)?;
        trainer.run(&dataset, None)?;
        let eval = trainer.evaluate(&dataset)?;
        trainer.checkpoint().save(&out.join("checkpoint.hgck"))?;
        write_history_csv(&out.join("history.csv"), &trainer.history)?;
        write_json(&out.join("eval.json"), &eval)?;
        return print_json(&json!({ "map": eval.map, "roc_auc": eval.roc_auc, "iteration": trainer.iteration }));
    }

    if args.seeds.is_empty() {
        let mut trainer = Trainer::new(&dataset, &run.train)?;
        trainer.run(&dataset, None)?;
        let eval = trainer.evaluate(&dataset)?;
        trainer.checkpoint().save(&out.join("checkpoint.hgck"))?;
        write_history_csv(&out.join("history.csv"), &trainer.history)?;
        write_json(&out.join("eval.json"), &eval)?;
        return print_json(&json!({ "map": eval.map, "roc_auc": eval.roc_auc, "params": trainer.model.count_params() }));
    }

    let summary = run_seeds(&dataset, &run.train, &args.seeds, |seed, outcome| {
        let dir = out.join(format!("seed_{seed}"));
        create_dir(&dir)?;
        outcome.checkpoint.save(&dir.join("checkpoint.hgck"))?;
        write_history_csv(&dir.join("history.csv"), &outcome.history)?;
        write_json(&dir.join("eval.json"), &outcome.eval)?;
        info!("seed {seed}: mAP {:?} AUC {:?}", outcome.eval.map, outcome.eval.roc_auc);
        Ok(())
    })?;
    write_json(&out.join("aggregate.json"), &summary)?;
    print_json(&summary)
}

fn eval(args: EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let dataset = load_dataset(&args.data, &ck.train.edges)?;
    for s in &dataset.samples {
        ck.model
            .check_graph(&s.graph)
            .map_err(|e| Error::Dataset(format!("item `{}`: {e}", s.id)))?;
    }
    print_json(&evaluate(&ck.model, &dataset.samples)?)
}

fn degree_stats(adj: &BinaryAdjacency, by_row: bool) -> serde_json::Value {
    let n = if by_row { adj.rows() } else { adj.cols() };
    let deg: Vec<usize> = (0..n)
        .map(|i| if by_row { adj.row_degree(i) } else { adj.col_degree(i) })
        .collect();
    let total: usize = deg.iter().sum();
    json!({
        "min": deg.iter().min(),
        "max": deg.iter().max(),
        "mean": if n == 0 { 0.0 } else { total as f64 / n as f64 },
    })
}

fn inspect_graph(args: InspectArgs) -> Result<()> {
    let rules = match &args.config {
        Some(p) => read_json::<RunConfig>(p)?.train.edges,
        None => EdgeRules::default(),
    };
    rules.validate()?;
    let aa = temporal_edges(args.n_audio, rules.audio);
    let vv = temporal_edges(args.n_video, rules.video);
    let va = cross_modal_edges(args.n_audio, args.n_video, rules.cross);
    print_json(&json!({
        "rules": rules,
        "aa_edges": aa.undirected_edges(),
        "vv_edges": vv.undirected_edges(),
        "va_edges": va.edges(),
        "degrees": {
            "audio": degree_stats(&aa, true),
            "video": degree_stats(&vv, true),
            "cross_audio": degree_stats(&va, true),
            "cross_video": degree_stats(&va, false),
        },
    }))
}

fn dump_attention(args: DumpArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    if !ck.model.config.fusion_active() || ck.model.config.fusion != FusionMode::Attention {
        return Err(Error::Config("no attention to dump: checkpoint has no attention fusion".into()));
    }
    let manifest = DatasetManifest::load(&args.data)?;
    if !manifest.items.iter().any(|i| i.id == args.item) {
        return Err(Error::Dataset(format!("no item `{}` in {}", args.item, args.data.display())));
    }
    let dataset = load_dataset(&args.data, &ck.train.edges)?;
    let sample = dataset.find(&args.item).expect("checked above");
    let pred = ck.model.predict(&sample.graph)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "layer,audio_node,attention")?;
    for (layer, alpha) in pred.attention.iter().enumerate() {
        for (node, v) in attention_node_scores(alpha).iter().enumerate() {
            writeln!(out, "{layer},{node},{v}")?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenSynth(a) => gen_synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::InspectGraph(a) => inspect_graph(a),
        Command::DumpAttention(a) => dump_attention(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}

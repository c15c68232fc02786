//! Operator surface: train and evaluate models, export parse trees, render
//! hallucination and composition panels, and run the transfer evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use anyhow::{anyhow, bail, Context, Result};
use apcn_core::autodiff::{ParamStore, Tensor};
use apcn_core::baselines::{self, RbModel, RbTask};
use apcn_core::checkpoint::{self, CheckpointMeta};
use apcn_core::config::ApcnConfig;
use apcn_core::data::{self, Dataset, Split};
use apcn_core::model::{export_parse_tree, Apcn, ApcnSingle, EpisodeModel, Mode};
use apcn_core::render;
use apcn_core::training::{self, Adam, MetricsLog};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
}

#[derive(Parser)]
#[command(name = "apcn", version, about = "Active predictive coding networks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and stream checkpoints + metrics to the output directory
    Train(TrainArgs),
    /// Per-pixel reconstruction error (or accuracy) of a checkpoint on a split
    Eval(EvalArgs),
    /// Run one episode and export its parse tree (JSON) and panel (PNG)
    Parse(ParseArgs),
    /// Complete an input from internal dynamics with prediction errors zeroed
    Hallucinate(HallucinateArgs),
    /// Swap top-level vectors between two inputs and complete both
    Compose(ComposeArgs),
    /// Evaluate a checkpoint on the Omniglot test and transfer splits
    Transfer(TransferArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModelKind {
    Apcn2,
    Apcn1,
    Rb,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TaskKind {
    Recon,
    Class,
}

#[derive(Args)]
struct ConfigArgs {
    /// Configuration file (key = value lines)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset preset and source: mnist, fashion or omniglot
    #[arg(long)]
    dataset: Option<String>,
    /// Dataset directory override
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Random seed override
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override
    #[arg(long)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ApcnConfig> {
        let mut cfg = match (&self.config, &self.dataset) {
            (Some(path), _) => ApcnConfig::from_file(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            (None, Some(ds)) => ApcnConfig::preset(ds)?,
            (None, None) => bail!("pass --config or --dataset"),
        };
        if let Some(ds) = &self.dataset {
            if cfg.dataset != *ds {
                // switch presets but keep explicit config text overrides out
                // of scope: dataset flag wins for source selection
                cfg.dataset = ds.clone();
            }
        }
        if let Some(dir) = &self.data_dir {
            cfg.data_dir = dir.display().to_string();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.display().to_string();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Which model to train
    #[arg(value_enum)]
    model: ModelKind,
    #[command(flatten)]
    common: ConfigArgs,
    /// Resume from a checkpoint
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Task for the random baseline
    #[arg(long, value_enum, default_value = "recon")]
    task: TaskKind,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: ConfigArgs,
    /// Which split to evaluate
    #[arg(long, default_value = "test")]
    split: String,
    /// Evaluate at most this many images (0 = all)
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

#[derive(Args)]
struct ParseArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: ConfigArgs,
    /// Index into the chosen split
    #[arg(long)]
    index: Option<usize>,
    /// Arbitrary image file instead of a dataset index
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct HallucinateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Macro-steps to mask, e.g. "0,1,2" or "all"
    #[arg(long, default_value = "all")]
    mask: String,
}

#[derive(Args)]
struct ComposeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: ConfigArgs,
    #[arg(long)]
    index_a: Option<usize>,
    #[arg(long)]
    index_b: Option<usize>,
    #[arg(long)]
    image_a: Option<PathBuf>,
    #[arg(long)]
    image_b: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Exchange the top-level vectors after this many macro-steps
    #[arg(long, default_value_t = 2)]
    swap_after: usize,
}

#[derive(Args)]
struct TransferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    common: ConfigArgs,
    /// Evaluate at most this many images per split (0 = all)
    #[arg(long, default_value_t = 0)]
    limit: usize,
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Parse(args) => cmd_parse(args),
        Cmd::Hallucinate(args) => cmd_hallucinate(args),
        Cmd::Compose(args) => cmd_compose(args),
        Cmd::Transfer(args) => cmd_transfer(args),
    }
}

// ---- dataset plumbing ----

struct LoadedData {
    train: Dataset,
    test: Dataset,
    transfer: Option<Dataset>,
    fingerprint: String,
}

fn load_data(cfg: &ApcnConfig) -> Result<LoadedData> {
    let dir = Path::new(&cfg.data_dir);
    match cfg.dataset.as_str() {
        "mnist" | "fashion" => {
            let train = data::load_idx_dir(dir, Split::Train)?;
            let test = data::load_idx_dir(dir, Split::Test)?;
            let mut hasher = Sha256::new();
            for name in [
                "train-images-idx3-ubyte",
                "train-labels-idx1-ubyte",
                "t10k-images-idx3-ubyte",
                "t10k-labels-idx1-ubyte",
            ] {
                hasher.update(std::fs::read(dir.join(name))?);
            }
            Ok(LoadedData {
                train,
                test,
                transfer: None,
                fingerprint: hex(&hasher.finalize()),
            })
        }
        "omniglot" => {
            let (classes, skipped) = data::load_omniglot(dir, cfg.image_side)?;
            if skipped > 0 {
                eprintln!("warning: skipped {skipped} unreadable images");
            }
            let split = data::make_transfer_split(&classes, cfg.seed);
            let out = Path::new(&cfg.out_dir);
            std::fs::create_dir_all(out)?;
            data::save_split(&out.join("split.json"), &split)?;
            let [train, test, transfer] = data::apply_split(&classes, &split)?;
            let mut hasher = Sha256::new();
            for c in &classes {
                hasher.update(c.key().as_bytes());
                hasher.update((c.images.len() as u64).to_le_bytes());
            }
            hasher.update(cfg.seed.to_le_bytes());
            Ok(LoadedData {
                train,
                test,
                transfer: Some(transfer),
                fingerprint: hex(&hasher.finalize()),
            })
        }
        other => bail!("unknown dataset `{other}`"),
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn pick_split<'a>(data: &'a LoadedData, split: &str) -> Result<&'a Dataset> {
    match split.parse::<Split>()? {
        Split::Train => Ok(&data.train),
        Split::Test => Ok(&data.test),
        Split::Transfer => data
            .transfer
            .as_ref()
            .ok_or_else(|| anyhow!("this dataset has no transfer split")),
    }
}

fn pick_image(
    cfg: &ApcnConfig,
    data: &LoadedData,
    split: &str,
    index: Option<usize>,
    image: &Option<PathBuf>,
) -> Result<Tensor> {
    match (image, index) {
        (Some(path), _) => Ok(data::load_png_gray(path, cfg.image_side)?),
        (None, Some(i)) => {
            let ds = pick_split(data, split)?;
            ds.images
                .get(i)
                .cloned()
                .ok_or_else(|| anyhow!("index {i} out of range ({} images)", ds.len()))
        }
        (None, None) => bail!("pass --index or --image"),
    }
}

// ---- model construction and checkpoints ----

fn build_apcn(cfg: &ApcnConfig) -> (ParamStore, Apcn) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Apcn::new(&mut store, cfg, &mut rng);
    (store, model)
}

fn build_apcn1(cfg: &ApcnConfig) -> (ParamStore, ApcnSingle) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = ApcnSingle::new(&mut store, cfg, &mut rng);
    (store, model)
}

fn build_rb(cfg: &ApcnConfig, task: RbTask) -> (ParamStore, RbModel) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = RbModel::new(&mut store, cfg, task, &mut rng);
    (store, model)
}

fn checkpoint_kind(path: &Path) -> Result<CheckpointMeta> {
    let (_, meta, _) = checkpoint::load(path)?;
    Ok(meta)
}

fn write_manifest(cfg: &ApcnConfig, kind: &str, fingerprint: &str) -> Result<()> {
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    let manifest = serde_json::json!({
        "version": env!("CARGO_PKG_VERSION"),
        "model": kind,
        "seed": cfg.seed,
        "dataset": cfg.dataset,
        "dataset_fingerprint": fingerprint,
        "config": cfg.to_text(),
        "outputs": {
            "checkpoint": out.join("checkpoint.ckpt"),
            "best": out.join("best.ckpt"),
            "metrics": out.join("metrics.csv"),
        },
        "command": std::env::args().collect::<Vec<_>>().join(" "),
    });
    std::fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

// ---- train ----

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = args.learning_rate {
        cfg.learning_rate = lr;
    }
    let data = load_data(&cfg)?;
    let out = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out)?;
    let metrics = MetricsLog::create(out.join("metrics.csv"))?;

    match args.model {
        ModelKind::Rb => {
            let task = match args.task {
                TaskKind::Recon => RbTask::Reconstruction,
                TaskKind::Class => RbTask::Classification { classes: 10 },
            };
            let (mut store, model) = build_rb(&cfg, task);
            write_manifest(&cfg, task.kind(), &data.fingerprint)?;
            let mut adam = Adam::new(&store, cfg.learning_rate);
            let start = resume(&args.checkpoint, &mut store, &mut adam, task.kind(), &cfg)?;
            let digest = cfg.arch_digest();
            let out2 = out.clone();
            let mut best = f64::INFINITY;
            baselines::train_rb(
                &model,
                &mut store,
                &mut adam,
                &data.train,
                &data.test,
                &cfg,
                start,
                Some(&metrics),
                |store, adam, report| {
                    println!(
                        "epoch {:>3}  train loss {:.5}  eval {:.5}",
                        report.epoch, report.train_loss, report.eval_metric
                    );
                    let meta = CheckpointMeta {
                        kind: task.kind().into(),
                        arch_digest: digest,
                        epoch: report.epoch as u32 + 1,
                        adam_step: adam.step_count,
                    };
                    let blobs = adam.state_blobs();
                    checkpoint::save(&out2.join("checkpoint.ckpt"), store, &meta, Some(&blobs))?;
                    if report.eval_metric < best {
                        best = report.eval_metric;
                        checkpoint::save(&out2.join("best.ckpt"), store, &meta, None)?;
                    }
                    Ok(())
                },
            )?;
        }
        ModelKind::Apcn2 | ModelKind::Apcn1 => {
            let (mut store, model): (ParamStore, Box<dyn EpisodeModel>) =
                if args.model == ModelKind::Apcn2 {
                    let (s, m) = build_apcn(&cfg);
                    (s, Box::new(m))
                } else {
                    let (s, m) = build_apcn1(&cfg);
                    (s, Box::new(m))
                };
            write_manifest(&cfg, model.kind(), &data.fingerprint)?;
            let mut adam = Adam::new(&store, cfg.learning_rate);
            let start = resume(&args.checkpoint, &mut store, &mut adam, model.kind(), &cfg)?;
            let digest = cfg.arch_digest();
            let kind = model.kind().to_string();
            let out2 = out.clone();
            let mut best = f64::INFINITY;
            let outcome = training::train_episodic(
                model.as_ref(),
                &mut store,
                &mut adam,
                &data.train.images,
                &data.test.images,
                &cfg,
                start,
                Some(&metrics),
                |store, adam, report| {
                    println!(
                        "epoch {:>3}  loss {:.5}  train mse {:.5}  reward {:+.6}  eval mse {:.5}",
                        report.epoch,
                        report.train.mean_total(),
                        report.train.mean_mse(),
                        report.train.mean_reward(),
                        report.eval_mse
                    );
                    let meta = CheckpointMeta {
                        kind: kind.clone(),
                        arch_digest: digest,
                        epoch: report.epoch as u32 + 1,
                        adam_step: adam.step_count,
                    };
                    let blobs = adam.state_blobs();
                    checkpoint::save(&out2.join("checkpoint.ckpt"), store, &meta, Some(&blobs))?;
                    if report.eval_mse < best {
                        best = report.eval_mse;
                        checkpoint::save(&out2.join("best.ckpt"), store, &meta, None)?;
                    }
                    Ok(())
                },
            )?;
            println!(
                "done: {} epochs, final eval mse {:.5}",
                outcome.epochs_run, outcome.final_eval_mse
            );
        }
    }
    Ok(())
}

fn resume(
    path: &Option<PathBuf>,
    store: &mut ParamStore,
    adam: &mut Adam,
    kind: &str,
    cfg: &ApcnConfig,
) -> Result<usize> {
    let Some(path) = path else { return Ok(0) };
    let (meta, opt) = checkpoint::load_into(path, store, kind, cfg.arch_digest())?;
    if let Some((m, v)) = opt {
        adam.restore(m, v, meta.adam_step);
    }
    println!("resumed {} at epoch {}", path.display(), meta.epoch);
    Ok(meta.epoch as usize)
}

/// Load a checkpoint into the right model for its kind.
enum AnyModel {
    Episodic(Box<dyn EpisodeModel>),
    Rb(RbModel, RbTask),
}

fn load_model(path: &Path, cfg: &ApcnConfig) -> Result<(ParamStore, AnyModel, CheckpointMeta)> {
    let meta = checkpoint_kind(path)?;
    let digest = cfg.arch_digest();
    match meta.kind.as_str() {
        "apcn2" => {
            let (mut store, model) = build_apcn(cfg);
            let (meta, _) = checkpoint::load_into(path, &mut store, "apcn2", digest)?;
            Ok((store, AnyModel::Episodic(Box::new(model)), meta))
        }
        "apcn1" => {
            let (mut store, model) = build_apcn1(cfg);
            let (meta, _) = checkpoint::load_into(path, &mut store, "apcn1", digest)?;
            Ok((store, AnyModel::Episodic(Box::new(model)), meta))
        }
        "rb-recon" => {
            let (mut store, model) = build_rb(cfg, RbTask::Reconstruction);
            let (meta, _) = checkpoint::load_into(path, &mut store, "rb-recon", digest)?;
            Ok((store, AnyModel::Rb(model, RbTask::Reconstruction), meta))
        }
        "rb-class" => {
            let task = RbTask::Classification { classes: 10 };
            let (mut store, model) = build_rb(cfg, task);
            let (meta, _) = checkpoint::load_into(path, &mut store, "rb-class", digest)?;
            Ok((store, AnyModel::Rb(model, task), meta))
        }
        other => bail!("unknown model kind `{other}` in checkpoint"),
    }
}

fn load_apcn2(path: &Path, cfg: &ApcnConfig) -> Result<(ParamStore, Apcn)> {
    let (mut store, model) = build_apcn(cfg);
    checkpoint::load_into(path, &mut store, "apcn2", cfg.arch_digest())?;
    Ok((store, model))
}

// ---- eval ----

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = load_data(&cfg)?;
    let ds = pick_split(&data, &args.split)?;
    let images: &[Tensor] = if args.limit > 0 && args.limit < ds.len() {
        &ds.images[..args.limit]
    } else {
        &ds.images
    };
    let (store, model, meta) = load_model(&args.checkpoint, &cfg)?;
    let report = match &model {
        AnyModel::Episodic(m) => {
            let mse = training::evaluate_mse(m.as_ref(), &store, images, cfg.seed)?;
            serde_json::json!({
                "model": meta.kind,
                "split": args.split,
                "count": images.len(),
                "per_pixel_mse": mse,
            })
        }
        AnyModel::Rb(m, task) => match task {
            RbTask::Reconstruction => {
                let mse =
                    baselines::evaluate_rb_mse(m, &store, ds, cfg.seed, args.limit)?;
                serde_json::json!({
                    "model": meta.kind,
                    "split": args.split,
                    "count": images.len(),
                    "per_pixel_mse": mse,
                })
            }
            RbTask::Classification { .. } => {
                let acc =
                    baselines::evaluate_rb_accuracy(m, &store, ds, cfg.seed, args.limit)?;
                serde_json::json!({
                    "model": meta.kind,
                    "split": args.split,
                    "count": images.len(),
                    "accuracy": acc,
                })
            }
        },
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("eval.json"), text)?;
    Ok(())
}

// ---- parse / hallucinate / compose / transfer ----

fn cmd_parse(args: ParseArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = load_data(&cfg)?;
    let image = pick_image(&cfg, &data, &args.split, args.index, &args.image)?;
    let (store, model) = load_apcn2(&args.checkpoint, &cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tape, trace) = model.run_episode(&store, &image, &Mode::Eval, &mut rng)?;
    let tree = export_parse_tree(&tape, &trace)?;
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("parse.json"), serde_json::to_string_pretty(&tree)?)?;
    let panel = render::parse_panel(&tape, &trace, 8)?;
    panel.save(out.join("parse.png"))?;
    println!(
        "parse tree with {} nodes -> {}",
        tree.node_count(),
        out.join("parse.json").display()
    );
    Ok(())
}

fn parse_mask(mask: &str, macro_steps: usize) -> Result<Vec<bool>> {
    if mask.trim() == "all" {
        return Ok(vec![true; macro_steps]);
    }
    let mut out = vec![false; macro_steps];
    for part in mask.split(',') {
        let idx: usize = part
            .trim()
            .parse()
            .map_err(|_| anyhow!("bad mask entry `{part}`"))?;
        if idx >= macro_steps {
            bail!("mask index {idx} out of range (T2 = {macro_steps})");
        }
        out[idx] = true;
    }
    Ok(out)
}

fn cmd_hallucinate(args: HallucinateArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = load_data(&cfg)?;
    let image = pick_image(&cfg, &data, &args.split, args.index, &args.image)?;
    let (store, model) = load_apcn2(&args.checkpoint, &cfg)?;
    let mask = parse_mask(&args.mask, cfg.macro_steps)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tape_n, trace_n) = model.run_episode(&store, &image, &Mode::Eval, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tape_h, trace_h) =
        model.run_episode(&store, &image, &Mode::Hallucinate(mask), &mut rng)?;

    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    let panel = render::hallucination_panel((&tape_n, &trace_n), (&tape_h, &trace_h), 8)?;
    panel.save(out.join("hallucinate.png"))?;
    let report = serde_json::json!({
        "normal_mse": trace_n.final_mse(&tape_n),
        "hallucinated_mse": trace_h.final_mse(&tape_h),
    });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    std::fs::write(out.join("hallucinate.json"), text)?;
    Ok(())
}

fn cmd_compose(args: ComposeArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    let data = load_data(&cfg)?;
    let image_a = pick_image(&cfg, &data, &args.split, args.index_a, &args.image_a)?;
    let image_b = pick_image(&cfg, &data, &args.split, args.index_b, &args.image_b)?;
    let (store, model) = load_apcn2(&args.checkpoint, &cfg)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tape_a, trace_a) = model.run_episode(&store, &image_a, &Mode::Eval, &mut rng)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (tape_b, trace_b) = model.run_episode(&store, &image_b, &Mode::Eval, &mut rng)?;
    let (hybrid_a, hybrid_b) = model.swap_vectors(
        &store,
        (&tape_a, &trace_a),
        (&tape_b, &trace_b),
        args.swap_after,
    )?;

    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    let panel = render::compose_panel(
        (&tape_a, &trace_a),
        (&tape_b, &trace_b),
        (&hybrid_a.0, &hybrid_a.1),
        (&hybrid_b.0, &hybrid_b.1),
        8,
    )?;
    panel.save(out.join("compose.png"))?;
    println!("composition panel -> {}", out.join("compose.png").display());
    Ok(())
}

fn cmd_transfer(args: TransferArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if cfg.dataset != "omniglot" {
        cfg = ApcnConfig {
            dataset: "omniglot".into(),
            ..ApcnConfig::omniglot()
        };
        cfg = args.common.resolve().unwrap_or(cfg);
    }
    let data = load_data(&cfg)?;
    let transfer = data
        .transfer
        .as_ref()
        .ok_or_else(|| anyhow!("transfer split requires the omniglot dataset"))?;
    let (store, model, meta) = load_model(&args.checkpoint, &cfg)?;
    let limit = |ds: &Dataset| -> Vec<Tensor> {
        if args.limit > 0 && args.limit < ds.len() {
            ds.images[..args.limit].to_vec()
        } else {
            ds.images.clone()
        }
    };
    let (test_mse, transfer_mse) = match &model {
        AnyModel::Episodic(m) => (
            training::evaluate_mse(m.as_ref(), &store, &limit(&data.test), cfg.seed)?,
            training::evaluate_mse(m.as_ref(), &store, &limit(transfer), cfg.seed)?,
        ),
        AnyModel::Rb(m, _) => (
            baselines::evaluate_rb_mse(m, &store, &data.test, cfg.seed, args.limit)?,
            baselines::evaluate_rb_mse(m, &store, transfer, cfg.seed, args.limit)?,
        ),
    };
    let report = serde_json::json!({
        "model": meta.kind,
        "test_mse": test_mse,
        "transfer_mse": transfer_mse,
    });
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    let out = Path::new(&cfg.out_dir);
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("transfer.json"), text)?;
    Ok(())
}

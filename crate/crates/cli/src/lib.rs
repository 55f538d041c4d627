//! The `npiseg` command line: scene generation, training, evaluation,
//! single-episode replay, the HTTP service and the gradient check.

use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use npiseg_core::interaction::{evaluate, run_episode, MetricReport, SimConfig};
use npiseg_core::model::encoder::PreparedScene;
use npiseg_core::model::{Model, ModelConfig, Modulation, PrototypeAggregation};
use npiseg_core::nn::Activation;
use npiseg_core::service::SessionManager;
use npiseg_core::training::{
    load_checkpoint, loss_grad_check, prepare_scenes, save_checkpoint, train_run_with, write_loss_csv, TrainConfig,
};
use npiseg_core::{generate_scenes, read_scene, write_scene, Error, LabeledScene, SceneSpec, SeedTree};

pub mod server;

#[derive(Debug, Parser)]
#[command(name = "npiseg", version, about = "Interactive point-cloud segmentation with latent uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic labelled scenes as NPSC1 files.
    GenScenes(GenScenes),
    /// Train a model and write a checkpoint plus a loss CSV.
    Train(Train),
    /// Run simulated click episodes over a scene directory.
    Eval(Eval),
    /// Replay one simulated episode round by round.
    Episode(Episode),
    /// Serve click-and-refine sessions over HTTP.
    Serve(Serve),
    /// Compare analytic and finite-difference gradients of the training loss.
    GradCheck(GradCheck),
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[arg(long, default_value_t = 1024)]
    pub points: usize,
    #[arg(long, default_value_t = 2)]
    pub min_objects: usize,
    #[arg(long, default_value_t = 4)]
    pub max_objects: usize,
}

impl SceneArgs {
    fn spec(&self) -> SceneSpec {
        SceneSpec {
            num_points: self.points,
            min_objects: self.min_objects,
            max_objects: self.max_objects,
            ..SceneSpec::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct GenScenes {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub scene: SceneArgs,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[arg(long)]
    pub no_scene_latent: bool,
    #[arg(long)]
    pub no_object_latent: bool,
    /// film, concat, add or deterministic.
    #[arg(long, default_value = "film")]
    pub modulation: Modulation,
    #[arg(long, default_value_t = 10)]
    pub mc_samples: usize,
    /// sum or mean.
    #[arg(long, default_value = "sum")]
    pub aggregation: PrototypeAggregation,
    /// relu or tanh.
    #[arg(long, default_value = "relu")]
    pub activation: Activation,
    #[arg(long)]
    pub prev_mask: bool,
    #[arg(long, default_value_t = 32)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            use_scene_latent: !self.no_scene_latent,
            use_object_latent: !self.no_object_latent,
            modulation: self.modulation,
            mc_samples: self.mc_samples,
            prototype_aggregation: self.aggregation,
            activation: self.activation,
            use_prev_mask: self.prev_mask,
            feature_dim: self.feature_dim,
            hidden_dim: self.hidden_dim,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct Train {
    /// Directory of NPSC1 training scenes; generated from `--seed` when absent.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Defaults to the checkpoint path with a `.loss.csv` suffix.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub epochs: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.005)]
    pub kl_weight: f64,
    #[arg(long, default_value_t = 200)]
    pub train_scenes: usize,
    #[command(flatten)]
    pub scene: SceneArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct Eval {
    #[arg(long)]
    pub scenes: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override the checkpoint's latent sample count.
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Episode {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub budget: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub mc_samples: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Serve {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    #[arg(long, env = "NPISEG_CHECKPOINT")]
    pub checkpoint: PathBuf,
    /// Directory of NPSC1 scenes listed under `GET /scenes`.
    #[arg(long)]
    pub scenes: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct GradCheck {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 8)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub points: usize,
    /// Coordinates to probe; all of them by default.
    #[arg(long)]
    pub max_coords: Option<usize>,
}

/// Failure of a subcommand, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad input or configuration (exit 1).
    Validation(String),
    /// Anything that went wrong while running (exit 2).
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_)
            | Error::Infeasible(_)
            | Error::SceneFormat { .. }
            | Error::Checkpoint(_)
            | Error::Json(_)
            | Error::InvalidClick { .. }
            | Error::LabelOutOfRange { .. }
            | Error::MissingParam(_)
            | Error::Empty(_) => CliError::Validation(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

fn scene_file(dir: &Path, i: usize) -> PathBuf {
    dir.join(format!("scene_{i:04}.npsc"))
}

/// NPSC1 files of `dir` in name order.
pub fn read_scene_dir(dir: &Path) -> CliResult<Vec<LabeledScene>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "npsc"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Validation(format!("no .npsc files in {}", dir.display())));
    }
    paths.iter().map(|p| read_scene(p).map_err(CliError::from)).collect()
}

fn load_model(path: &Path, mc_samples: Option<usize>) -> CliResult<Model> {
    let mut model = load_checkpoint(path)?.to_model()?;
    if let Some(n) = mc_samples {
        model.config.mc_samples = n;
        model.config.validate()?;
    }
    Ok(model)
}

pub fn gen_scenes(args: &GenScenes) -> CliResult {
    let scenes = generate_scenes(&args.scene.spec(), args.count, args.seed)?;
    std::fs::create_dir_all(&args.out).map_err(|e| CliError::Runtime(format!("{}: {e}", args.out.display())))?;
    for (i, s) in scenes.iter().enumerate() {
        write_scene(s, scene_file(&args.out, i))?;
    }
    println!("wrote {} scenes to {}", scenes.len(), args.out.display());
    Ok(())
}

pub fn train(args: &Train) -> CliResult {
    let spec = args.scene.spec();
    let cfg = TrainConfig {
        epochs: args.epochs,
        lr: args.lr,
        batch_size: args.batch_size,
        kl_weight: args.kl_weight,
        seed: args.seed,
        train_scenes: args.train_scenes,
        scene_spec: spec.clone(),
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let mcfg = args.model.config();
    mcfg.validate()?;
    let raw = match &args.scenes {
        Some(dir) => read_scene_dir(dir)?,
        None => generate_scenes(&spec, args.train_scenes, SeedTree::new(args.seed).child("data").key())?,
    };
    let scenes = prepare_scenes(raw, &mcfg);
    let model = Model::init(mcfg, SeedTree::new(args.seed).child("init").key())?;
    let quiet = args.quiet;
    let ckpt = train_run_with(&cfg, model, &scenes, |e| {
        if !quiet {
            eprintln!(
                "epoch {:>4}  loss {:.5}  ce {:.5}  dice {:.5}  kl {:.4}",
                e.epoch, e.mean_loss, e.mean_ce, e.mean_dice, e.mean_kl
            );
        }
    })?;
    save_checkpoint(&ckpt, &args.out)?;
    let csv = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    write_loss_csv(&ckpt.meta.loss_history, &csv)?;
    println!("checkpoint {}  loss csv {}", args.out.display(), csv.display());
    Ok(())
}

/// One-line table of the headline metrics.
pub fn report_table(r: &MetricReport) -> String {
    let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
    format!(
        "IoU@5   IoU@10  IoU@15  NoC@80  NoC@85  NoC@90\n{:<7} {:<7} {:<7} {:<7} {:<7} {:<7}",
        cell(r.iou(5)),
        cell(r.iou(10)),
        cell(r.iou(15)),
        cell(r.noc(0.8)),
        cell(r.noc(0.85)),
        cell(r.noc(0.9)),
    )
}

pub fn eval(args: &Eval) -> CliResult<MetricReport> {
    let model = load_model(&args.checkpoint, args.mc_samples)?;
    let scenes = prepare_scenes(read_scene_dir(&args.scenes)?, &model.config);
    let sim = SimConfig {
        budget: args.budget,
        ..SimConfig::default()
    };
    let (report, _) = evaluate(&model, &scenes, &sim, args.seed)?;
    println!("{}", report_table(&report));
    if let Some(path) = &args.report {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
    }
    Ok(report)
}

pub fn episode(args: &Episode) -> CliResult {
    let model = load_model(&args.checkpoint, args.mc_samples)?;
    let scene = PreparedScene::new(read_scene(&args.scene)?, model.config.knn);
    let sim = SimConfig {
        budget: args.budget,
        ..SimConfig::default()
    };
    let mut rng = SeedTree::new(args.seed).child("episode").index(0).rng();
    let rec = run_episode(&model, &scene, &sim, &mut rng)?;
    for (r, round) in rec.rounds.iter().enumerate() {
        let clicks: Vec<String> = round
            .clicks
            .iter()
            .map(|c| format!("{}->{}", c.point_index, c.object_id))
            .collect();
        let ious: Vec<String> = round.object_iou.iter().map(|v| format!("{v:.3}")).collect();
        println!(
            "round {:>2}  clicks [{}]  iou [{}]  mean {:.4}  uncertainty {:.6}",
            r + 1,
            clicks.join(" "),
            ious.join(" "),
            round.mean_iou,
            round.mean_uncertainty
        );
    }
    if rec.converged {
        println!("converged after {} rounds", rec.rounds.len());
    }
    Ok(())
}

pub fn serve(args: &Serve) -> CliResult {
    let model = load_model(&args.checkpoint, None)?;
    let manager = SessionManager::new(model, args.seed);
    if let Some(dir) = &args.scenes {
        manager.load_scene_dir(dir)?;
    }
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(server::serve(manager, &args.addr))
        .map_err(|e| CliError::Runtime(format!("server on {}: {e}", args.addr)))
}

/// Largest gradient error accepted by `grad-check`.
pub const GRAD_TOLERANCE: f64 = 1e-4;

pub fn grad_check(args: &GradCheck) -> CliResult<f64> {
    let report = loss_grad_check(args.feature_dim, args.points, args.max_coords.unwrap_or(usize::MAX), args.seed)?;
    println!(
        "checked {} coordinates, max relative error {:.3e}",
        report.coords_checked, report.max_rel_error
    );
    if let Some((name, i)) = &report.worst {
        println!("worst at {name}[{i}]: analytic {:.6e}, numeric {:.6e}", report.worst_values.0, report.worst_values.1);
    }
    if report.max_rel_error < GRAD_TOLERANCE {
        Ok(report.max_rel_error)
    } else {
        Err(CliError::Runtime(format!(
            "gradient check failed: {:.3e} >= {GRAD_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

pub fn run(cli: &Cli) -> CliResult {
    match &cli.command {
        Command::GenScenes(a) => gen_scenes(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a).map(|_| ()),
        Command::Episode(a) => episode(a),
        Command::Serve(a) => serve(a),
        Command::GradCheck(a) => grad_check(a).map(|_| ()),
    }
}

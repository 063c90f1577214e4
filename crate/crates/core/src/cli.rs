//! The `discene` command line: `gen`, `train`, `eval` and `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error, 3 failed
//! verification. Options resolve as built-in defaults, then an optional
//! JSON file given with `--config`, then explicit flags.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::distill::{ModelRef, SceneInput};
use crate::losses::{DistillWeights, MatchMode};
use crate::model::{self, load_checkpoint, save_checkpoint, ModelConfig};
use crate::par::{self, Exec};
use crate::scene::GridSpec;
use crate::syndata::{write_dataset, Dataset, SceneRecipe};
use crate::train::{self, holdout_split, prepare_scenes, Role, TrainConfig};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

pub const THREADS_ENV: &str = "DISCENE_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "discene",
    version,
    about = "Sparse query occupancy prediction with multi-level distillation"
)]
pub struct Cli {
    /// Worker threads (0 = automatic). Overrides DISCENE_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    Gen(GenArgs),
    /// Train a teacher or a student model.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridChoice {
    /// 24x24x16 voxels of 0.2 m.
    Toy,
    /// 60x60x36 voxels of 0.08 m.
    Paper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RoleArg {
    Teacher,
    Student,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QlModeArg {
    Cfd,
    Fld,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Base seed; scene i uses seed + i [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Number of scenes [default: 16].
    #[arg(long)]
    pub count: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Voxel grid geometry [default: toy].
    #[arg(long, value_enum)]
    pub grid: Option<GridChoice>,
    /// Fewest furniture boxes per room.
    #[arg(long)]
    pub furniture_min: Option<usize>,
    /// Most furniture boxes per room.
    #[arg(long)]
    pub furniture_max: Option<usize>,
    /// JSON file with any of: seed, count, grid, furniture_min, furniture_max.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenOptions {
    pub seed: u64,
    pub count: usize,
    pub grid: GridChoice,
    pub furniture_min: usize,
    pub furniture_max: usize,
}

impl Default for GenOptions {
    fn default() -> Self {
        let r = SceneRecipe::toy();
        GenOptions {
            seed: 0,
            count: 16,
            grid: GridChoice::Toy,
            furniture_min: r.furniture_min,
            furniture_max: r.furniture_max,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model role [default: teacher].
    #[arg(long, value_enum)]
    pub role: Option<RoleArg>,
    /// Training dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Validation dataset; defaults to holding out every eighth scene.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Checkpoint path to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Epoch log path (JSON lines); defaults to `<out>.log.jsonl`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Passes over the training set [default: 10].
    #[arg(long)]
    pub epochs: Option<usize>,
    /// AdamW learning rate [default: 2e-4].
    #[arg(long)]
    pub lr: Option<f64>,
    /// Decoupled weight decay [default: 0.01].
    #[arg(long)]
    pub weight_decay: Option<f64>,
    /// Scenes per optimiser step [default: 4].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed for initialisation, shuffling and anchor draws [default: 0].
    #[arg(long)]
    pub seed: Option<u64>,
    /// Teacher checkpoint (student role).
    #[arg(long)]
    pub teacher_ckpt: Option<PathBuf>,
    /// Distillation levels, comma separated from efa, ql, pl, al; "" for none.
    #[arg(long)]
    pub distill: Option<String>,
    /// Query-level matching loss: coarse features or fine logits [default: cfd].
    #[arg(long, value_enum)]
    pub ql_mode: Option<QlModeArg>,
    /// Teacher-guided initialisation of the student decoder.
    #[arg(long)]
    pub tgi: bool,
    /// Level weights `efa,ql,pl,al` [default: 1,0.2,0.2,0.5].
    #[arg(long)]
    pub lambdas: Option<String>,
    /// Fuse a simulated depth prior through the depth branch.
    #[arg(long)]
    pub depth_prior: bool,
    /// JSON file with any training option; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint to evaluate.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Report path (JSON).
    #[arg(long)]
    pub report: PathBuf,
    /// Minimum top-class probability for a predicted point to count [default: 0].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// JSON file with `threshold`.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// `all` or one of the registered component names.
    #[arg(long, default_value = "all")]
    pub component: String,
    /// Random instances per component.
    #[arg(long, default_value_t = 3)]
    pub trials: usize,
    /// Seed for the random instances.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// How a command failed, mapped onto the exit code.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(Error),
    Verify(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidArgument(m) => Failure::Usage(m),
            other => Failure::Data(other),
        }
    }
}

type CmdResult = std::result::Result<(), Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(t) => Some(t),
                Err(_) => {
                    eprintln!("error: {THREADS_ENV} must be a non-negative integer, got {v:?}");
                    return EXIT_USAGE;
                }
            },
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        par::init_threads(t);
    }
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            EXIT_DATA
        }
        Err(Failure::Verify(m)) => {
            eprintln!("verification failed: {m}");
            EXIT_VERIFY
        }
    }
}

fn read_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, Failure> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Data(Error::io(path, e)))?;
    serde_json::from_str(&text).map_err(|e| Failure::Usage(format!("config {}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> std::result::Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::Data(Error::io(dir, e)))?;
    }
    std::fs::write(path, bytes).map_err(|e| Failure::Data(Error::io(path, e)))
}

pub fn gen_recipe(opts: &GenOptions) -> SceneRecipe {
    let base = match opts.grid {
        GridChoice::Toy => SceneRecipe::toy(),
        GridChoice::Paper => SceneRecipe::paper(),
    };
    SceneRecipe {
        furniture_min: opts.furniture_min,
        furniture_max: opts.furniture_max,
        ..base
    }
}

fn cmd_gen(a: GenArgs) -> CmdResult {
    let mut o: GenOptions = read_config(a.config.as_deref())?;
    if let Some(v) = a.seed {
        o.seed = v;
    }
    if let Some(v) = a.count {
        o.count = v;
    }
    if let Some(v) = a.grid {
        o.grid = v;
    }
    if let Some(v) = a.furniture_min {
        o.furniture_min = v;
    }
    if let Some(v) = a.furniture_max {
        o.furniture_max = v;
    }
    let recipe = gen_recipe(&o);
    let seeds: Vec<u64> = (0..o.count as u64).map(|i| o.seed.wrapping_add(i)).collect();
    write_dataset(&a.out, &recipe, &seeds)?;
    eprintln!("wrote {} scenes to {}", o.count, a.out.display());
    Ok(())
}

fn parse_lambdas(s: &str) -> std::result::Result<DistillWeights, Failure> {
    let v: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Failure::Usage(format!("--lambdas {s:?}: {e}")))?;
    if v.len() != 4 {
        return Err(Failure::Usage(format!("--lambdas needs 4 values, got {}", v.len())));
    }
    Ok(DistillWeights::new(v[0], v[1], v[2], v[3])?)
}

/// Resolves the training options of `a` over the defaults and config file.
pub fn train_options(a: &TrainArgs) -> std::result::Result<TrainConfig, Failure> {
    let mut c: TrainConfig = read_config(a.config.as_deref())?;
    if let Some(r) = a.role {
        c.role = match r {
            RoleArg::Teacher => Role::Teacher,
            RoleArg::Student => Role::Student,
        };
    }
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.lr {
        c.lr = v;
    }
    if let Some(v) = a.weight_decay {
        c.weight_decay = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if let Some(list) = &a.distill {
        c.plan = c.plan.with_levels(list)?;
    }
    if let Some(m) = a.ql_mode {
        c.plan.ql_mode = match m {
            QlModeArg::Cfd => MatchMode::Cfd,
            QlModeArg::Fld => MatchMode::Fld,
        };
    }
    if a.tgi {
        c.plan.enable_tgi = true;
    }
    if let Some(l) = &a.lambdas {
        c.plan.weights = parse_lambdas(l)?;
    }
    if a.depth_prior {
        c.depth_prior = true;
    }
    if c.role == Role::Teacher && (c.plan.any_level() || c.plan.enable_tgi) {
        return Err(Failure::Usage(
            "distillation options apply to the student role only".into(),
        ));
    }
    c.validate()?;
    Ok(c)
}

/// Architecture for `role`, sized to the dataset's images and scene box.
pub fn model_config_for(cfg: &TrainConfig, data: &Dataset) -> std::result::Result<ModelConfig, Failure> {
    let mut mc = cfg.model_config();
    mc.image = data.manifest.recipe.image;
    let spec: GridSpec = data.manifest.recipe.grid;
    let ext = spec.extent();
    mc.scene_lo = spec.origin;
    mc.scene_hi = [
        spec.origin[0] + ext[0],
        spec.origin[1] + ext[1],
        spec.origin[2] + ext[2],
    ];
    mc.validate()?;
    Ok(mc)
}

fn load_split(
    a: &TrainArgs,
    config: &ModelConfig,
    exec: Exec,
) -> std::result::Result<(Vec<SceneInput>, Vec<SceneInput>), Failure> {
    let data = Dataset::load(&a.data)?;
    let scenes = prepare_scenes(&data, config.image, config.depth_branch, exec)?;
    if scenes.is_empty() {
        return Err(Failure::Data(Error::EmptySet("training dataset")));
    }
    match &a.val {
        Some(dir) => {
            let val = Dataset::load(dir)?;
            if val.manifest.recipe.grid != data.manifest.recipe.grid {
                return Err(Failure::Data(Error::GridSpecMismatch));
            }
            Ok((scenes, prepare_scenes(&val, config.image, config.depth_branch, exec)?))
        }
        None => {
            let (t, v) = holdout_split(scenes.len());
            Ok((
                t.iter().map(|&i| scenes[i].clone()).collect(),
                v.iter().map(|&i| scenes[i].clone()).collect(),
            ))
        }
    }
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let cfg = train_options(&a)?;
    let data = Dataset::load(&a.data)?;
    let config = model_config_for(&cfg, &data)?;
    let teacher = match cfg.role {
        Role::Teacher => None,
        Role::Student => {
            let path = a
                .teacher_ckpt
                .as_ref()
                .ok_or_else(|| Failure::Usage("--role student requires --teacher-ckpt".into()))?;
            let params = load_checkpoint(path)?;
            let tc = ModelConfig::infer(&params)?;
            if tc.image != config.image {
                return Err(Failure::Data(Error::ShapeMismatch(format!(
                    "teacher expects {:?} images, dataset has {:?}",
                    tc.image, config.image
                ))));
            }
            if tc.depth_branch != config.depth_branch {
                return Err(Failure::Usage("--depth-prior must match the teacher checkpoint".into()));
            }
            Some((params, tc))
        }
    };
    let (train_set, val_set) = load_split(&a, &config, cfg.exec)?;
    let report_epoch = |r: &train::EpochRecord| {
        eprintln!(
            "epoch {:>3}  total {:.5}  task {:.5}  iou {:.4}  miou {}",
            r.epoch,
            r.total,
            r.l_task,
            r.iou,
            r.miou.map_or("n/a".to_string(), |m| format!("{m:.4}"))
        );
    };
    let outcome = match &teacher {
        None => train::train_teacher(&config, &train_set, &val_set, &cfg)?,
        Some((tp, tc)) => train::train_student(
            &config,
            &train_set,
            &val_set,
            ModelRef { params: tp, config: tc },
            &cfg,
            |_| {},
        )?,
    };
    outcome.epochs.iter().for_each(report_epoch);
    save_checkpoint(&outcome.params, &a.out)?;
    let log = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    write_file(&log, outcome.log_jsonl().as_bytes())?;
    eprintln!(
        "wrote {} ({} parameters) and {}",
        a.out.display(),
        model::param_count(&outcome.params),
        log.display()
    );
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let mut o: EvalOptions = read_config(a.config.as_deref())?;
    if let Some(t) = a.threshold {
        o.threshold = t;
    }
    if !o.threshold.is_finite() {
        return Err(Failure::Usage("--threshold must be finite".into()));
    }
    let params = load_checkpoint(&a.ckpt)?;
    let config = ModelConfig::infer(&params)?;
    let data = Dataset::load(&a.data)?;
    if data.manifest.recipe.image != config.image {
        return Err(Failure::Data(Error::ShapeMismatch(format!(
            "checkpoint expects {:?} images, dataset has {:?}",
            config.image, data.manifest.recipe.image
        ))));
    }
    if data.manifest.recipe.n_semantic != config.n_classes {
        return Err(Failure::Data(Error::ShapeMismatch(format!(
            "checkpoint predicts {} classes, dataset has {}",
            config.n_classes, data.manifest.recipe.n_semantic
        ))));
    }
    let scenes = prepare_scenes(&data, config.image, config.depth_branch, Exec::default())?;
    let report = train::evaluate(&params, &config, &scenes, o.threshold, Exec::default())?;
    let json = report.to_json();
    write_file(&a.report, (json.clone() + "\n").as_bytes())?;
    println!("{json}");
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> CmdResult {
    let reports = train::gradcheck(&a.component, a.trials, a.seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        let probes: usize = r.inputs.iter().map(|p| p.probes).sum();
        let skipped: usize = r.inputs.iter().map(|p| p.skipped).sum();
        println!(
            "{:<10} {}  max rel err {:.3e}  (threshold {:.0e}, {} probes, {} skipped)",
            r.component,
            if r.passed { "PASS" } else { "FAIL" },
            r.worst,
            r.threshold,
            probes,
            skipped
        );
        if !r.passed {
            failed.push(r.component.clone());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verify(format!("components {}", failed.join(", "))))
    }
}

//! AdamW, the deterministic teacher/student training loops, evaluation and
//! the finite-difference gradient checker.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distill::{distill_step, DistillPlan, LossBreakdown, ModelRef, SceneInput};
use crate::geometry::Vec3;
use crate::kinks;
use crate::losses::{self, DistillWeights, FocalParams, LossValue, MatchMode, QuerySnapshot};
use crate::model::{self, init_params, is_trainable, teacher_guided_init, ModelConfig, ModelParams};
use crate::par::{self, Exec};
use crate::scene::{
    predset_to_grid, GroundTruthSet, MetricsAccumulator, MetricsReport, PredictionSet, SceneFile, VoxelGrid,
};
use crate::syndata::{generate_scene, Dataset, SceneRecipe};
use crate::tensor::{Tensor, TensorMap};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Optimizer

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptState {
    pub m: TensorMap,
    pub v: TensorMap,
    pub step: u64,
}

/// One AdamW update with bias correction and decoupled weight decay, for
/// every tensor named in `grads`.
pub fn adamw_step(params: &mut ModelParams, grads: &TensorMap, state: &mut OptState, hp: &AdamW) -> Result<()> {
    for (name, g) in grads {
        match params.get(name) {
            Some(p) if p.shape == g.shape => {}
            Some(p) => {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {name} {:?} vs parameter {:?}",
                    g.shape, p.shape
                )))
            }
            None => return Err(Error::ShapeMismatch(format!("gradient for unknown parameter {name}"))),
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| g.zeros_like());
        let v = state.v.entry(name.clone()).or_insert_with(|| g.zeros_like());
        for i in 0..g.data.len() {
            let gi = g.data[i];
            m.data[i] = hp.beta1 * m.data[i] + (1.0 - hp.beta1) * gi;
            v.data[i] = hp.beta2 * v.data[i] + (1.0 - hp.beta2) * gi * gi;
            let mh = m.data[i] / c1;
            let vh = v.data[i] / c2;
            let x = p.data[i] * (1.0 - hp.lr * hp.weight_decay);
            p.data[i] = x - hp.lr * mh / (vh.sqrt() + hp.eps);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Configuration and logs

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub role: Role,
    pub plan: DistillPlan,
    /// Feed a simulated depth prior through the depth branch.
    pub depth_prior: bool,
    /// Score threshold used for the per-epoch validation metrics.
    pub threshold: f64,
    #[serde(skip)]
    pub exec: Exec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 2e-4,
            weight_decay: 0.01,
            batch_size: 4,
            seed: 0,
            role: Role::Teacher,
            plan: DistillPlan::off(),
            depth_prior: false,
            threshold: 0.0,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch size must be at least 1".into(),
            ));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::InvalidArgument("weight decay must be non-negative".into()));
        }
        DistillWeights::new(
            self.plan.weights.efa,
            self.plan.weights.ql,
            self.plan.weights.pl,
            self.plan.weights.al,
        )?;
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    /// Default architecture for this role.
    pub fn model_config(&self) -> ModelConfig {
        let mut c = match self.role {
            Role::Teacher => ModelConfig::teacher(),
            Role::Student => ModelConfig::student(),
        };
        c.depth_branch = self.depth_prior;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_task: f64,
    pub l_efa: f64,
    pub l_ql: f64,
    pub l_pl: f64,
    pub l_al: f64,
    pub total: f64,
    pub iou: f64,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub losses: LossBreakdown,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    /// Epoch log as JSON lines.
    pub fn log_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

/// SplitMix64 finaliser.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-scene RNG stream seed, independent of batch layout and threading.
pub fn scene_seed(seed: u64, scene: u64, step: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ scene) ^ step)
}

const PRIOR_STREAM: u64 = 0x5052_494f_5200_0000;

/// Renders every dataset scene at the model's image size. The simulated
/// prior is seeded from each scene's generation seed.
pub fn prepare_scenes(dataset: &Dataset, image: [usize; 2], depth_prior: bool, exec: Exec) -> Result<Vec<SceneInput>> {
    let items: Vec<(&SceneFile, u64)> = dataset
        .scenes
        .iter()
        .zip(dataset.manifest.seeds.iter().copied().chain(std::iter::repeat(0)))
        .collect();
    par::map_slice(exec, &items, |(s, seed)| {
        SceneInput::new(s, image, depth_prior.then(|| splitmix(seed ^ PRIOR_STREAM)))
    })
    .into_iter()
    .collect()
}

/// Train/validation split: every eighth scene is held out. With fewer than
/// eight scenes the training set doubles as the validation set.
pub fn holdout_split(n: usize) -> (Vec<usize>, Vec<usize>) {
    if n < 8 {
        return ((0..n).collect(), (0..n).collect());
    }
    (
        (0..n).filter(|i| i % 8 != 7).collect(),
        (0..n).filter(|i| i % 8 == 7).collect(),
    )
}

// ---------------------------------------------------------------------------
// Training

/// Shared loop: seeded shuffle per epoch, batch-mean gradients over
/// concurrently evaluated scenes, one AdamW step per batch.
pub fn train_loop(
    config: &ModelConfig,
    mut params: ModelParams,
    teacher: Option<ModelRef>,
    train: &[SceneInput],
    val: &[SceneInput],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySet("training set"));
    }
    let hp = cfg.optimizer();
    let mut state = OptState::default();
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut steps = Vec::new();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix(cfg.seed ^ 0x5348_5546));
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut epoch_sum = LossBreakdown::default();
        let mut n_steps = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let step = state.step;
            let student = ModelRef {
                params: &params,
                config,
            };
            let outs = par::map_slice(cfg.exec, batch, |&i| {
                distill_step(
                    student,
                    teacher,
                    &train[i],
                    &cfg.plan,
                    scene_seed(cfg.seed, i as u64, step),
                )
            });
            let scale = 1.0 / batch.len() as f64;
            let mut grads = TensorMap::new();
            let mut losses = LossBreakdown::default();
            for out in outs {
                let out = out?;
                crate::tensor::accumulate(&mut grads, &out.grads, scale)?;
                losses.add_scaled(&out.losses, scale);
            }
            let record = StepRecord { epoch, step, losses };
            on_step(&record);
            steps.push(record);
            epoch_sum.add_scaled(&losses, 1.0);
            n_steps += 1;
            adamw_step(&mut params, &grads, &mut state, &hp)?;
        }
        let report = evaluate(&params, config, val, cfg.threshold, cfg.exec)?;
        let m = 1.0 / n_steps as f64;
        epochs.push(EpochRecord {
            epoch,
            l_task: epoch_sum.l_task * m,
            l_efa: epoch_sum.l_efa * m,
            l_ql: epoch_sum.l_ql * m,
            l_pl: epoch_sum.l_pl * m,
            l_al: epoch_sum.l_al * m,
            total: epoch_sum.total * m,
            iou: report.iou,
            miou: report.miou,
        });
    }
    Ok(TrainOutcome { params, epochs, steps })
}

/// Task-only training from a fresh initialisation.
pub fn train_teacher(
    config: &ModelConfig,
    train: &[SceneInput],
    val: &[SceneInput],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let params = init_params(config, cfg.seed)?;
    let cfg = TrainConfig {
        plan: DistillPlan::off(),
        ..cfg.clone()
    };
    train_loop(config, params, None, train, val, &cfg, |_| {})
}

/// Student initialisation: fresh weights, then teacher-guided init of the
/// decoder side when the plan asks for it.
pub fn init_student(config: &ModelConfig, teacher: &ModelParams, cfg: &TrainConfig) -> Result<ModelParams> {
    let mut params = init_params(config, cfg.seed)?;
    if cfg.plan.enable_tgi {
        teacher_guided_init(&mut params, teacher, true)?;
    }
    Ok(params)
}

pub fn train_student(
    config: &ModelConfig,
    train: &[SceneInput],
    val: &[SceneInput],
    teacher: ModelRef,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    let params = init_student(config, teacher.params, cfg)?;
    train_loop(config, params, Some(teacher), train, val, cfg, on_step)
}

/// Dataset-level metrics of the last decoder layer's predictions.
pub fn evaluate(
    params: &ModelParams,
    config: &ModelConfig,
    scenes: &[SceneInput],
    threshold: f64,
    exec: Exec,
) -> Result<MetricsReport> {
    let grids = par::map_slice(exec, scenes, |s| -> Result<VoxelGrid> {
        let (_, trace) = model::forward(params, config, s.observation(), None)?;
        Ok(predset_to_grid(trace.last_prediction(), s.grid.spec, threshold))
    });
    let mut acc = MetricsAccumulator::new(config.n_classes);
    for (g, s) in grids.into_iter().zip(scenes) {
        acc.add(&g?, &s.grid)?;
    }
    Ok(acc.report())
}

/// Mean task loss of `params` over `scenes`, without updating anything.
pub fn mean_task_loss(params: &ModelParams, config: &ModelConfig, scenes: &[SceneInput], exec: Exec) -> Result<f64> {
    let vals = par::map_slice(exec, scenes, |s| {
        let (_, trace) = model::forward(params, config, s.observation(), None)?;
        losses::task_loss_indexed(
            Exec::Sequential,
            &trace.predictions,
            &s.gt,
            &s.gt_tree,
            FocalParams::default(),
        )
        .map(|l| l.value)
    });
    let mut sum = 0.0;
    for v in vals {
        sum += v?;
    }
    Ok(sum / scenes.len().max(1) as f64)
}

// ---------------------------------------------------------------------------
// Gradient checking

pub const FD_STEP: f64 = 1e-4;

/// Error statistics for one differentiable input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeStats {
    pub input: String,
    pub max_rel_err: f64,
    pub probes: usize,
    /// Probes dropped because `x +- h` crossed a branch boundary.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub component: String,
    pub threshold: f64,
    pub worst: f64,
    pub passed: bool,
    pub inputs: Vec<ProbeStats>,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences of `f` for up to `probes` entries per input tensor,
/// compared with the analytic gradients `f` reports. Inputs without an
/// analytic entry are expected to have zero gradient.
pub fn check_gradients<F>(f: F, inputs: &TensorMap, probes: usize, seed: u64) -> Result<Vec<ProbeStats>>
where
    F: Fn(&TensorMap) -> Result<LossValue>,
{
    let (base, fp0) = kinks::track(|| f(inputs));
    let base = base?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut stats = Vec::with_capacity(inputs.len());
    for (name, t) in inputs {
        let analytic = base.grads.get(name);
        if let Some(a) = analytic {
            if a.shape != t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "gradient {name} {:?} vs input {:?}",
                    a.shape, t.shape
                )));
            }
        }
        let candidates: Vec<usize> = if t.len() <= probes {
            (0..t.len()).collect()
        } else {
            let mut v = index::sample(&mut rng, t.len(), t.len().min(probes * 4)).into_vec();
            v.sort_unstable();
            v.shuffle(&mut rng);
            v
        };
        let mut s = ProbeStats {
            input: name.clone(),
            max_rel_err: 0.0,
            probes: 0,
            skipped: 0,
        };
        let mut x = inputs.clone();
        for i in candidates {
            if s.probes >= probes {
                break;
            }
            let orig = t.data[i];
            x.get_mut(name).expect("present").data[i] = orig + FD_STEP;
            let (fp, kp) = kinks::track(|| f(&x));
            x.get_mut(name).expect("present").data[i] = orig - FD_STEP;
            let (fm, km) = kinks::track(|| f(&x));
            x.get_mut(name).expect("present").data[i] = orig;
            if kp != fp0 || km != fp0 {
                s.skipped += 1;
                continue;
            }
            let numeric = (fp?.value - fm?.value) / (2.0 * FD_STEP);
            let a = analytic.map_or(0.0, |g| g.data[i]);
            s.max_rel_err = s.max_rel_err.max(relative_error(a, numeric));
            s.probes += 1;
        }
        stats.push(s);
    }
    Ok(stats)
}

pub const COMPONENTS: &[&str] = &[
    "quadratic",
    "chamfer",
    "focal",
    "task",
    "efa",
    "cfd",
    "fld",
    "ql",
    "pl",
    "al",
    "distill",
    "depth",
    "model",
    "full",
];

fn threshold_of(component: &str) -> f64 {
    match component {
        "quadratic" => 1e-8,
        "depth" | "model" | "full" => 1e-3,
        _ => 1e-4,
    }
}

/// Runs the named component (or `all`) for `trials` random instances each.
pub fn gradcheck(component: &str, trials: usize, seed: u64) -> Result<Vec<GradcheckReport>> {
    let names: Vec<&str> = if component == "all" {
        COMPONENTS.to_vec()
    } else if COMPONENTS.contains(&component) {
        vec![component]
    } else {
        return Err(Error::InvalidArgument(format!(
            "unknown component {component:?}; valid: all, {}",
            COMPONENTS.join(", ")
        )));
    };
    names
        .into_iter()
        .map(|name| {
            let threshold = threshold_of(name);
            let mut merged: Vec<ProbeStats> = Vec::new();
            for trial in 0..trials.max(1) {
                let s = scene_seed(seed, trial as u64, name.len() as u64);
                for p in run_component(name, s)? {
                    match merged.iter_mut().find(|m| m.input == p.input) {
                        Some(m) => {
                            m.max_rel_err = m.max_rel_err.max(p.max_rel_err);
                            m.probes += p.probes;
                            m.skipped += p.skipped;
                        }
                        None => merged.push(p),
                    }
                }
            }
            let worst = merged.iter().map(|p| p.max_rel_err).fold(0.0, f64::max);
            let probed = merged.iter().map(|p| p.probes).sum::<usize>();
            Ok(GradcheckReport {
                component: name.to_string(),
                threshold,
                worst,
                passed: worst < threshold && probed > 0,
                inputs: merged,
            })
        })
        .collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data.iter_mut().for_each(|v| *v = rng.random_range(lo..hi));
    t
}

fn rows3(t: &Tensor) -> Vec<Vec3> {
    t.data.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn snapshots(inputs: &TensorMap, prefix: &str, d: usize, n: usize) -> Vec<QuerySnapshot> {
    let center = &inputs[&format!("{prefix}layer{d}.center")];
    let feature = &inputs[&format!("{prefix}layer{d}.feature")];
    let points = &inputs[&format!("{prefix}layer{d}.points")];
    let logits = &inputs[&format!("{prefix}layer{d}.logits")];
    let c = feature.len() / n;
    let r = points.len() / (3 * n);
    let k = logits.len() / (n * r);
    (0..n)
        .map(|i| QuerySnapshot {
            center: [center.data[3 * i], center.data[3 * i + 1], center.data[3 * i + 2]],
            feature: feature.data[i * c..(i + 1) * c].to_vec(),
            points: rows3(&Tensor {
                shape: vec![r, 3],
                data: points.data[i * r * 3..(i + 1) * r * 3].to_vec(),
            }),
            logits: logits.data[i * r * k..(i + 1) * r * k].to_vec(),
        })
        .collect()
}

struct LayerShape {
    n: usize,
    c: usize,
    rs: Vec<usize>,
    k: usize,
}

fn random_layers(rng: &mut ChaCha8Rng, prefix: &str, s: &LayerShape, into: &mut TensorMap) {
    for (d, &r) in s.rs.iter().enumerate() {
        into.insert(
            format!("{prefix}layer{d}.center"),
            random_tensor(rng, &[s.n, 3], 0.0, 2.0),
        );
        into.insert(
            format!("{prefix}layer{d}.feature"),
            random_tensor(rng, &[s.n, s.c], -1.0, 1.0),
        );
        into.insert(
            format!("{prefix}layer{d}.points"),
            random_tensor(rng, &[s.n * r, 3], 0.0, 2.0),
        );
        into.insert(
            format!("{prefix}layer{d}.logits"),
            random_tensor(rng, &[s.n * r, s.k], -2.0, 2.0),
        );
    }
}

fn layered(inputs: &TensorMap, prefix: &str, s: &LayerShape) -> Vec<Vec<QuerySnapshot>> {
    (0..s.rs.len()).map(|d| snapshots(inputs, prefix, d, s.n)).collect()
}

fn tiny_scene(seed: u64, n_semantic: usize) -> Result<SceneInput> {
    let recipe = SceneRecipe {
        image: [16, 16],
        n_semantic,
        ..SceneRecipe::toy()
    };
    let (grid, camera) = generate_scene(&recipe, seed)?;
    SceneInput::new(&SceneFile { grid, camera }, [16, 16], Some(splitmix(seed)))
}

fn trainable(params: &ModelParams) -> TensorMap {
    params
        .iter()
        .filter(|(n, _)| is_trainable(n))
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect()
}

fn with_meta(inputs: &TensorMap, full: &ModelParams) -> ModelParams {
    let mut p = full.clone();
    for (k, v) in inputs {
        p.insert(k.clone(), v.clone());
    }
    p
}

fn run_component(name: &str, seed: u64) -> Result<Vec<ProbeStats>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = 6;
    let mut inputs = TensorMap::new();
    match name {
        "quadratic" => {
            let n = 5;
            let m = random_tensor(&mut rng, &[n, n], -1.0, 1.0);
            // A = M^T M + I
            let mut a = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    a[i * n + j] = (0..n).map(|k| m.data[k * n + i] * m.data[k * n + j]).sum::<f64>()
                        + if i == j { 1.0 } else { 0.0 };
                }
            }
            let b = random_tensor(&mut rng, &[n], -1.0, 1.0);
            inputs.insert("x".into(), random_tensor(&mut rng, &[n], -1.0, 1.0));
            check_gradients(
                |x| {
                    let x = &x["x"].data;
                    let ax: Vec<f64> = (0..n).map(|i| (0..n).map(|j| a[i * n + j] * x[j]).sum()).collect();
                    let value = 0.5 * x.iter().zip(&ax).map(|(p, q)| p * q).sum::<f64>()
                        + x.iter().zip(&b.data).map(|(p, q)| p * q).sum::<f64>();
                    let g: Vec<f64> = ax.iter().zip(&b.data).map(|(p, q)| p + q).collect();
                    let mut grads = TensorMap::new();
                    grads.insert(
                        "x".into(),
                        Tensor {
                            shape: vec![n],
                            data: g,
                        },
                    );
                    Ok(LossValue { value, grads })
                },
                &inputs,
                probes,
                seed,
            )
        }
        "chamfer" => {
            let n = rng.random_range(3..10);
            let m = rng.random_range(3..10);
            let gt = rows3(&random_tensor(&mut rng, &[m, 3], 0.0, 2.0));
            inputs.insert("pred".into(), random_tensor(&mut rng, &[n, 3], 0.0, 2.0));
            check_gradients(
                |x| losses::chamfer_distance(&rows3(&x["pred"]), &gt),
                &inputs,
                probes * 3,
                seed,
            )
        }
        "focal" => {
            let (n, k) = (rng.random_range(2..8), rng.random_range(2..6));
            let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            inputs.insert("logits".into(), random_tensor(&mut rng, &[n, k], -3.0, 3.0));
            check_gradients(
                |x| losses::focal_loss(&x["logits"].data, k, &targets, FocalParams::default()),
                &inputs,
                probes * 3,
                seed,
            )
        }
        "task" => {
            let k = 4;
            let m = rng.random_range(4..12);
            let gt = GroundTruthSet {
                positions: rows3(&random_tensor(&mut rng, &[m, 3], 0.0, 2.0)),
                classes: (0..m).map(|_| rng.random_range(1..=k as u8)).collect(),
            };
            for (d, r) in [5usize, 9].into_iter().enumerate() {
                inputs.insert(format!("layer{d}.points"), random_tensor(&mut rng, &[r, 3], 0.0, 2.0));
                inputs.insert(format!("layer{d}.logits"), random_tensor(&mut rng, &[r, k], -2.0, 2.0));
            }
            check_gradients(
                |x| {
                    let layers: Vec<PredictionSet> = (0..2)
                        .map(|d| PredictionSet {
                            positions: rows3(&x[&format!("layer{d}.points")]),
                            logits: x[&format!("layer{d}.logits")].data.clone(),
                            num_semantic: k,
                        })
                        .collect();
                    losses::task_loss(&layers, &gt, FocalParams::default())
                },
                &inputs,
                probes * 2,
                seed,
            )
        }
        "efa" => {
            let (l, c) = (rng.random_range(2..6), rng.random_range(2..6));
            let teacher = random_tensor(&mut rng, &[l, c], -1.0, 1.0);
            inputs.insert("student_features".into(), random_tensor(&mut rng, &[l, c], -1.0, 1.0));
            check_gradients(
                |x| losses::efa_loss(&x["student_features"], &teacher),
                &inputs,
                probes * 3,
                seed,
            )
        }
        "cfd" | "fld" => {
            let (c, r, k) = (rng.random_range(2..6), rng.random_range(1..5), rng.random_range(2..5));
            let mut teacher_in = TensorMap::new();
            let shape = LayerShape {
                n: 1,
                c,
                rs: vec![r],
                k,
            };
            random_layers(&mut rng, "", &shape, &mut teacher_in);
            random_layers(&mut rng, "", &shape, &mut inputs);
            let teacher = snapshots(&teacher_in, "", 0, 1).remove(0);
            let rename = |m: TensorMap| -> TensorMap {
                m.into_iter()
                    .map(|(k, v)| {
                        (
                            format!("layer0.{k}"),
                            Tensor {
                                shape: inputs[&format!("layer0.{k}")].shape.clone(),
                                data: v.data,
                            },
                        )
                    })
                    .collect()
            };
            let fld = name == "fld";
            check_gradients(
                |x| {
                    let s = snapshots(x, "", 0, 1).remove(0);
                    let l = if fld {
                        losses::fld_loss(&s, &teacher)
                    } else {
                        losses::cfd_loss(&s, &teacher)
                    }?;
                    Ok(LossValue {
                        value: l.value,
                        grads: rename(l.grads),
                    })
                },
                &inputs,
                probes,
                seed,
            )
        }
        "ql" | "pl" | "al" => {
            let shape = LayerShape {
                n: rng.random_range(2..6),
                c: 3,
                rs: vec![1, 3],
                k: 3,
            };
            let mut teacher_in = TensorMap::new();
            random_layers(&mut rng, "", &shape, &mut teacher_in);
            random_layers(&mut rng, "", &shape, &mut inputs);
            let teacher = layered(&teacher_in, "", &shape);
            let mode = if seed.is_multiple_of(2) {
                MatchMode::Cfd
            } else {
                MatchMode::Fld
            };
            check_gradients(
                |x| {
                    let s = layered(x, "", &shape);
                    match name {
                        "ql" => losses::ql_loss(&s, &teacher, mode),
                        "pl" => losses::pl_loss(&s, &teacher),
                        _ => losses::al_loss(&s, &teacher),
                    }
                },
                &inputs,
                probes,
                seed,
            )
        }
        "distill" => {
            let shape = LayerShape {
                n: 3,
                c: 3,
                rs: vec![1, 2],
                k: 3,
            };
            let mut teacher_in = TensorMap::new();
            for p in ["ql.", "pl.", "al."] {
                random_layers(&mut rng, p, &shape, &mut teacher_in);
                random_layers(&mut rng, p, &shape, &mut inputs);
            }
            let t_feat = random_tensor(&mut rng, &[4, 3], -1.0, 1.0);
            inputs.insert(
                "efa.student_features".into(),
                random_tensor(&mut rng, &[4, 3], -1.0, 1.0),
            );
            let w = DistillWeights::new(
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
                rng.random_range(0.1..2.0),
            )?;
            check_gradients(
                |x| {
                    let efa = losses::efa_loss(&x["efa.student_features"], &t_feat)?;
                    let ql = losses::ql_loss(
                        &layered(x, "ql.", &shape),
                        &layered(&teacher_in, "ql.", &shape),
                        MatchMode::Cfd,
                    )?;
                    let pl = losses::pl_loss(&layered(x, "pl.", &shape), &layered(&teacher_in, "pl.", &shape))?;
                    let al = losses::al_loss(&layered(x, "al.", &shape), &layered(&teacher_in, "al.", &shape))?;
                    Ok(losses::distill_loss(&efa, &ql, &pl, &al, &w))
                },
                &inputs,
                probes / 2,
                seed,
            )
        }
        "depth" | "model" => {
            let mut config = ModelConfig::tiny(true);
            config.depth_branch = true;
            let scene = tiny_scene(seed, config.n_classes)?;
            let mut full = init_params(&config, seed)?;
            if name == "depth" {
                // move the zero-initialised output layer off zero so every
                // depth parameter has a gradient path
                for n in ["depth.w2", "depth.b2", "depth.oov"] {
                    let shape = full[n].shape.clone();
                    full.insert(n.to_string(), random_tensor(&mut rng, &shape, -0.3, 0.3));
                }
            }
            let inputs = trainable(&full);
            let inputs: TensorMap = if name == "depth" {
                strip_all_but(inputs, &["depth.", "query.embed"])
            } else {
                inputs
            };
            check_gradients(
                |x| {
                    let p = with_meta(x, &full);
                    let out = distill_step(
                        ModelRef {
                            params: &p,
                            config: &config,
                        },
                        None,
                        &scene,
                        &DistillPlan::off(),
                        seed,
                    )?;
                    Ok(LossValue {
                        value: out.losses.total,
                        grads: out.grads,
                    })
                },
                &inputs,
                probes / 2,
                seed,
            )
        }
        "full" => {
            let s_cfg = ModelConfig::tiny(true);
            let t_cfg = ModelConfig::tiny(false);
            let scene = tiny_scene(seed, s_cfg.n_classes)?;
            let teacher = init_params(&t_cfg, seed ^ 1)?;
            let full = init_params(&s_cfg, seed)?;
            let inputs = trainable(&full);
            let mut plan = DistillPlan::full();
            plan.ql_mode = if seed.is_multiple_of(2) {
                MatchMode::Cfd
            } else {
                MatchMode::Fld
            };
            check_gradients(
                |x| {
                    let p = with_meta(x, &full);
                    let out = distill_step(
                        ModelRef {
                            params: &p,
                            config: &s_cfg,
                        },
                        Some(ModelRef {
                            params: &teacher,
                            config: &t_cfg,
                        }),
                        &scene,
                        &plan,
                        seed,
                    )?;
                    Ok(LossValue {
                        value: out.losses.total,
                        grads: out.grads,
                    })
                },
                &inputs,
                probes / 2,
                seed,
            )
        }
        other => Err(Error::InvalidArgument(format!("unknown component {other:?}"))),
    }
}

fn strip_all_but(m: TensorMap, keep: &[&str]) -> TensorMap {
    m.into_iter()
        .filter(|(k, _)| keep.iter().any(|p| k.starts_with(p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adamw_zero_grad_decays() {
        let mut p = TensorMap::new();
        p.insert("w".into(), Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap());
        let mut g = TensorMap::new();
        g.insert("w".into(), Tensor::zeros(&[2]));
        let hp = AdamW {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamW::default()
        };
        let mut st = OptState::default();
        adamw_step(&mut p, &g, &mut st, &hp).unwrap();
        assert!((p["w"].data[0] - 0.95).abs() < 1e-15);
        assert!((p["w"].data[1] + 1.9).abs() < 1e-15);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adamw_first_step_is_sign() {
        for g0 in [0.3, -7.0, 1e-3] {
            let mut p = TensorMap::new();
            p.insert("w".into(), Tensor::from_vec(&[1], vec![0.5]).unwrap());
            let mut g = TensorMap::new();
            g.insert("w".into(), Tensor::from_vec(&[1], vec![g0]).unwrap());
            let hp = AdamW {
                lr: 0.01,
                weight_decay: 0.0,
                ..AdamW::default()
            };
            adamw_step(&mut p, &g, &mut OptState::default(), &hp).unwrap();
            let expect = 0.5 - 0.01 * g0 / (g0.abs() + 1e-8);
            assert!((p["w"].data[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adamw_zero_lr_and_shape_errors() {
        let mut p = TensorMap::new();
        p.insert("w".into(), Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap());
        let mut g = TensorMap::new();
        g.insert("w".into(), Tensor::from_vec(&[2], vec![3.0, -1.0]).unwrap());
        let before = p.clone();
        let hp = AdamW {
            lr: 0.0,
            ..AdamW::default()
        };
        adamw_step(&mut p, &g, &mut OptState::default(), &hp).unwrap();
        assert_eq!(p, before);
        let mut bad = TensorMap::new();
        bad.insert("w".into(), Tensor::zeros(&[3]));
        assert!(adamw_step(&mut p, &bad, &mut OptState::default(), &hp).is_err());
        let mut unknown = TensorMap::new();
        unknown.insert("v".into(), Tensor::zeros(&[2]));
        assert!(adamw_step(&mut p, &unknown, &mut OptState::default(), &hp).is_err());
    }

    #[test]
    fn split_and_seeds() {
        let (t, v) = holdout_split(16);
        assert_eq!(v, vec![7, 15]);
        assert_eq!(t.len(), 14);
        assert_eq!(holdout_split(3), (vec![0, 1, 2], vec![0, 1, 2]));
        assert_ne!(scene_seed(0, 1, 2), scene_seed(0, 2, 1));
        assert_eq!(scene_seed(5, 1, 2), scene_seed(5, 1, 2));
    }

    #[test]
    fn unknown_component_lists_names() {
        let e = gradcheck("nope", 1, 0).unwrap_err().to_string();
        assert!(e.contains("chamfer") && e.contains("full"));
    }

    #[test]
    fn quadratic_gradcheck() {
        let r = gradcheck("quadratic", 3, 1).unwrap();
        assert!(r[0].passed, "{r:?}");
        assert!(r[0].worst < 1e-8);
    }
}

//! One distillation step: anchor sampling, the main, prior and anchor
//! passes through both models, and the combined student gradient.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, DepthImage, Vec3};
use crate::losses::{self, DistillWeights, FocalParams, LossValue, MatchMode};
use crate::matching::KdTree;
use crate::model::{self, embeddings, encoder_backward, ModelConfig, ModelParams, PRIOR_SIGMA};
use crate::par::Exec;
use crate::scene::{extract_gt_set, GroundTruthSet, SceneFile, VoxelGrid};
use crate::syndata::render_depth_with;
use crate::tensor::{accumulate, Tensor, TensorMap};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub positions: Vec<Vec3>,
    pub classes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillPlan {
    pub enable_efa: bool,
    pub enable_ql: bool,
    pub enable_pl: bool,
    pub enable_al: bool,
    pub enable_tgi: bool,
    pub weights: DistillWeights,
    pub ql_mode: MatchMode,
}

impl Default for DistillPlan {
    fn default() -> Self {
        DistillPlan::off()
    }
}

impl DistillPlan {
    pub fn full() -> Self {
        DistillPlan {
            enable_efa: true,
            enable_ql: true,
            enable_pl: true,
            enable_al: true,
            enable_tgi: true,
            weights: DistillWeights::default(),
            ql_mode: MatchMode::Cfd,
        }
    }

    pub fn off() -> Self {
        DistillPlan {
            enable_efa: false,
            enable_ql: false,
            enable_pl: false,
            enable_al: false,
            enable_tgi: false,
            ..DistillPlan::full()
        }
    }

    pub fn any_level(&self) -> bool {
        self.enable_efa || self.enable_ql || self.enable_pl || self.enable_al
    }

    /// Parses a comma-separated level list such as `efa,ql,pl,al`; the empty
    /// string selects no level. TGI and weights keep their current values.
    pub fn with_levels(mut self, list: &str) -> Result<Self> {
        self.enable_efa = false;
        self.enable_ql = false;
        self.enable_pl = false;
        self.enable_al = false;
        for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match item {
                "efa" => self.enable_efa = true,
                "ql" => self.enable_ql = true,
                "pl" => self.enable_pl = true,
                "al" => self.enable_al = true,
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown distillation level {other:?} (expected efa, ql, pl, al)"
                    )))
                }
            }
        }
        Ok(self)
    }
}

/// Per-voxel sampling weights `1 / (K_present * count(class))`.
pub fn class_rebalanced_weights(gt: &GroundTruthSet) -> Result<Vec<f64>> {
    if gt.is_empty() {
        return Err(Error::EmptySet("anchor weights: ground truth"));
    }
    let mut counts = [0usize; 256];
    for &c in &gt.classes {
        counts[c as usize] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count() as f64;
    Ok(gt
        .classes
        .iter()
        .map(|&c| 1.0 / (present * counts[c as usize] as f64))
        .collect())
}

/// `n` draws with replacement under the class-rebalanced distribution.
pub fn sample_anchors(gt: &GroundTruthSet, n: usize, seed: u64) -> Result<AnchorSet> {
    let weights = class_rebalanced_weights(gt)?;
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::InvalidArgument(format!("anchor weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (positions, classes) = (0..n)
        .map(|_| {
            let i = dist.sample(&mut rng);
            (gt.positions[i], gt.classes[i])
        })
        .unzip();
    Ok(AnchorSet { positions, classes })
}

/// Query rows whose centres are the anchors and whose features come from
/// `donor` (a model's own embeddings).
pub fn make_query_override(anchors: &AnchorSet, donor: &[(Vec3, Vec<f64>)]) -> Result<Vec<(Vec3, Vec<f64>)>> {
    if anchors.positions.len() != donor.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} anchors for {} queries",
            anchors.positions.len(),
            donor.len()
        )));
    }
    Ok(anchors
        .positions
        .iter()
        .zip(donor)
        .map(|(&p, (_, f))| (p, f.clone()))
        .collect())
}

/// A scene rendered and indexed for training at one image size.
#[derive(Debug, Clone)]
pub struct SceneInput {
    pub grid: VoxelGrid,
    pub camera: Camera,
    pub depth: DepthImage,
    pub prior: Option<DepthImage>,
    pub gt: GroundTruthSet,
    pub gt_tree: KdTree,
}

impl SceneInput {
    /// Renders the scene at `image = [h, w]`; the camera's principal point
    /// must sit at the image centre. `prior_seed` adds a simulated prior.
    pub fn new(scene: &SceneFile, image: [usize; 2], prior_seed: Option<u64>) -> Result<Self> {
        let k = scene.camera.intrinsics;
        if k.cx * 2.0 != image[1] as f64 || k.cy * 2.0 != image[0] as f64 {
            return Err(Error::ShapeMismatch(format!(
                "camera principal point ({}, {}) does not centre a {}x{} image",
                k.cx, k.cy, image[0], image[1]
            )));
        }
        let depth = render_depth_with(Exec::Sequential, &scene.grid, &scene.camera, image[0], image[1]);
        let prior = prior_seed.map(|s| model::simulate_depth_prior(&depth, PRIOR_SIGMA, s));
        let gt = extract_gt_set(&scene.grid);
        if gt.is_empty() {
            return Err(Error::EmptySet("scene ground truth"));
        }
        let gt_tree = KdTree::new(&gt.positions);
        Ok(SceneInput {
            grid: scene.grid.clone(),
            camera: scene.camera,
            depth,
            prior,
            gt,
            gt_tree,
        })
    }

    pub fn observation(&self) -> model::Observation<'_> {
        model::Observation {
            depth: &self.depth,
            camera: &self.camera,
            prior: self.prior.as_ref(),
        }
    }
}

/// A model with its configuration.
#[derive(Debug, Clone, Copy)]
pub struct ModelRef<'a> {
    pub params: &'a ModelParams,
    pub config: &'a ModelConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_task: f64,
    pub l_efa: f64,
    pub l_ql: f64,
    pub l_pl: f64,
    pub l_al: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(l_task: f64, l_efa: f64, l_ql: f64, l_pl: f64, l_al: f64, w: &DistillWeights) -> Self {
        LossBreakdown {
            l_task,
            l_efa,
            l_ql,
            l_pl,
            l_al,
            total: l_task + w.efa * l_efa + w.ql * l_ql + w.pl * l_pl + w.al * l_al,
        }
    }

    pub fn add_scaled(&mut self, o: &LossBreakdown, s: f64) {
        self.l_task += s * o.l_task;
        self.l_efa += s * o.l_efa;
        self.l_ql += s * o.l_ql;
        self.l_pl += s * o.l_pl;
        self.l_al += s * o.l_al;
        self.total += s * o.total;
    }
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub losses: LossBreakdown,
    /// Gradients of `losses.total` w.r.t. student parameters.
    pub grads: TensorMap,
}

impl StepOutput {
    pub fn loss(&self) -> LossValue {
        LossValue {
            value: self.losses.total,
            grads: self.grads.clone(),
        }
    }
}

fn scaled(loss: &LossValue, s: f64) -> Result<TensorMap> {
    let mut out = TensorMap::new();
    accumulate(&mut out, &loss.grads, s)?;
    Ok(out)
}

fn add_embed_grad(grads: &mut TensorMap, config: &ModelConfig, rows: &[(Vec3, Vec<f64>)], with_centres: bool) {
    let w = 3 + config.feature_dim;
    let t = grads
        .entry("query.embed".to_string())
        .or_insert_with(|| Tensor::zeros(&[config.n_queries, w]));
    for (i, (c, f)) in rows.iter().enumerate() {
        let row = &mut t.data[i * w..(i + 1) * w];
        if with_centres {
            for a in 0..3 {
                row[a] += c[a];
            }
        }
        for (dst, g) in row[3..].iter_mut().zip(f) {
            *dst += g;
        }
    }
}

/// Task loss plus the enabled distillation levels for one scene, with the
/// gradient of the total w.r.t. every trainable student parameter. The
/// teacher is only read. With every level disabled this is the plain task
/// step used for teacher training.
pub fn distill_step(
    student: ModelRef,
    teacher: Option<ModelRef>,
    scene: &SceneInput,
    plan: &DistillPlan,
    seed: u64,
) -> Result<StepOutput> {
    let sc = student.config;
    let sp = student.params;
    let w = plan.weights;
    let teacher = match (teacher, plan.any_level()) {
        (Some(t), true) => Some(t),
        (None, true) => return Err(Error::InvalidArgument("distillation levels need a teacher".into())),
        (_, false) => None,
    };
    if let Some(t) = teacher {
        if t.config.n_queries != sc.n_queries
            || t.config.feature_dim != sc.feature_dim
            || t.config.points_per_layer != sc.points_per_layer
            || t.config.n_classes != sc.n_classes
        {
            return Err(Error::ShapeMismatch(
                "teacher and student query sets differ in shape".into(),
            ));
        }
        if plan.enable_efa && t.config.decoder_channels != sc.decoder_channels {
            return Err(Error::ShapeMismatch("encoder feature channels differ".into()));
        }
    }

    let obs = scene.observation();
    let enc = model::encode(sp, sc, obs.depth)?;
    let mut grads = TensorMap::new();
    let mut d_features = vec![0.0; enc.features.len()];
    let exec = Exec::Sequential;

    // teacher forward, computed once and shared
    let t_state = match teacher {
        Some(t) => {
            let t_enc = model::encode(t.params, t.config, obs.depth)?;
            let t_main = if plan.enable_ql || plan.enable_pl {
                Some(model::forward_from_features(
                    t.params,
                    t.config,
                    &t_enc.features,
                    obs.camera,
                    obs.prior,
                    embeddings(t.params),
                )?)
            } else {
                None
            };
            Some((t, t_enc, t_main))
        }
        None => None,
    };

    // (a) main pass: task + query level
    let s_queries = embeddings(sp);
    let main = model::forward_from_features(sp, sc, &enc.features, obs.camera, obs.prior, s_queries)?;
    let task = losses::task_loss_indexed(
        exec,
        &main.predictions,
        &scene.gt,
        &scene.gt_tree,
        FocalParams::default(),
    )?;
    let mut main_grads = task.grads.clone();
    let mut l_ql = 0.0;
    if plan.enable_ql {
        let t_main = t_state.as_ref().and_then(|s| s.2.as_ref()).expect("teacher main pass");
        let ql = losses::ql_loss(&main.layers, &t_main.layers, plan.ql_mode)?;
        l_ql = ql.value;
        accumulate(&mut main_grads, &ql.grads, w.ql)?;
    }
    let g_in = model::backward(
        sp,
        sc,
        &main,
        &enc.features,
        obs.prior,
        &main_grads,
        &mut grads,
        &mut d_features,
    )?;
    add_embed_grad(&mut grads, sc, &g_in, true);

    // (b) prior pass: teacher embeddings through the student
    let mut l_pl = 0.0;
    if plan.enable_pl {
        let (t, _, t_main) = t_state.as_ref().expect("teacher");
        let t_main = t_main.as_ref().expect("teacher main pass");
        let prior_trace =
            model::forward_from_features(sp, sc, &enc.features, obs.camera, obs.prior, embeddings(t.params))?;
        let pl = losses::pl_loss(&prior_trace.layers, &t_main.layers)?;
        l_pl = pl.value;
        model::backward(
            sp,
            sc,
            &prior_trace,
            &enc.features,
            obs.prior,
            &scaled(&pl, w.pl)?,
            &mut grads,
            &mut d_features,
        )?;
    }

    // (c) anchor pass: centres pinned to sampled GT voxels
    let mut l_al = 0.0;
    if plan.enable_al {
        let (t, t_enc, _) = t_state.as_ref().expect("teacher");
        let anchors = sample_anchors(&scene.gt, sc.n_queries, seed)?;
        let s_over = make_query_override(&anchors, &embeddings(sp))?;
        let t_over = make_query_override(&anchors, &embeddings(t.params))?;
        let s_trace = model::forward_from_features(sp, sc, &enc.features, obs.camera, obs.prior, s_over)?;
        let t_trace = model::forward_from_features(t.params, t.config, &t_enc.features, obs.camera, obs.prior, t_over)?;
        let al = losses::al_loss(&s_trace.layers, &t_trace.layers)?;
        l_al = al.value;
        let g_in = model::backward(
            sp,
            sc,
            &s_trace,
            &enc.features,
            obs.prior,
            &scaled(&al, w.al)?,
            &mut grads,
            &mut d_features,
        )?;
        add_embed_grad(&mut grads, sc, &g_in, false);
    }

    // (d) encoder-level alignment
    let mut l_efa = 0.0;
    if plan.enable_efa {
        let (_, t_enc, _) = t_state.as_ref().expect("teacher");
        let efa = losses::efa_loss(&enc.features, &t_enc.features)?;
        l_efa = efa.value;
        let g = &efa.grads["student_features"];
        d_features.iter_mut().zip(&g.data).for_each(|(a, b)| *a += w.efa * b);
    }

    encoder_backward(sp, sc, &enc, &d_features, &mut grads);
    // parameters without any gradient path still get an explicit zero
    for (name, t) in sp.iter().filter(|(n, _)| model::is_trainable(n)) {
        grads.entry(name.clone()).or_insert_with(|| t.zeros_like());
    }
    Ok(StepOutput {
        losses: LossBreakdown::combine(task.value, l_efa, l_ql, l_pl, l_al, &w),
        grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::hungarian_calls;
    use crate::model::{init_params, ModelConfig};
    use crate::syndata::{generate_scene, SceneRecipe};

    fn two_class(a: usize, b: usize) -> GroundTruthSet {
        let positions = (0..a + b).map(|i| [i as f64, 0.0, 0.0]).collect();
        let classes = (0..a + b).map(|i| if i < a { 1 } else { 2 }).collect();
        GroundTruthSet { positions, classes }
    }

    fn tiny_scene() -> SceneInput {
        let recipe = SceneRecipe {
            image: [16, 16],
            n_semantic: 4,
            ..SceneRecipe::toy()
        };
        let (grid, camera) = generate_scene(&recipe, 11).unwrap();
        SceneInput::new(&SceneFile { grid, camera }, [16, 16], None).unwrap()
    }

    #[test]
    fn rebalanced_weights() {
        let w = class_rebalanced_weights(&two_class(90, 10)).unwrap();
        assert!((w[0] - 1.0 / 180.0).abs() < 1e-15);
        assert!((w[95] - 1.0 / 20.0).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let single = class_rebalanced_weights(&two_class(7, 0)).unwrap();
        assert!(single.iter().all(|&x| (x - 1.0 / 7.0).abs() < 1e-15));
        assert!(class_rebalanced_weights(&two_class(0, 0)).is_err());
    }

    #[test]
    fn anchors_single_voxel_and_determinism() {
        let gt = two_class(1, 0);
        let a = sample_anchors(&gt, 5, 3).unwrap();
        assert!(a.positions.iter().all(|p| *p == gt.positions[0]));
        let gt = two_class(90, 10);
        assert_eq!(sample_anchors(&gt, 50, 9).unwrap(), sample_anchors(&gt, 50, 9).unwrap());
        assert!(sample_anchors(&two_class(0, 0), 5, 0).is_err());
    }

    #[test]
    fn query_override_blocks() {
        let anchors = AnchorSet {
            positions: vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]],
            classes: vec![1, 2],
        };
        let donor = vec![([0.0; 3], vec![7.0, 8.0]), ([9.0; 3], vec![1.5, 2.5])];
        let q = make_query_override(&anchors, &donor).unwrap();
        assert_eq!(q[0], ([1.0, 2.0, 3.0], vec![7.0, 8.0]));
        assert_eq!(q[1], ([4.0, 5.0, 6.0], vec![1.5, 2.5]));
        assert!(make_query_override(&anchors, &donor[..1]).is_err());
    }

    #[test]
    fn plan_parsing() {
        let p = DistillPlan::off().with_levels("efa, al").unwrap();
        assert!(p.enable_efa && p.enable_al && !p.enable_ql && !p.enable_pl);
        assert!(!DistillPlan::full().with_levels("").unwrap().any_level());
        assert!(DistillPlan::off().with_levels("xx").is_err());
    }

    #[test]
    fn all_off_is_task_only() {
        let scene = tiny_scene();
        let cfg = ModelConfig::tiny(true);
        let p = init_params(&cfg, 1).unwrap();
        let out = distill_step(
            ModelRef {
                params: &p,
                config: &cfg,
            },
            None,
            &scene,
            &DistillPlan::off(),
            0,
        )
        .unwrap();
        assert_eq!(out.losses.total, out.losses.l_task);
        assert_eq!(
            out.losses.l_efa + out.losses.l_ql + out.losses.l_pl + out.losses.l_al,
            0.0
        );
    }

    #[test]
    fn self_distillation_is_zero() {
        let scene = tiny_scene();
        let cfg = ModelConfig::tiny(true);
        let p = init_params(&cfg, 2).unwrap();
        let m = ModelRef {
            params: &p,
            config: &cfg,
        };
        let out = distill_step(m, Some(m), &scene, &DistillPlan::full(), 5).unwrap();
        assert_eq!(
            [out.losses.l_efa, out.losses.l_ql, out.losses.l_pl, out.losses.l_al],
            [0.0; 4]
        );
        assert_eq!(out.losses.total, out.losses.l_task);
    }

    #[test]
    fn prior_and_anchor_levels_skip_matching() {
        let scene = tiny_scene();
        let cfg = ModelConfig::tiny(true);
        let s = init_params(&cfg, 3).unwrap();
        let t = init_params(&cfg, 4).unwrap();
        let plan = DistillPlan::off().with_levels("pl,al").unwrap();
        let before = hungarian_calls();
        distill_step(
            ModelRef {
                params: &s,
                config: &cfg,
            },
            Some(ModelRef {
                params: &t,
                config: &cfg,
            }),
            &scene,
            &plan,
            0,
        )
        .unwrap();
        assert_eq!(hungarian_calls(), before);
        let plan = DistillPlan::off().with_levels("ql").unwrap();
        distill_step(
            ModelRef {
                params: &s,
                config: &cfg,
            },
            Some(ModelRef {
                params: &t,
                config: &cfg,
            }),
            &scene,
            &plan,
            0,
        )
        .unwrap();
        assert_eq!(hungarian_calls(), before + cfg.n_layers() as u64);
    }

    #[test]
    fn anchor_only_composes() {
        let scene = tiny_scene();
        let cfg = ModelConfig::tiny(true);
        let s = init_params(&cfg, 3).unwrap();
        let t = init_params(&cfg, 4).unwrap();
        let plan = DistillPlan::off().with_levels("al").unwrap();
        let sm = ModelRef {
            params: &s,
            config: &cfg,
        };
        let tm = ModelRef {
            params: &t,
            config: &cfg,
        };
        let out = distill_step(sm, Some(tm), &scene, &plan, 8).unwrap();
        let anchors = sample_anchors(&scene.gt, cfg.n_queries, 8).unwrap();
        let run = |m: ModelRef| {
            let q = make_query_override(&anchors, &embeddings(m.params)).unwrap();
            model::forward(m.params, m.config, scene.observation(), Some(q))
                .unwrap()
                .1
        };
        let al = losses::al_loss(&run(sm).layers, &run(tm).layers).unwrap().value;
        assert!(((out.losses.total - out.losses.l_task) - 0.5 * al).abs() < 1e-12);
        assert!(al > 0.0);
    }
}

//! Task and distillation losses with analytic gradients.
//!
//! Every loss returns a [`LossValue`]: the scalar plus gradients keyed by
//! the name of each differentiable (student-side) input. Teacher inputs are
//! constants and never appear in the gradient map.
//!
//! Snapshot-list losses use the keys `layer{d}.center` (`N x 3`),
//! `layer{d}.feature` (`N x C`), `layer{d}.points` (`N*R x 3`) and
//! `layer{d}.logits` (`N*R x K`), with points flattened query-major. The
//! task loss uses the same point/logit keys, so the model's backward pass
//! consumes either.

use serde::{Deserialize, Serialize};

use crate::geometry::{dist2, Vec3};
use crate::kinks;
use crate::matching::{build_query_cost_matrix, hungarian, nearest_indices, KdTree};
use crate::par::Exec;
use crate::scene::{GroundTruthSet, PredictionSet};
use crate::tensor::{accumulate, l2_normalize, l2_normalize_backward, log_softmax, Tensor, TensorMap};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    pub grads: TensorMap,
}

impl LossValue {
    pub fn zero() -> Self {
        LossValue::default()
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }
}

/// One query's state after a decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct QuerySnapshot {
    pub center: Vec3,
    pub feature: Vec<f64>,
    pub points: Vec<Vec3>,
    /// Row-major `R x K`.
    pub logits: Vec<f64>,
}

impl QuerySnapshot {
    pub fn num_points(&self) -> usize {
        self.points.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistillWeights {
    pub efa: f64,
    pub ql: f64,
    pub pl: f64,
    pub al: f64,
}

impl Default for DistillWeights {
    /// `(1, 0.2, 0.2, 0.5)`.
    fn default() -> Self {
        DistillWeights {
            efa: 1.0,
            ql: 0.2,
            pl: 0.2,
            al: 0.5,
        }
    }
}

impl DistillWeights {
    pub fn new(efa: f64, ql: f64, pl: f64, al: f64) -> Result<Self> {
        let w = DistillWeights { efa, ql, pl, al };
        if [efa, ql, pl, al].iter().any(|v| v.is_nan() || *v < 0.0) {
            return Err(Error::InvalidArgument("distillation weights must be >= 0".into()));
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams { alpha: 1.0, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    /// Centre L1 + normalised feature MSE.
    #[default]
    Cfd,
    /// Per-point L1 + logit KL.
    Fld,
}

fn points_tensor(g: &[Vec3]) -> Tensor {
    Tensor {
        shape: vec![g.len(), 3],
        data: g.iter().flatten().copied().collect(),
    }
}

// ---------------------------------------------------------------------------
// Chamfer

/// Chamfer terms against a pre-built ground-truth tree. Also returns the
/// nearest ground-truth index of every predicted point.
pub fn chamfer_indexed(exec: Exec, pred: &[Vec3], gt_tree: &KdTree) -> Result<(f64, Vec<Vec3>, Vec<usize>)> {
    if pred.is_empty() {
        return Err(Error::EmptySet("chamfer: prediction"));
    }
    if gt_tree.is_empty() {
        return Err(Error::EmptySet("chamfer: ground truth"));
    }
    let gt = gt_tree.points();
    let (n, m) = (pred.len() as f64, gt.len() as f64);
    let to_gt = nearest_indices(exec, gt_tree, pred);
    let pred_tree = KdTree::new(pred);
    let to_pred = nearest_indices(exec, &pred_tree, gt);

    let mut grad = vec![[0.0; 3]; pred.len()];
    let mut forward = 0.0;
    for (i, (&p, &j)) in pred.iter().zip(&to_gt).enumerate() {
        let q = gt[j];
        forward += dist2(p, q);
        for a in 0..3 {
            grad[i][a] += 2.0 / n * (p[a] - q[a]);
        }
    }
    let mut backward = 0.0;
    for (&q, &i) in gt.iter().zip(&to_pred) {
        let p = pred[i];
        backward += dist2(q, p);
        for a in 0..3 {
            grad[i][a] += 2.0 / m * (p[a] - q[a]);
        }
    }
    Ok((forward / n + backward / m, grad, to_gt))
}

/// Mean squared nearest-neighbour distance in both directions; gradient
/// w.r.t. `pred` under key `pred`.
pub fn chamfer_distance(pred: &[Vec3], gt: &[Vec3]) -> Result<LossValue> {
    let tree = KdTree::new(gt);
    let (value, grad, _) = chamfer_indexed(Exec::default(), pred, &tree)?;
    let mut grads = TensorMap::new();
    grads.insert("pred".into(), points_tensor(&grad));
    Ok(LossValue { value, grads })
}

// ---------------------------------------------------------------------------
// Focal

/// Mean of `-alpha (1 - p_t)^gamma log p_t` over rows of `logits` (`n x k`).
pub fn focal_raw(logits: &[f64], k: usize, targets: &[usize], params: FocalParams) -> Result<(f64, Vec<f64>)> {
    if logits.len() != targets.len() * k {
        return Err(Error::ShapeMismatch(format!(
            "{} logits for {} targets x {k} classes",
            logits.len(),
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidClass { class: bad, limit: k });
    }
    let n = targets.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let FocalParams { alpha, gamma } = params;
    let mut grad = vec![0.0; logits.len()];
    let mut total = 0.0;
    for (row, &t) in targets.iter().enumerate() {
        let z = &logits[row * k..(row + 1) * k];
        let logp = log_softmax(z);
        let lpt = logp[t];
        let pt = lpt.exp();
        let one_m = (1.0 - pt).max(0.0);
        let w = one_m.powf(gamma);
        total += -alpha * w * lpt;
        // dL/dp_t, then chain through softmax: dp_t/dz_j = p_t (delta_tj - p_j)
        let dw = if gamma == 0.0 {
            0.0
        } else {
            gamma * one_m.powf(gamma - 1.0)
        };
        let dl_dpt = -alpha * (-dw * lpt + w / pt);
        let g = &mut grad[row * k..(row + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let pj = logp[j].exp();
            let delta = if j == t { 1.0 } else { 0.0 };
            *gj = dl_dpt * pt * (delta - pj) / n as f64;
        }
    }
    Ok((total / n as f64, grad))
}

pub fn focal_loss(logits: &[f64], k: usize, targets: &[usize], params: FocalParams) -> Result<LossValue> {
    let (value, grad) = focal_raw(logits, k, targets, params)?;
    let mut grads = TensorMap::new();
    grads.insert(
        "logits".into(),
        Tensor {
            shape: vec![targets.len(), k],
            data: grad,
        },
    );
    Ok(LossValue { value, grads })
}

// ---------------------------------------------------------------------------
// Task loss

/// Sum over layers of Chamfer on point positions plus focal loss on point
/// logits against nearest-neighbour ground-truth labels.
pub fn task_loss(layers: &[PredictionSet], gt: &GroundTruthSet, focal: FocalParams) -> Result<LossValue> {
    let tree = KdTree::new(&gt.positions);
    task_loss_indexed(Exec::default(), layers, gt, &tree, focal)
}

pub fn task_loss_indexed(
    exec: Exec,
    layers: &[PredictionSet],
    gt: &GroundTruthSet,
    gt_tree: &KdTree,
    focal: FocalParams,
) -> Result<LossValue> {
    if layers.is_empty() {
        return Err(Error::InvalidArgument("task loss needs at least one layer".into()));
    }
    if gt.is_empty() {
        return Err(Error::EmptySet("task loss: ground truth"));
    }
    let mut out = LossValue::zero();
    for (d, layer) in layers.iter().enumerate() {
        let (cd, cd_grad, nn) = chamfer_indexed(exec, &layer.positions, gt_tree)?;
        let targets: Vec<usize> = nn.iter().map(|&j| gt.classes[j] as usize - 1).collect();
        let (fl, fl_grad) = focal_raw(&layer.logits, layer.num_semantic, &targets, focal)?;
        out.value += cd + fl;
        out.grads.insert(format!("layer{d}.points"), points_tensor(&cd_grad));
        out.grads.insert(
            format!("layer{d}.logits"),
            Tensor {
                shape: vec![layer.len(), layer.num_semantic],
                data: fl_grad,
            },
        );
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Feature alignment

/// MSE between per-row L2-normalised student and teacher features, both
/// `[locations, channels]`. Gradient under `student_features`.
pub fn efa_loss(student: &Tensor, teacher: &Tensor) -> Result<LossValue> {
    if student.shape != teacher.shape || student.shape.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student.shape, teacher.shape
        )));
    }
    let c = student.shape[1];
    let total = student.len() as f64;
    let mut grad = vec![0.0; student.len()];
    let mut value = 0.0;
    if c > 0 {
        for (row, (s, t)) in student.data.chunks(c).zip(teacher.data.chunks(c)).enumerate() {
            let (ns, r) = l2_normalize(s);
            let (nt, _) = l2_normalize(t);
            let dn: Vec<f64> = ns.iter().zip(&nt).map(|(a, b)| 2.0 * (a - b) / total).collect();
            value += ns.iter().zip(&nt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
            grad[row * c..(row + 1) * c].copy_from_slice(&l2_normalize_backward(s, r, &dn));
        }
        value /= total;
    }
    let mut grads = TensorMap::new();
    grads.insert(
        "student_features".into(),
        Tensor {
            shape: student.shape.clone(),
            data: grad,
        },
    );
    Ok(LossValue { value, grads })
}

// ---------------------------------------------------------------------------
// Per-pair matching losses

struct PairGrad {
    center: Vec3,
    feature: Vec<f64>,
    points: Vec<Vec3>,
    logits: Vec<f64>,
}

fn l1_with_grad(a: Vec3, b: Vec3) -> (f64, Vec3) {
    let mut v = 0.0;
    let mut g = [0.0; 3];
    let mut signs = 0u64;
    for k in 0..3 {
        let d = a[k] - b[k];
        v += d.abs();
        g[k] = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        signs = signs * 3 + (g[k] + 1.0) as u64;
    }
    kinks::note(0x5157_0000 + signs);
    (v, g)
}

fn cfd_raw(s: &QuerySnapshot, t: &QuerySnapshot, scale: f64) -> Result<(f64, PairGrad)> {
    let c = s.feature.len();
    if t.feature.len() != c {
        return Err(Error::ShapeMismatch(format!("feature dims {c} vs {}", t.feature.len())));
    }
    let (l1, g_center) = l1_with_grad(s.center, t.center);
    let (ns, r) = l2_normalize(&s.feature);
    let (nt, _) = l2_normalize(&t.feature);
    let mut mse = 0.0;
    let mut dn = vec![0.0; c];
    if c > 0 {
        for i in 0..c {
            let d = ns[i] - nt[i];
            mse += d * d;
            dn[i] = scale * 2.0 * d / c as f64;
        }
        mse /= c as f64;
    }
    let g_feature = l2_normalize_backward(&s.feature, r, &dn);
    Ok((
        l1 + mse,
        PairGrad {
            center: [g_center[0] * scale, g_center[1] * scale, g_center[2] * scale],
            feature: g_feature,
            points: Vec::new(),
            logits: Vec::new(),
        },
    ))
}

fn fld_raw(s: &QuerySnapshot, t: &QuerySnapshot, scale: f64) -> Result<(f64, PairGrad)> {
    let r = s.points.len();
    if t.points.len() != r || r == 0 || s.logits.len() != t.logits.len() || !s.logits.len().is_multiple_of(r) {
        return Err(Error::ShapeMismatch(format!(
            "student {} points / {} logits vs teacher {} / {}",
            r,
            s.logits.len(),
            t.points.len(),
            t.logits.len()
        )));
    }
    let k = s.logits.len() / r;
    let mut value = 0.0;
    let mut g_points = vec![[0.0; 3]; r];
    let mut g_logits = vec![0.0; s.logits.len()];
    let w = scale / r as f64;
    for j in 0..r {
        let (l1, g) = l1_with_grad(s.points[j], t.points[j]);
        value += l1;
        g_points[j] = [g[0] * w, g[1] * w, g[2] * w];
        let ls = log_softmax(&s.logits[j * k..(j + 1) * k]);
        let lt = log_softmax(&t.logits[j * k..(j + 1) * k]);
        for i in 0..k {
            let pt = lt[i].exp();
            if pt > 0.0 {
                value += pt * (lt[i] - ls[i]);
            }
            g_logits[j * k + i] = w * (ls[i].exp() - pt);
        }
    }
    Ok((
        value / r as f64,
        PairGrad {
            center: [0.0; 3],
            feature: vec![0.0; s.feature.len()],
            points: g_points,
            logits: g_logits,
        },
    ))
}

fn pair_loss(mode: MatchMode, s: &QuerySnapshot, t: &QuerySnapshot, scale: f64) -> Result<(f64, PairGrad)> {
    match mode {
        MatchMode::Cfd => cfd_raw(s, t, scale),
        MatchMode::Fld => fld_raw(s, t, scale),
    }
}

fn pair_map(g: PairGrad) -> TensorMap {
    let mut m = TensorMap::new();
    m.insert(
        "center".into(),
        Tensor {
            shape: vec![3],
            data: g.center.to_vec(),
        },
    );
    m.insert(
        "feature".into(),
        Tensor {
            shape: vec![g.feature.len()],
            data: g.feature,
        },
    );
    if !g.points.is_empty() {
        let r = g.points.len();
        m.insert("points".into(), points_tensor(&g.points));
        let k = g.logits.len() / r;
        m.insert(
            "logits".into(),
            Tensor {
                shape: vec![r, k],
                data: g.logits,
            },
        );
    }
    m
}

/// Centre L1 (summed over axes) plus MSE of L2-normalised features.
pub fn cfd_loss(student: &QuerySnapshot, teacher: &QuerySnapshot) -> Result<LossValue> {
    let (value, g) = cfd_raw(student, teacher, 1.0)?;
    let mut grads = pair_map(g);
    grads.retain(|k, _| k == "center" || k == "feature");
    Ok(LossValue { value, grads })
}

/// Per-point L1 plus `KL(softmax(teacher) || softmax(student))`, averaged
/// over the point set.
pub fn fld_loss(student: &QuerySnapshot, teacher: &QuerySnapshot) -> Result<LossValue> {
    let (value, g) = fld_raw(student, teacher, 1.0)?;
    let mut grads = pair_map(g);
    grads.retain(|k, _| k == "points" || k == "logits");
    Ok(LossValue { value, grads })
}

// ---------------------------------------------------------------------------
// Layered query losses

fn check_layers(student: &[Vec<QuerySnapshot>], teacher: &[Vec<QuerySnapshot>]) -> Result<()> {
    if student.len() != teacher.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} student layers vs {} teacher layers",
            student.len(),
            teacher.len()
        )));
    }
    for (d, (s, t)) in student.iter().zip(teacher).enumerate() {
        if s.len() != t.len() || s.is_empty() {
            return Err(Error::ShapeMismatch(format!(
                "layer {d}: {} student vs {} teacher queries",
                s.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// Sums `(1/N) sum_i L(student_i, teacher_pair(i))` over layers.
fn layered_loss(
    student: &[Vec<QuerySnapshot>],
    teacher: &[Vec<QuerySnapshot>],
    mode: MatchMode,
    pairing: impl Fn(&[QuerySnapshot], &[QuerySnapshot]) -> Result<Vec<usize>>,
) -> Result<LossValue> {
    check_layers(student, teacher)?;
    let mut out = LossValue::zero();
    for (d, (s_layer, t_layer)) in student.iter().zip(teacher).enumerate() {
        let n = s_layer.len();
        let c = s_layer[0].feature.len();
        let pair = pairing(s_layer, t_layer)?;
        let scale = 1.0 / n as f64;
        let mut g_center = Vec::with_capacity(n * 3);
        let mut g_feature = Vec::with_capacity(n * c);
        let mut g_points = Vec::new();
        let mut g_logits = Vec::new();
        let mut sum = 0.0;
        for (i, s) in s_layer.iter().enumerate() {
            if s.feature.len() != c {
                return Err(Error::ShapeMismatch("feature width varies within a layer".into()));
            }
            let (v, g) = pair_loss(mode, s, &t_layer[pair[i]], scale)?;
            sum += v;
            g_center.extend_from_slice(&g.center);
            g_feature.extend_from_slice(&g.feature);
            g_points.extend(g.points.iter().flatten());
            g_logits.extend_from_slice(&g.logits);
        }
        out.value += sum / n as f64;
        out.grads.insert(
            format!("layer{d}.center"),
            Tensor {
                shape: vec![n, 3],
                data: g_center,
            },
        );
        out.grads.insert(
            format!("layer{d}.feature"),
            Tensor {
                shape: vec![n, c],
                data: g_feature,
            },
        );
        if mode == MatchMode::Fld {
            let rows = g_points.len() / 3;
            let k = g_logits.len().checked_div(rows).unwrap_or(0);
            out.grads.insert(
                format!("layer{d}.points"),
                Tensor {
                    shape: vec![rows, 3],
                    data: g_points,
                },
            );
            out.grads.insert(
                format!("layer{d}.logits"),
                Tensor {
                    shape: vec![rows, k],
                    data: g_logits,
                },
            );
        }
    }
    Ok(out)
}

/// Query-level loss: per layer, Hungarian-match student to teacher queries
/// on centre distance, then average the matching loss over pairs.
pub fn ql_loss(student: &[Vec<QuerySnapshot>], teacher: &[Vec<QuerySnapshot>], mode: MatchMode) -> Result<LossValue> {
    layered_loss(student, teacher, mode, |s, t| {
        let sc: Vec<Vec3> = s.iter().map(|q| q.center).collect();
        let tc: Vec<Vec3> = t.iter().map(|q| q.center).collect();
        Ok(hungarian(&build_query_cost_matrix(&sc, &tc)?).assignment)
    })
}

fn identity_pairing(s: &[QuerySnapshot], _: &[QuerySnapshot]) -> Result<Vec<usize>> {
    Ok((0..s.len()).collect())
}

/// Prior-level loss: index-aligned CFD between student queries seeded with
/// teacher embeddings and the teacher's own queries.
pub fn pl_loss(prior: &[Vec<QuerySnapshot>], teacher: &[Vec<QuerySnapshot>]) -> Result<LossValue> {
    layered_loss(prior, teacher, MatchMode::Cfd, identity_pairing)
}

/// Anchor-level loss: index-aligned CFD between anchor queries of both models.
pub fn al_loss(student_anchor: &[Vec<QuerySnapshot>], teacher_anchor: &[Vec<QuerySnapshot>]) -> Result<LossValue> {
    layered_loss(student_anchor, teacher_anchor, MatchMode::Cfd, identity_pairing)
}

/// `l1 efa + l2 ql + l3 pl + l4 al`; component gradients are scaled and
/// re-keyed under `efa.`, `ql.`, `pl.` and `al.` prefixes.
pub fn distill_loss(efa: &LossValue, ql: &LossValue, pl: &LossValue, al: &LossValue, w: &DistillWeights) -> LossValue {
    let mut out = LossValue {
        value: w.efa * efa.value + w.ql * ql.value + w.pl * pl.value + w.al * al.value,
        grads: TensorMap::new(),
    };
    for (prefix, part, weight) in [
        ("efa", efa, w.efa),
        ("ql", ql, w.ql),
        ("pl", pl, w.pl),
        ("al", al, w.al),
    ] {
        let renamed: TensorMap = part
            .grads
            .iter()
            .map(|(k, v)| (format!("{prefix}.{k}"), v.clone()))
            .collect();
        accumulate(&mut out.grads, &renamed, weight).expect("fresh keys cannot clash");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn snap(center: Vec3, feature: Vec<f64>, points: Vec<Vec3>, logits: Vec<f64>) -> QuerySnapshot {
        QuerySnapshot {
            center,
            feature,
            points,
            logits,
        }
    }

    fn brute_chamfer(a: &[Vec3], b: &[Vec3]) -> f64 {
        let d = |p: &Vec3, q: &Vec3| (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2);
        let one = |x: &[Vec3], y: &[Vec3]| {
            x.iter()
                .map(|p| y.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / x.len() as f64
        };
        one(a, b) + one(b, a)
    }

    fn naive_focal(logits: &[f64], k: usize, targets: &[usize], gamma: f64) -> f64 {
        let mut sum = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let z = &logits[i * k..(i + 1) * k];
            let denom: f64 = z.iter().map(|v| v.exp()).sum();
            let p = z[t].exp() / denom;
            sum += -(1.0 - p).powf(gamma) * p.ln();
        }
        sum / targets.len() as f64
    }

    fn naive_cfd(s: &QuerySnapshot, t: &QuerySnapshot) -> f64 {
        let l1: f64 = (0..3).map(|a| (s.center[a] - t.center[a]).abs()).sum();
        let ns = s.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nt = t.feature.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mse = s
            .feature
            .iter()
            .zip(&t.feature)
            .map(|(a, b)| (a / ns - b / nt).powi(2))
            .sum::<f64>()
            / s.feature.len() as f64;
        l1 + mse
    }

    #[test]
    fn chamfer_examples() {
        let v = chamfer_distance(&[[0.0; 3]], &[[1.0, 0.0, 0.0]]).unwrap();
        assert!((v.value - 2.0).abs() < 1e-15);
        let v = chamfer_distance(&[[0.0; 3], [2.0, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
        assert!((v.value - 2.0).abs() < 1e-15);
        let pts = vec![[0.1, 0.2, 0.3], [1.0, 1.0, 0.0]];
        let v = chamfer_distance(&pts, &pts).unwrap();
        assert_eq!(v.value, 0.0);
        assert!(v.grads["pred"].data.iter().all(|&g| g == 0.0));
        assert!(chamfer_distance(&[], &pts).is_err());
        assert!(chamfer_distance(&pts, &[]).is_err());
    }

    #[test]
    fn focal_examples() {
        let v = focal_loss(&[0.0, 0.0], 2, &[0], FocalParams::default()).unwrap();
        assert!((v.value - 0.25 * 2f64.ln()).abs() < 1e-12);
        assert!((v.value - 0.173286).abs() < 1e-6);
        let logits = [0.3, -1.2, 2.0, 0.5, 0.1, -0.4];
        let ce = focal_loss(&logits, 3, &[2, 0], FocalParams { alpha: 1.0, gamma: 0.0 }).unwrap();
        assert!((ce.value - naive_focal(&logits, 3, &[2, 0], 0.0)).abs() < 1e-9);
        let sure = focal_loss(&[40.0, 0.0], 2, &[0], FocalParams::default()).unwrap();
        assert!(sure.value < 1e-30);
        assert!(matches!(
            focal_loss(&[0.0, 0.0], 2, &[2], FocalParams::default()),
            Err(Error::InvalidClass { .. })
        ));
    }

    #[test]
    fn task_loss_examples() {
        let gt = GroundTruthSet {
            positions: vec![[0.1, 0.1, 0.1], [0.3, 0.1, 0.1]],
            classes: vec![1, 3],
        };
        let logits = vec![0.2, -0.1, 0.5, 1.0, 0.0, -1.0];
        let layer = PredictionSet {
            positions: gt.positions.clone(),
            logits: logits.clone(),
            num_semantic: 3,
        };
        let one = task_loss(std::slice::from_ref(&layer), &gt, FocalParams::default()).unwrap();
        let focal_only = naive_focal(&logits, 3, &[0, 2], 2.0);
        assert!((one.value - focal_only).abs() < 1e-12);
        let two = task_loss(&[layer.clone(), layer], &gt, FocalParams::default()).unwrap();
        assert_eq!(two.value, 2.0 * one.value);
        assert!(task_loss(&[], &gt, FocalParams::default()).is_err());
    }

    #[test]
    fn efa_examples() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.5, -0.5]).unwrap();
        assert_eq!(efa_loss(&t, &t).unwrap().value, 0.0);
        let mut s = t.clone();
        s.scale(2.0);
        assert!(efa_loss(&s, &t).unwrap().value < 1e-30);
        let a = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let b = Tensor::from_vec(&[1, 2], vec![0.0, 1.0]).unwrap();
        assert!((efa_loss(&a, &b).unwrap().value - 1.0).abs() < 1e-15);
        assert!(efa_loss(&a, &t).is_err());
    }

    #[test]
    fn cfd_fld_examples() {
        let s = snap([1.0, 0.0, 0.0], vec![0.3, 0.4], vec![[0.0; 3]], vec![0.0, 0.0]);
        assert_eq!(cfd_loss(&s, &s).unwrap().value, 0.0);
        assert_eq!(fld_loss(&s, &s).unwrap().value, 0.0);
        let t = snap([0.0; 3], vec![0.3, 0.4], vec![[0.0; 3]], vec![0.0, 0.0]);
        assert!((cfd_loss(&s, &t).unwrap().value - 1.0).abs() < 1e-15);
        let a = snap([0.0; 3], vec![1.0, 0.0], vec![[0.0; 3]], vec![0.0, 0.0]);
        let b = snap([0.0; 3], vec![0.0, 1.0], vec![[0.0; 3]], vec![3f64.ln(), 0.0]);
        assert!((cfd_loss(&a, &b).unwrap().value - 1.0).abs() < 1e-15);
        let kl = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let v = fld_loss(&a, &b).unwrap().value;
        assert!((v - kl).abs() < 1e-12 && (v - 0.130812).abs() < 1e-6);
        let wrong = snap([0.0; 3], vec![1.0], vec![[0.0; 3]], vec![0.0, 0.0]);
        assert!(cfd_loss(&a, &wrong).is_err());
        let two_pts = snap([0.0; 3], vec![1.0, 0.0], vec![[0.0; 3]; 2], vec![0.0; 4]);
        assert!(fld_loss(&a, &two_pts).is_err());
    }

    fn rand_layers(seed: u64, d: usize, n: usize) -> Vec<Vec<QuerySnapshot>> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..d)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        let c = [
                            rng.random_range(0.0..3.0),
                            rng.random_range(0.0..3.0),
                            rng.random_range(0.0..3.0),
                        ];
                        let f = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                        let p = (0..2)
                            .map(|_| [rng.random_range(0.0..3.0), 0.5, rng.random_range(0.0..1.0)])
                            .collect();
                        let l = (0..6).map(|_| rng.random_range(-2.0..2.0)).collect();
                        snap(c, f, p, l)
                    })
                    .collect()
            })
            .collect()
    }

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 1 {
            return vec![vec![0]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for i in 0..n {
                let mut q = p.clone();
                q.insert(i, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn ql_single_query_reduces_to_cfd() {
        let s = rand_layers(1, 2, 1);
        let t = rand_layers(2, 2, 1);
        let expect: f64 = (0..2).map(|d| naive_cfd(&s[d][0], &t[d][0])).sum();
        assert!((ql_loss(&s, &t, MatchMode::Cfd).unwrap().value - expect).abs() < 1e-12);
        assert!((pl_loss(&s, &t).unwrap().value - expect).abs() < 1e-12);
        assert!((al_loss(&s, &t).unwrap().value - expect).abs() < 1e-12);
        assert_eq!(ql_loss(&s, &s, MatchMode::Cfd).unwrap().value, 0.0);
        assert_eq!(ql_loss(&s, &s, MatchMode::Fld).unwrap().value, 0.0);
    }

    #[test]
    fn ql_matches_permutation_oracle() {
        for seed in 0..20 {
            let s = rand_layers(seed, 2, 3);
            let t = rand_layers(seed + 100, 2, 3);
            let mut expect = 0.0;
            for d in 0..2 {
                let cost = |p: &[usize]| -> f64 {
                    (0..3)
                        .map(|i| {
                            let (a, b) = (s[d][i].center, t[d][p[i]].center);
                            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
                        })
                        .sum()
                };
                let best = permutations(3)
                    .into_iter()
                    .min_by(|a, b| cost(a).partial_cmp(&cost(b)).unwrap())
                    .unwrap();
                expect += (0..3).map(|i| naive_cfd(&s[d][i], &t[d][best[i]])).sum::<f64>() / 3.0;
            }
            let got = ql_loss(&s, &t, MatchMode::Cfd).unwrap().value;
            assert!((got - expect).abs() < 1e-12, "seed {seed}: {got} vs {expect}");
        }
    }

    #[test]
    fn pl_al_compose_from_pairs() {
        let s = rand_layers(7, 2, 4);
        let t = rand_layers(8, 2, 4);
        let expect: f64 = (0..2)
            .map(|d| (0..4).map(|i| naive_cfd(&s[d][i], &t[d][i])).sum::<f64>() / 4.0)
            .sum();
        assert!((pl_loss(&s, &t).unwrap().value - expect).abs() < 1e-12);
        assert!((al_loss(&s, &t).unwrap().value - expect).abs() < 1e-12);
        assert!(pl_loss(&s, &rand_layers(8, 1, 4)).is_err());
        assert!(al_loss(&s, &rand_layers(8, 2, 3)).is_err());
    }

    #[test]
    fn distill_weights_and_combination() {
        let one = LossValue {
            value: 1.0,
            grads: TensorMap::new(),
        };
        let w = DistillWeights::default();
        assert!((distill_loss(&one, &one, &one, &one, &w).value - 1.9).abs() < 1e-15);
        let z = LossValue::zero();
        assert_eq!(distill_loss(&z, &z, &z, &z, &w).value, 0.0);
        assert!(DistillWeights::new(1.0, -0.1, 0.0, 0.0).is_err());

        let s = rand_layers(3, 2, 3);
        let t = rand_layers(4, 2, 3);
        let ql = ql_loss(&s, &t, MatchMode::Cfd).unwrap();
        let pl = pl_loss(&s, &t).unwrap();
        let a = distill_loss(&z, &ql, &pl, &z, &w);
        let w2 = DistillWeights::new(2.0, 0.4, 0.4, 1.0).unwrap();
        let b = distill_loss(&z, &ql, &pl, &z, &w2);
        assert!((b.value - 2.0 * a.value).abs() < 1e-12);
        for (k, g) in &a.grads {
            for (x, y) in g.data.iter().zip(&b.grads[k].data) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
        assert!(a.grads.keys().all(|k| k.starts_with("ql.") || k.starts_with("pl.")));
    }

    fn vec3() -> impl Strategy<Value = Vec3> {
        [-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn chamfer_matches_brute_force(a in prop::collection::vec(vec3(), 1..20), b in prop::collection::vec(vec3(), 1..20)) {
            let v = chamfer_distance(&a, &b).unwrap().value;
            prop_assert!((v - brute_chamfer(&a, &b)).abs() < 1e-12);
            prop_assert!(v >= 0.0);
        }

        #[test]
        fn ql_teacher_permutation_invariant(seed in 0u64..1000, shift in 1usize..5) {
            let s = rand_layers(seed, 2, 5);
            let t = rand_layers(seed + 1, 2, 5);
            let permuted: Vec<Vec<QuerySnapshot>> = t
                .iter()
                .map(|l| (0..5).map(|i| l[(i + shift) % 5].clone()).collect())
                .collect();
            let a = ql_loss(&s, &t, MatchMode::Cfd).unwrap().value;
            let b = ql_loss(&s, &permuted, MatchMode::Cfd).unwrap().value;
            prop_assert!((a - b).abs() < 1e-9);
        }

        #[test]
        fn feature_terms_scale_invariant(f in prop::collection::vec(-2.0f64..2.0, 3), g in prop::collection::vec(-2.0f64..2.0, 3), k in 0.1f64..10.0) {
            prop_assume!(f.iter().map(|v| v * v).sum::<f64>() > 1e-3 && g.iter().map(|v| v * v).sum::<f64>() > 1e-3);
            let s = snap([0.0; 3], f.clone(), vec![[0.0; 3]], vec![0.0]);
            let t = snap([0.0; 3], g.clone(), vec![[0.0; 3]], vec![0.0]);
            let s2 = snap([0.0; 3], f.iter().map(|v| v * k).collect(), vec![[0.0; 3]], vec![0.0]);
            let a = cfd_loss(&s, &t).unwrap().value;
            prop_assert!((a - cfd_loss(&s2, &t).unwrap().value).abs() < 1e-12);
            let ft = Tensor::from_vec(&[1, 3], f.clone()).unwrap();
            let gt = Tensor::from_vec(&[1, 3], g.clone()).unwrap();
            let ft2 = Tensor::from_vec(&[1, 3], f.iter().map(|v| v * k).collect()).unwrap();
            prop_assert!((efa_loss(&ft, &gt).unwrap().value - efa_loss(&ft2, &gt).unwrap().value).abs() < 1e-12);
        }

        #[test]
        fn losses_nonnegative_and_student_keyed(seed in 0u64..500) {
            let s = rand_layers(seed, 2, 3);
            let t = rand_layers(seed + 7, 2, 3);
            for l in [ql_loss(&s, &t, MatchMode::Cfd).unwrap(), ql_loss(&s, &t, MatchMode::Fld).unwrap(), pl_loss(&s, &t).unwrap(), al_loss(&s, &t).unwrap()] {
                prop_assert!(l.value >= 0.0);
                prop_assert!(l.grads.keys().all(|k| k.starts_with("layer")));
            }
            prop_assert!(fld_loss(&s[0][0], &t[0][0]).unwrap().value >= 0.0);
        }
    }
}

//! Bipartite assignment between query sets and exact nearest-neighbour
//! correspondences between point sets.

use std::cell::Cell;
use std::cmp::Ordering;

use crate::geometry::{dist2, Vec3};
use crate::kinks;
use crate::par::{self, Exec};
use crate::scene::GroundTruthSet;
use crate::{Error, Result};

/// Square matrix of assignment costs, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "cost matrix needs {} entries for N = {n}, got {}",
                n * n,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cost matrix"));
        }
        Ok(CostMatrix { n, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::ShapeMismatch("cost matrix is not square".into()));
        }
        CostMatrix::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Sum of `cost[i][assignment[i]]` accumulated in row order.
    pub fn total(&self, assignment: &[usize]) -> f64 {
        assignment.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Row `i` is matched to column `assignment[i]`.
    pub assignment: Vec<usize>,
    pub total_cost: f64,
}

thread_local! {
    static HUNGARIAN_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`hungarian`] invocations on the current thread.
pub fn hungarian_calls() -> u64 {
    HUNGARIAN_CALLS.with(Cell::get)
}

/// Minimum-cost perfect assignment, O(N^3) shortest augmenting paths with
/// row/column potentials.
pub fn hungarian(cost: &CostMatrix) -> MatchResult {
    HUNGARIAN_CALLS.with(|c| c.set(c.get() + 1));
    let n = cost.n;
    if n == 0 {
        return MatchResult {
            assignment: Vec::new(),
            total_cost: 0.0,
        };
    }
    // 1-based, column 0 is the virtual source
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    kinks::note_all(assignment.iter().copied());
    let total_cost = cost.total(&assignment);
    MatchResult { assignment, total_cost }
}

/// `c_ij = |student_i - teacher_j|_2`.
pub fn build_query_cost_matrix(student_centers: &[Vec3], teacher_centers: &[Vec3]) -> Result<CostMatrix> {
    let n = student_centers.len();
    if teacher_centers.len() != n {
        return Err(Error::ShapeMismatch(format!(
            "{n} student centres vs {} teacher centres",
            teacher_centers.len()
        )));
    }
    let mut values = Vec::with_capacity(n * n);
    for s in student_centers {
        for t in teacher_centers {
            values.push(dist2(*s, *t).sqrt());
        }
    }
    CostMatrix::new(n, values)
}

// ---------------------------------------------------------------------------
// Nearest neighbours

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        lo: usize,
        hi: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree returning the exact nearest point, ties resolved to the
/// lowest point index.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build(&mut self, lo: usize, hi: usize) -> usize {
        let id = self.nodes.len();
        if hi - lo <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { lo, hi });
            return id;
        }
        let mut spread = [0.0f64; 3];
        for (a, s) in spread.iter_mut().enumerate() {
            let (mn, mx) = self.order[lo..hi].iter().fold((f64::MAX, f64::MIN), |(mn, mx), &i| {
                (mn.min(self.points[i][a]), mx.max(self.points[i][a]))
            });
            *s = mx - mn;
        }
        let axis = (0..3)
            .max_by(|&a, &b| spread[a].total_cmp(&spread[b]).then(b.cmp(&a)))
            .unwrap_or(0);
        let pts = &self.points;
        self.order[lo..hi].sort_unstable_by(|&i, &j| pts[i][axis].total_cmp(&pts[j][axis]).then(i.cmp(&j)));
        let mid = lo + (hi - lo) / 2;
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { lo, hi });
        let left = self.build(lo, mid);
        let right = self.build(mid, hi);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Index and squared distance of the nearest point. Panics on an empty tree.
    pub fn nearest(&self, q: Vec3) -> (usize, f64) {
        assert!(!self.points.is_empty(), "nearest() on empty tree");
        let mut best = (usize::MAX, f64::INFINITY);
        self.search(0, q, &mut best);
        best
    }

    fn search(&self, node: usize, q: Vec3, best: &mut (usize, f64)) {
        match self.nodes[node] {
            Node::Leaf { lo, hi } => {
                for &i in &self.order[lo..hi] {
                    let d = dist2(q, self.points[i]);
                    if better(d, i, best.1, best.0) {
                        *best = (i, d);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // equal-distance points may still carry a lower index
                if diff * diff <= best.1 {
                    self.search(far, q, best);
                }
            }
        }
    }
}

#[inline]
fn better(d: f64, i: usize, best_d: f64, best_i: usize) -> bool {
    match d.total_cmp(&best_d) {
        Ordering::Less => true,
        Ordering::Equal => i < best_i,
        Ordering::Greater => false,
    }
}

/// Exhaustive nearest-neighbour scan; the reference the tree must match.
pub fn brute_force_nearest(points: &[Vec3], q: Vec3) -> (usize, f64) {
    let mut best = (usize::MAX, f64::INFINITY);
    for (i, &p) in points.iter().enumerate() {
        let d = dist2(q, p);
        if better(d, i, best.1, best.0) {
            best = (i, d);
        }
    }
    best
}

/// Nearest index in `tree` for every query, in query order.
pub fn nearest_indices(exec: Exec, tree: &KdTree, queries: &[Vec3]) -> Vec<usize> {
    let idx = if queries.len() < 256 {
        queries.iter().map(|&q| tree.nearest(q).0).collect()
    } else {
        par::map_slice(exec, queries, |&q| tree.nearest(q).0)
    };
    kinks::note_all(idx.iter().copied());
    idx
}

/// For each point of `a` its nearest point in `b`, and vice versa.
pub fn nearest_neighbor_pairs(a: &[Vec3], b: &[Vec3]) -> Result<(Vec<usize>, Vec<usize>)> {
    nearest_neighbor_pairs_with(Exec::default(), a, b)
}

pub fn nearest_neighbor_pairs_with(exec: Exec, a: &[Vec3], b: &[Vec3]) -> Result<(Vec<usize>, Vec<usize>)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("nearest_neighbor_pairs"));
    }
    let tree_b = KdTree::new(b);
    let tree_a = KdTree::new(a);
    Ok((nearest_indices(exec, &tree_b, a), nearest_indices(exec, &tree_a, b)))
}

/// Class of the nearest ground-truth voxel for every predicted point.
pub fn nn_label_assign(pred_positions: &[Vec3], gt: &GroundTruthSet) -> Result<Vec<u8>> {
    if gt.is_empty() {
        return Err(Error::EmptySet("nn_label_assign: ground truth"));
    }
    let tree = KdTree::new(&gt.positions);
    Ok(nearest_indices(Exec::default(), &tree, pred_positions)
        .into_iter()
        .map(|i| gt.classes[i])
        .collect())
}

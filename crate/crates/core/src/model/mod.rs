//! Toy teacher/student networks.
//!
//! A model is an image encoder over a depth observation followed by a
//! multi-layer query decoder. Each of the `N` queries carries a centre and a
//! feature vector; every decoder layer samples the encoder feature map at the
//! projected centre, refines the feature, and emits `R_d` points with
//! semantic logits. Teacher and student share the decoder architecture and
//! differ only in encoder scale; the student adds a learned projection from
//! its encoder channels to the teacher's.
//!
//! Gradients are hand-derived: [`forward`] keeps per-query caches in the
//! [`ForwardTrace`] and [`backward`] consumes loss gradients keyed as in
//! [`crate::losses`].

mod checkpoint;
mod decoder;
mod encoder;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{Camera, DepthImage, Vec3};
use crate::tensor::{Tensor, TensorMap};
use crate::{Error, Result};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, quantize, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use decoder::{
    backward, decode_layer, depth_branch, depth_inputs, forward, forward_from_features, ForwardTrace, QueryCache,
};
pub use encoder::{encode, encoder_backward, EncoderOutput};

/// Depths and centres enter the networks divided by this.
pub const INPUT_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub width: usize,
    pub depth: usize,
    pub channels: usize,
    /// Square patch edge in pixels; the feature map is `H/patch x W/patch`.
    pub patch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_queries: usize,
    pub points_per_layer: Vec<usize>,
    pub feature_dim: usize,
    pub n_classes: usize,
    pub encoder: EncoderSpec,
    /// Channels the decoder samples. Equals `encoder.channels` unless a
    /// projection is present.
    pub decoder_channels: usize,
    pub projection: bool,
    pub depth_hidden: usize,
    pub depth_branch: bool,
    /// Observation `[height, width]` in pixels.
    pub image: [usize; 2],
    /// Axis-aligned box used to lay out the initial query centres.
    pub scene_lo: Vec3,
    pub scene_hi: Vec3,
}

impl ModelConfig {
    fn base(encoder: EncoderSpec, projection: bool) -> Self {
        ModelConfig {
            n_queries: 64,
            points_per_layer: vec![1, 4, 16],
            feature_dim: 32,
            n_classes: 6,
            encoder,
            decoder_channels: 16,
            projection,
            depth_hidden: 16,
            depth_branch: false,
            image: [32, 32],
            scene_lo: [0.0; 3],
            scene_hi: [4.8, 4.8, 3.2],
        }
    }

    pub fn teacher() -> Self {
        ModelConfig::base(
            EncoderSpec {
                width: 64,
                depth: 2,
                channels: 16,
                patch: 4,
            },
            false,
        )
    }

    pub fn student() -> Self {
        ModelConfig::base(
            EncoderSpec {
                width: 16,
                depth: 1,
                channels: 8,
                patch: 4,
            },
            true,
        )
    }

    /// `N = 4, D = 2, C = 8` on a 16 x 16 image; for gradient checks.
    pub fn tiny(student: bool) -> Self {
        let mut c = if student { Self::student() } else { Self::teacher() };
        c.n_queries = 4;
        c.points_per_layer = vec![1, 3];
        c.feature_dim = 8;
        c.n_classes = 4;
        c.encoder.width = if student { 6 } else { 10 };
        c.encoder.channels = if student { 3 } else { 5 };
        c.decoder_channels = 5;
        c.depth_hidden = 4;
        c.image = [16, 16];
        c
    }

    pub fn n_layers(&self) -> usize {
        self.points_per_layer.len()
    }

    pub fn feature_hw(&self) -> (usize, usize) {
        (self.image[0] / self.encoder.patch, self.image[1] / self.encoder.patch)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_queries == 0 {
            return bad("n_queries must be >= 1");
        }
        if self.points_per_layer.is_empty() {
            return bad("need at least one decoder layer");
        }
        if self.points_per_layer.contains(&0) || self.points_per_layer.windows(2).any(|w| w[0] > w[1]) {
            return bad("points per layer must be positive and nondecreasing");
        }
        if self.feature_dim == 0 || self.n_classes == 0 || self.decoder_channels == 0 {
            return bad("feature, class and channel counts must be positive");
        }
        let e = &self.encoder;
        if e.patch == 0 || e.channels == 0 || (e.depth > 0 && e.width == 0) {
            return bad("encoder sizes must be positive");
        }
        if !self.image[0].is_multiple_of(e.patch)
            || !self.image[1].is_multiple_of(e.patch)
            || self.image[0] == 0
            || self.image[1] == 0
        {
            return bad("image size must be a positive multiple of the patch size");
        }
        if !self.projection && e.channels != self.decoder_channels {
            return bad("encoder channels must equal decoder channels without a projection");
        }
        Ok(())
    }

    /// Recovers the architecture from checkpoint tensor shapes.
    pub fn infer(params: &ModelParams) -> Result<Self> {
        let shape = |name: &str| -> Result<&[usize]> {
            params
                .get(name)
                .map(|t| t.shape.as_slice())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))
        };
        let embed = shape("query.embed")?;
        let n_queries = embed[0];
        let feature_dim = embed[1] - 3;
        let boundary = shape("decoder.boundary")?;
        let decoder_channels = boundary[0];
        let mut points_per_layer = Vec::new();
        let mut n_classes = 0;
        while let Ok(reg) = shape(&format!("head.{}.reg.w", points_per_layer.len())) {
            let r = reg[0] / 3;
            n_classes = shape(&format!("head.{}.cls.w", points_per_layer.len()))?[0] / r;
            points_per_layer.push(r);
        }
        let mut enc_layers = 0;
        while params.contains_key(&format!("encoder.{enc_layers}.w")) {
            enc_layers += 1;
        }
        if enc_layers == 0 {
            return Err(Error::Format("checkpoint has no encoder".into()));
        }
        let first = shape("encoder.0.w")?;
        let patch = (first[1] as f64).sqrt().round() as usize;
        let last = shape(&format!("encoder.{}.w", enc_layers - 1))?;
        let width = if enc_layers > 1 { first[0] } else { 0 };
        let projection = params.contains_key("proj.w");
        let depth_branch = params.contains_key("depth.w1");
        let depth_hidden = if depth_branch { shape("depth.w1")?[0] } else { 16 };
        let meta = params
            .get("meta.image")
            .ok_or_else(|| Error::Format("checkpoint lacks meta.image".into()))?;
        let scene = params
            .get("meta.scene")
            .ok_or_else(|| Error::Format("checkpoint lacks meta.scene".into()))?;
        let config = ModelConfig {
            n_queries,
            points_per_layer,
            feature_dim,
            n_classes,
            encoder: EncoderSpec {
                width,
                depth: enc_layers - 1,
                channels: last[0],
                patch,
            },
            decoder_channels,
            projection,
            depth_hidden,
            depth_branch,
            image: [meta.data[0] as usize, meta.data[1] as usize],
            scene_lo: [scene.data[0], scene.data[1], scene.data[2]],
            scene_hi: [scene.data[3], scene.data[4], scene.data[5]],
        };
        config
            .validate()
            .map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
        let expected = param_shapes(&config);
        if expected.len() != params.len() || expected.iter().any(|(n, s)| params.get(n).map(|t| &t.shape) != Some(s)) {
            return Err(Error::Format(
                "checkpoint tensors do not form a consistent model".into(),
            ));
        }
        Ok(config)
    }
}

/// Named model tensors. Names under `meta.` are constants, not parameters.
pub type ModelParams = TensorMap;

pub fn is_trainable(name: &str) -> bool {
    !name.starts_with("meta.")
}

/// Tensors copied by teacher-guided initialisation.
fn is_decoder_side(name: &str) -> bool {
    name.starts_with("decoder.") || name.starts_with("head.") || name.starts_with("depth.")
}

fn encoder_dims(config: &ModelConfig) -> Vec<(usize, usize)> {
    let e = &config.encoder;
    let mut dims = Vec::new();
    let mut n_in = e.patch * e.patch;
    for _ in 0..e.depth {
        dims.push((e.width, n_in));
        n_in = e.width;
    }
    dims.push((e.channels, n_in));
    dims
}

/// Every tensor of a model with `config`, in name order.
pub fn param_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let c = config.feature_dim;
    let cd = config.decoder_channels;
    let k = config.n_classes;
    let mut v: Vec<(String, Vec<usize>)> = Vec::new();
    for (l, (o, i)) in encoder_dims(config).into_iter().enumerate() {
        v.push((format!("encoder.{l}.w"), vec![o, i]));
        v.push((format!("encoder.{l}.b"), vec![o]));
    }
    if config.projection {
        v.push(("proj.w".into(), vec![cd, config.encoder.channels]));
        v.push(("proj.b".into(), vec![cd]));
    }
    v.push(("decoder.boundary".into(), vec![cd]));
    for (d, &r) in config.points_per_layer.iter().enumerate() {
        v.push((format!("decoder.{d}.w1"), vec![c, cd + c + 3]));
        v.push((format!("decoder.{d}.b1"), vec![c]));
        v.push((format!("decoder.{d}.w2"), vec![c, c]));
        v.push((format!("decoder.{d}.b2"), vec![c]));
        v.push((format!("head.{d}.reg.w"), vec![r * 3, c]));
        v.push((format!("head.{d}.reg.b"), vec![r * 3]));
        v.push((format!("head.{d}.cls.w"), vec![r * k, c]));
        v.push((format!("head.{d}.cls.b"), vec![r * k]));
    }
    if config.depth_branch {
        let h = config.depth_hidden;
        v.push(("depth.w1".into(), vec![h, 2]));
        v.push(("depth.b1".into(), vec![h]));
        v.push(("depth.w2".into(), vec![c, h]));
        v.push(("depth.b2".into(), vec![c]));
        v.push(("depth.oov".into(), vec![c]));
    }
    v.push(("query.embed".into(), vec![config.n_queries, 3 + c]));
    v.push(("meta.image".into(), vec![2]));
    v.push(("meta.scene".into(), vec![6]));
    v.sort();
    v
}

/// Seeded initialisation.
///
/// Dense weights are uniform in `+-1/sqrt(fan_in)`, biases zero. Head weights
/// are scaled by 0.1, regression biases spread points by up to 0.1 m, and the
/// depth branch output layer starts at zero so enabling it leaves the
/// forward pass unchanged. Query centres sit on a jittered lattice over the
/// scene box; query features are uniform in `+-0.02`.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for (name, shape) in param_shapes(config) {
        let mut t = Tensor::zeros(&shape);
        let is_weight = shape.len() == 2 && name != "query.embed";
        if is_weight && !name.starts_with("depth.w2") {
            let a = 1.0 / (shape[1] as f64).sqrt();
            let gain = if name.starts_with("head.") { 0.1 } else { 1.0 };
            t.data.iter_mut().for_each(|v| *v = gain * rng.random_range(-a..a));
        } else if name.starts_with("head.") && name.ends_with("reg.b") {
            t.data.iter_mut().for_each(|v| *v = rng.random_range(-0.1..0.1));
        }
        if name == "query.embed" {
            init_queries(config, &mut t, &mut rng);
        } else if name == "meta.image" {
            t.data = vec![config.image[0] as f64, config.image[1] as f64];
        } else if name == "meta.scene" {
            t.data = config.scene_lo.iter().chain(&config.scene_hi).copied().collect();
        }
        params.insert(name, t);
    }
    Ok(params)
}

fn init_queries(config: &ModelConfig, t: &mut Tensor, rng: &mut ChaCha8Rng) {
    let n = config.n_queries;
    let c = config.feature_dim;
    let side = (n as f64).cbrt().ceil() as usize;
    let cells = side * side * side;
    let ext: Vec<f64> = (0..3).map(|a| config.scene_hi[a] - config.scene_lo[a]).collect();
    for i in 0..n {
        let cell = i * cells / n;
        let idx = [cell / (side * side), (cell / side) % side, cell % side];
        let row = &mut t.data[i * (3 + c)..(i + 1) * (3 + c)];
        for a in 0..3 {
            let step = ext[a] / side as f64;
            let jitter: f64 = rng.random_range(-0.5..0.5);
            row[a] = config.scene_lo[a] + (idx[a] as f64 + 0.5 + jitter) * step;
        }
        for v in row[3..].iter_mut() {
            *v = rng.random_range(-0.02..0.02);
        }
    }
}

pub fn param_count(params: &ModelParams) -> usize {
    params
        .iter()
        .filter(|(n, _)| is_trainable(n))
        .map(|(_, t)| t.len())
        .sum()
}

/// Copies the teacher's decoder, heads, depth branch (when both models have
/// one) and optionally query embeddings into `student`. Encoder and
/// projection are left alone.
pub fn teacher_guided_init(
    student: &mut ModelParams,
    teacher: &ModelParams,
    copy_query_embeddings: bool,
) -> Result<()> {
    let s_cfg = ModelConfig::infer(student)?;
    let t_cfg = ModelConfig::infer(teacher)?;
    if s_cfg.points_per_layer != t_cfg.points_per_layer
        || s_cfg.feature_dim != t_cfg.feature_dim
        || s_cfg.n_classes != t_cfg.n_classes
        || s_cfg.decoder_channels != t_cfg.decoder_channels
        || (copy_query_embeddings && s_cfg.n_queries != t_cfg.n_queries)
    {
        return Err(Error::ShapeMismatch("teacher and student decoders differ".into()));
    }
    let both_depth = s_cfg.depth_branch && t_cfg.depth_branch;
    for (name, t) in teacher {
        let copy = (is_decoder_side(name) && (both_depth || !name.starts_with("depth.")))
            || (copy_query_embeddings && name == "query.embed");
        if copy {
            student.insert(name.clone(), t.clone());
        }
    }
    Ok(())
}

/// Query embeddings as `(centre, feature)` rows.
pub fn embeddings(params: &ModelParams) -> Vec<(Vec3, Vec<f64>)> {
    let t = &params["query.embed"];
    let w = t.shape[1];
    t.data
        .chunks(w)
        .map(|r| ([r[0], r[1], r[2]], r[3..].to_vec()))
        .collect()
}

pub fn embeddings_tensor(rows: &[(Vec3, Vec<f64>)]) -> Tensor {
    let w = rows.first().map_or(3, |r| 3 + r.1.len());
    Tensor {
        shape: vec![rows.len(), w],
        data: rows
            .iter()
            .flat_map(|(c, f)| c.iter().chain(f).copied().collect::<Vec<_>>())
            .collect(),
    }
}

/// Everything a forward pass needs besides the parameters.
#[derive(Debug, Clone, Copy)]
pub struct Observation<'a> {
    pub depth: &'a DepthImage,
    pub camera: &'a Camera,
    /// Depth prior, required when the depth branch is enabled.
    pub prior: Option<&'a DepthImage>,
}

/// Stand-in for a monocular depth network: Gaussian noise on hit pixels
/// followed by a 2x box downsample and bilinear upsample.
pub fn simulate_depth_prior(clean: &DepthImage, sigma: f64, seed: u64) -> DepthImage {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    let mut noisy = clean.clone();
    for v in noisy.data.iter_mut() {
        let n = normal.sample(&mut rng);
        if *v > 0.0 {
            *v = (*v + n).max(0.0);
        }
    }
    let (h, w) = (clean.height, clean.width);
    let (hh, hw) = (h.div_ceil(2), w.div_ceil(2));
    let mut small = vec![0.0; hh * hw];
    for r in 0..hh {
        for c in 0..hw {
            let mut sum = 0.0;
            let mut cnt = 0.0;
            for dr in 0..2 {
                for dc in 0..2 {
                    let (rr, cc) = (2 * r + dr, 2 * c + dc);
                    if rr < h && cc < w {
                        sum += noisy.at(rr, cc);
                        cnt += 1.0;
                    }
                }
            }
            small[r * hw + c] = sum / cnt;
        }
    }
    let mut out = DepthImage::zeros(h, w);
    for r in 0..h {
        for c in 0..w {
            let b = crate::geometry::Bilinear::new((c as f64 + 0.5) / 2.0 - 0.5, (r as f64 + 0.5) / 2.0 - 0.5, hw, hh);
            out.data[r * w + c] = b.sample(&small);
        }
    }
    out
}

pub const PRIOR_SIGMA: f64 = 0.05;

#[cfg(test)]
mod tests;

//! Query decoder layers, the depth branch, and their backward pass.

use super::encoder::{add_grad, encode, EncoderOutput};
use super::{embeddings, ModelConfig, ModelParams, Observation, INPUT_SCALE};
use crate::geometry::{Bilinear, Camera, DepthImage, Vec3};
use crate::kinks;
use crate::losses::QuerySnapshot;
use crate::scene::PredictionSet;
use crate::tensor::{tanh_backward, tanh_inplace, Linear, Tensor, TensorMap};
use crate::{Error, Result};

/// Intermediate values of one query in one layer, kept for backward.
#[derive(Debug, Clone)]
pub struct QueryCache {
    cam: Vec3,
    pixel: Option<(f64, f64)>,
    sample: Option<Bilinear>,
    depth: Option<DepthCache>,
    x: Vec<f64>,
    h: Vec<f64>,
    f_new: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DepthCache {
    x: [f64; 2],
    h: Vec<f64>,
    prior: Option<Bilinear>,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Query `(centre, feature)` rows the decoder started from.
    pub inputs: Vec<(Vec3, Vec<f64>)>,
    pub layers: Vec<Vec<QuerySnapshot>>,
    /// Per layer, all points flattened query-major.
    pub predictions: Vec<PredictionSet>,
    pub camera: Camera,
    caches: Vec<Vec<QueryCache>>,
}

impl ForwardTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn last_prediction(&self) -> &PredictionSet {
        self.predictions.last().expect("at least one layer")
    }
}

struct LayerWeights<'a> {
    w1: Linear<'a>,
    w2: Linear<'a>,
    reg: Linear<'a>,
    cls: Linear<'a>,
}

impl<'a> LayerWeights<'a> {
    fn new(params: &'a ModelParams, d: usize) -> Self {
        let l = |w: String, b: String| Linear::new(&params[&w], &params[&b]);
        LayerWeights {
            w1: l(format!("decoder.{d}.w1"), format!("decoder.{d}.b1")),
            w2: l(format!("decoder.{d}.w2"), format!("decoder.{d}.b2")),
            reg: l(format!("head.{d}.reg.w"), format!("head.{d}.reg.b")),
            cls: l(format!("head.{d}.cls.w"), format!("head.{d}.cls.b")),
        }
    }
}

struct DepthWeights<'a> {
    w1: Linear<'a>,
    w2: Linear<'a>,
    oov: &'a [f64],
}

impl<'a> DepthWeights<'a> {
    fn new(params: &'a ModelParams) -> Self {
        DepthWeights {
            w1: Linear::new(&params["depth.w1"], &params["depth.b1"]),
            w2: Linear::new(&params["depth.w2"], &params["depth.b2"]),
            oov: &params["depth.oov"].data,
        }
    }
}

fn in_image(pixel: Option<(f64, f64)>, height: usize, width: usize) -> Option<(f64, f64)> {
    pixel.filter(|&(u, v)| u >= 0.0 && u < width as f64 && v >= 0.0 && v < height as f64)
}

fn prior_sampler(pixel: Option<(f64, f64)>, prior: &DepthImage) -> Option<Bilinear> {
    pixel.map(|(u, v)| Bilinear::new(u - 0.5, v - 0.5, prior.width, prior.height))
}

/// The depth branch inputs for `center`: its camera-frame depth `d_q` and,
/// when it projects inside the image, the sampled prior depth `d_p`.
pub fn depth_inputs(center: Vec3, camera: &Camera, prior: &DepthImage) -> (f64, Option<f64>) {
    let proj = camera.project(center);
    let pixel = in_image(proj.pixel, prior.height, prior.width);
    (proj.cam[2], prior_sampler(pixel, prior).map(|b| b.sample(&prior.data)))
}

fn depth_forward(
    dw: &DepthWeights,
    cam: Vec3,
    pixel: Option<(f64, f64)>,
    prior: &DepthImage,
) -> (Vec<f64>, DepthCache) {
    let bl = prior_sampler(pixel, prior);
    let dp = bl.map_or(0.0, |b| b.sample(&prior.data));
    let x = [cam[2] / INPUT_SCALE, dp / INPUT_SCALE];
    let mut h = dw.w1.forward(&x);
    tanh_inplace(&mut h);
    let mut fd = dw.w2.forward(&h);
    if bl.is_none() {
        fd.iter_mut().zip(dw.oov).for_each(|(a, b)| *a += b);
    }
    (fd, DepthCache { x, h, prior: bl })
}

/// Depth-prior feature `f_d` for a query centre, to be added to the query
/// feature channel-wise.
pub fn depth_branch(
    params: &ModelParams,
    config: &ModelConfig,
    center: Vec3,
    camera: &Camera,
    prior: &DepthImage,
) -> Result<Vec<f64>> {
    if !config.depth_branch {
        return Err(Error::InvalidArgument("model has no depth branch".into()));
    }
    let proj = camera.project(center);
    let pixel = in_image(proj.pixel, prior.height, prior.width);
    Ok(depth_forward(&DepthWeights::new(params), proj.cam, pixel, prior).0)
}

struct LayerContext<'a> {
    config: &'a ModelConfig,
    features: &'a Tensor,
    boundary: &'a [f64],
    camera: &'a Camera,
    prior: Option<&'a DepthImage>,
    depth: Option<DepthWeights<'a>>,
}

fn query_forward(
    ctx: &LayerContext,
    lw: &LayerWeights,
    r: usize,
    center: Vec3,
    feature: &[f64],
) -> (QuerySnapshot, QueryCache) {
    let config = ctx.config;
    let cd = config.decoder_channels;
    let (fh, fw) = config.feature_hw();
    let s = config.encoder.patch as f64;
    let proj = ctx.camera.project(center);
    let pixel = in_image(proj.pixel, config.image[0], config.image[1]);

    let mut f_prime = feature.to_vec();
    let depth = match (&ctx.depth, ctx.prior) {
        (Some(dw), Some(prior)) => {
            let (fd, cache) = depth_forward(dw, proj.cam, pixel, prior);
            f_prime.iter_mut().zip(&fd).for_each(|(a, b)| *a += b);
            Some(cache)
        }
        _ => None,
    };

    let sample = pixel.map(|(u, v)| Bilinear::new(u / s - 0.5, v / s - 0.5, fw, fh));
    let mut x = Vec::with_capacity(lw.w1.n_in);
    match &sample {
        Some(b) => {
            for ch in 0..cd {
                x.push(
                    (0..4)
                        .map(|k| b.weight[k] * ctx.features.data[b.index[k] * cd + ch])
                        .sum(),
                );
            }
            kinks::note(b.cell.0 as u64 * 7919 + b.cell.1 as u64);
        }
        None => {
            x.extend_from_slice(ctx.boundary);
            kinks::note(u64::MAX);
        }
    }
    if let Some(dc) = &depth {
        if let Some(p) = &dc.prior {
            kinks::note(p.cell.0 as u64 * 104_729 + p.cell.1 as u64);
        }
    }
    x.extend_from_slice(&f_prime);
    x.extend(center.iter().map(|c| c / INPUT_SCALE));

    let mut h = lw.w1.forward(&x);
    tanh_inplace(&mut h);
    let delta = lw.w2.forward(&h);
    let f_new: Vec<f64> = f_prime.iter().zip(&delta).map(|(a, b)| a + b).collect();

    let off = lw.reg.forward(&f_new);
    let mut points = Vec::with_capacity(r);
    let mut mean = [0.0; 3];
    for j in 0..r {
        let p = [
            center[0] + off[3 * j],
            center[1] + off[3 * j + 1],
            center[2] + off[3 * j + 2],
        ];
        for a in 0..3 {
            mean[a] += p[a];
        }
        points.push(p);
    }
    let new_center = [mean[0] / r as f64, mean[1] / r as f64, mean[2] / r as f64];
    let logits = lw.cls.forward(&f_new);

    let snap = QuerySnapshot {
        center: new_center,
        feature: f_new.clone(),
        points,
        logits,
    };
    let cache = QueryCache {
        cam: proj.cam,
        pixel,
        sample,
        depth,
        x,
        h,
        f_new,
    };
    (snap, cache)
}

fn context<'a>(
    params: &'a ModelParams,
    config: &'a ModelConfig,
    features: &'a Tensor,
    camera: &'a Camera,
    prior: Option<&'a DepthImage>,
) -> Result<LayerContext<'a>> {
    if config.depth_branch && prior.is_none() {
        return Err(Error::InvalidArgument(
            "depth branch enabled but no depth prior given".into(),
        ));
    }
    Ok(LayerContext {
        config,
        features,
        boundary: &params["decoder.boundary"].data,
        camera,
        prior,
        depth: config.depth_branch.then(|| DepthWeights::new(params)),
    })
}

/// One decoder layer over all queries.
pub fn decode_layer(
    params: &ModelParams,
    config: &ModelConfig,
    layer: usize,
    queries: &[(Vec3, Vec<f64>)],
    features: &Tensor,
    camera: &Camera,
    prior: Option<&DepthImage>,
) -> Result<Vec<QuerySnapshot>> {
    if layer >= config.n_layers() {
        return Err(Error::InvalidArgument(format!("layer {layer} out of range")));
    }
    let ctx = context(params, config, features, camera, prior)?;
    let lw = LayerWeights::new(params, layer);
    let r = config.points_per_layer[layer];
    Ok(queries
        .iter()
        .map(|(c, f)| query_forward(&ctx, &lw, r, *c, f).0)
        .collect())
}

fn check_queries(config: &ModelConfig, queries: &[(Vec3, Vec<f64>)]) -> Result<()> {
    if queries.len() != config.n_queries || queries.iter().any(|q| q.1.len() != config.feature_dim) {
        return Err(Error::ShapeMismatch(format!(
            "expected {} queries of width {}",
            config.n_queries,
            3 + config.feature_dim
        )));
    }
    Ok(())
}

/// Runs the decoder from the given query rows over precomputed features.
pub fn forward_from_features(
    params: &ModelParams,
    config: &ModelConfig,
    features: &Tensor,
    camera: &Camera,
    prior: Option<&DepthImage>,
    queries: Vec<(Vec3, Vec<f64>)>,
) -> Result<ForwardTrace> {
    check_queries(config, &queries)?;
    let ctx = context(params, config, features, camera, prior)?;
    let mut layers = Vec::with_capacity(config.n_layers());
    let mut predictions = Vec::with_capacity(config.n_layers());
    let mut caches = Vec::with_capacity(config.n_layers());
    let mut current: Vec<(Vec3, Vec<f64>)> = queries.clone();
    for (d, &r) in config.points_per_layer.iter().enumerate() {
        let lw = LayerWeights::new(params, d);
        let (snaps, cache): (Vec<_>, Vec<_>) = current.iter().map(|(c, f)| query_forward(&ctx, &lw, r, *c, f)).unzip();
        predictions.push(PredictionSet {
            positions: snaps.iter().flat_map(|s| s.points.iter().copied()).collect(),
            logits: snaps.iter().flat_map(|s| s.logits.iter().copied()).collect(),
            num_semantic: config.n_classes,
        });
        current = snaps.iter().map(|s| (s.center, s.feature.clone())).collect();
        layers.push(snaps);
        caches.push(cache);
    }
    Ok(ForwardTrace {
        inputs: queries,
        layers,
        predictions,
        camera: *camera,
        caches,
    })
}

/// Encoder plus decoder. `query_override` replaces the learned embeddings
/// as the decoder's starting queries.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    obs: Observation,
    query_override: Option<Vec<(Vec3, Vec<f64>)>>,
) -> Result<(EncoderOutput, ForwardTrace)> {
    let enc = encode(params, config, obs.depth)?;
    let queries = query_override.unwrap_or_else(|| embeddings(params));
    let trace = forward_from_features(params, config, &enc.features, obs.camera, obs.prior, queries)?;
    Ok((enc, trace))
}

// ---------------------------------------------------------------------------
// Backward

struct LayerGrads {
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    reg_w: Vec<f64>,
    reg_b: Vec<f64>,
    cls_w: Vec<f64>,
    cls_b: Vec<f64>,
}

impl LayerGrads {
    fn zeros(lw: &LayerWeights) -> Self {
        LayerGrads {
            w1: vec![0.0; lw.w1.w.len()],
            b1: vec![0.0; lw.w1.b.len()],
            w2: vec![0.0; lw.w2.w.len()],
            b2: vec![0.0; lw.w2.b.len()],
            reg_w: vec![0.0; lw.reg.w.len()],
            reg_b: vec![0.0; lw.reg.b.len()],
            cls_w: vec![0.0; lw.cls.w.len()],
            cls_b: vec![0.0; lw.cls.b.len()],
        }
    }
}

struct SharedGrads {
    boundary: Vec<f64>,
    depth_w1: Vec<f64>,
    depth_b1: Vec<f64>,
    depth_w2: Vec<f64>,
    depth_b2: Vec<f64>,
    depth_oov: Vec<f64>,
}

fn slice_of<'a>(grads: &'a TensorMap, name: &str, rows: usize, width: usize) -> Result<Option<&'a [f64]>> {
    match grads.get(name) {
        None => Ok(None),
        Some(t) if t.len() == rows * width => Ok(Some(&t.data)),
        Some(t) => Err(Error::ShapeMismatch(format!(
            "gradient {name} has shape {:?}, expected [{rows}, {width}]",
            t.shape
        ))),
    }
}

/// Backpropagates loss gradients on trace outputs (keys `layer{d}.center`,
/// `layer{d}.feature`, `layer{d}.points`, `layer{d}.logits`) into decoder
/// parameter gradients `grads` and feature-map gradients `d_features`.
/// Returns the gradient w.r.t. each input query row `(centre, feature)`.
#[allow(clippy::too_many_arguments)]
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    trace: &ForwardTrace,
    features: &Tensor,
    prior: Option<&DepthImage>,
    loss_grads: &TensorMap,
    grads: &mut TensorMap,
    d_features: &mut [f64],
) -> Result<Vec<(Vec3, Vec<f64>)>> {
    let n = config.n_queries;
    let c = config.feature_dim;
    let k = config.n_classes;
    let cd = config.decoder_channels;
    let s = config.encoder.patch as f64;
    let intr = trace.camera.intrinsics;
    let ctx = context(params, config, features, &trace.camera, prior)?;
    let dh = config.depth_hidden;
    let mut shared = SharedGrads {
        boundary: vec![0.0; cd],
        depth_w1: vec![0.0; if config.depth_branch { dh * 2 } else { 0 }],
        depth_b1: vec![0.0; if config.depth_branch { dh } else { 0 }],
        depth_w2: vec![0.0; if config.depth_branch { c * dh } else { 0 }],
        depth_b2: vec![0.0; if config.depth_branch { c } else { 0 }],
        depth_oov: vec![0.0; if config.depth_branch { c } else { 0 }],
    };

    // gradients flowing into each query's (centre, feature) from the layer above
    let mut up_center = vec![[0.0f64; 3]; n];
    let mut up_feature = vec![vec![0.0f64; c]; n];

    for d in (0..config.n_layers()).rev() {
        let r = config.points_per_layer[d];
        let lw = LayerWeights::new(params, d);
        let mut lg = LayerGrads::zeros(&lw);
        let g_center = slice_of(loss_grads, &format!("layer{d}.center"), n, 3)?;
        let g_feature = slice_of(loss_grads, &format!("layer{d}.feature"), n, c)?;
        let g_points = slice_of(loss_grads, &format!("layer{d}.points"), n * r, 3)?;
        let g_logits = slice_of(loss_grads, &format!("layer{d}.logits"), n * r, k)?;

        for i in 0..n {
            let cache = &trace.caches[d][i];
            let mut gc_new = up_center[i];
            if let Some(g) = g_center {
                for a in 0..3 {
                    gc_new[a] += g[i * 3 + a];
                }
            }
            let mut gf_new = std::mem::take(&mut up_feature[i]);
            if let Some(g) = g_feature {
                gf_new.iter_mut().zip(&g[i * c..(i + 1) * c]).for_each(|(a, b)| *a += b);
            }
            if let Some(g) = g_logits {
                let gl = &g[i * r * k..(i + 1) * r * k];
                let back = lw.cls.backward(&cache.f_new, gl, &mut lg.cls_w, &mut lg.cls_b);
                gf_new.iter_mut().zip(&back).for_each(|(a, b)| *a += b);
            }
            // points_j = c + off_j, centre' = c + mean_j off_j
            let mut g_off = vec![0.0; r * 3];
            let mut gc = gc_new;
            for j in 0..r {
                for a in 0..3 {
                    let gp = g_points.map_or(0.0, |g| g[(i * r + j) * 3 + a]);
                    g_off[j * 3 + a] = gp + gc_new[a] / r as f64;
                    gc[a] += gp;
                }
            }
            let back = lw.reg.backward(&cache.f_new, &g_off, &mut lg.reg_w, &mut lg.reg_b);
            gf_new.iter_mut().zip(&back).for_each(|(a, b)| *a += b);

            // f_new = f' + W2 tanh(W1 x + b1) + b2
            let mut gf_prime = gf_new.clone();
            let g_h = lw.w2.backward(&cache.h, &gf_new, &mut lg.w2, &mut lg.b2);
            let g_a = tanh_backward(&cache.h, &g_h);
            let g_x = lw.w1.backward(&cache.x, &g_a, &mut lg.w1, &mut lg.b1);
            let (g_sample, rest) = g_x.split_at(cd);
            let (g_fp, g_cin) = rest.split_at(c);
            gf_prime.iter_mut().zip(g_fp).for_each(|(a, b)| *a += b);
            for a in 0..3 {
                gc[a] += g_cin[a] / INPUT_SCALE;
            }

            let mut g_u = 0.0;
            let mut g_v = 0.0;
            let mut g_z = 0.0;
            match &cache.sample {
                Some(b) => {
                    let mut g_gx = 0.0;
                    let mut g_gy = 0.0;
                    for corner in 0..4 {
                        let loc = b.index[corner];
                        let f = &features.data[loc * cd..(loc + 1) * cd];
                        let df = &mut d_features[loc * cd..(loc + 1) * cd];
                        let mut dot = 0.0;
                        for ch in 0..cd {
                            df[ch] += b.weight[corner] * g_sample[ch];
                            dot += f[ch] * g_sample[ch];
                        }
                        g_gx += b.d_dx[corner] * dot;
                        g_gy += b.d_dy[corner] * dot;
                    }
                    g_u += g_gx / s;
                    g_v += g_gy / s;
                }
                None => shared.boundary.iter_mut().zip(g_sample).for_each(|(a, b)| *a += b),
            }

            // f' = f + f_d(d_q, d_p)
            if let (Some(dw), Some(dc)) = (&ctx.depth, &cache.depth) {
                let g_fd = &gf_prime;
                if dc.prior.is_none() {
                    shared.depth_oov.iter_mut().zip(g_fd).for_each(|(a, b)| *a += b);
                }
                let g_hd = dw.w2.backward(&dc.h, g_fd, &mut shared.depth_w2, &mut shared.depth_b2);
                let g_ad = tanh_backward(&dc.h, &g_hd);
                let g_xd = dw.w1.backward(&dc.x, &g_ad, &mut shared.depth_w1, &mut shared.depth_b1);
                g_z += g_xd[0] / INPUT_SCALE;
                if let (Some(b), Some(prior)) = (&dc.prior, ctx.prior) {
                    let (dx, dy) = b.gradient(&prior.data);
                    let g_dp = g_xd[1] / INPUT_SCALE;
                    g_u += g_dp * dx;
                    g_v += g_dp * dy;
                }
            }

            // camera projection
            let [xc, yc, zc] = cache.cam;
            let mut g_cam = [0.0, 0.0, g_z];
            if cache.pixel.is_some() {
                g_cam[0] += g_u * intr.fx / zc;
                g_cam[1] += g_v * intr.fy / zc;
                g_cam[2] += -g_u * intr.fx * xc / (zc * zc) - g_v * intr.fy * yc / (zc * zc);
            }
            let g_world = trace.camera.rotate_to_world(g_cam);
            for a in 0..3 {
                gc[a] += g_world[a];
            }

            up_center[i] = gc;
            up_feature[i] = gf_prime;
        }

        add_grad(
            grads,
            &format!("decoder.{d}.w1"),
            &params[&format!("decoder.{d}.w1")].shape,
            &lg.w1,
        );
        add_grad(
            grads,
            &format!("decoder.{d}.b1"),
            &params[&format!("decoder.{d}.b1")].shape,
            &lg.b1,
        );
        add_grad(
            grads,
            &format!("decoder.{d}.w2"),
            &params[&format!("decoder.{d}.w2")].shape,
            &lg.w2,
        );
        add_grad(
            grads,
            &format!("decoder.{d}.b2"),
            &params[&format!("decoder.{d}.b2")].shape,
            &lg.b2,
        );
        add_grad(
            grads,
            &format!("head.{d}.reg.w"),
            &params[&format!("head.{d}.reg.w")].shape,
            &lg.reg_w,
        );
        add_grad(
            grads,
            &format!("head.{d}.reg.b"),
            &params[&format!("head.{d}.reg.b")].shape,
            &lg.reg_b,
        );
        add_grad(
            grads,
            &format!("head.{d}.cls.w"),
            &params[&format!("head.{d}.cls.w")].shape,
            &lg.cls_w,
        );
        add_grad(
            grads,
            &format!("head.{d}.cls.b"),
            &params[&format!("head.{d}.cls.b")].shape,
            &lg.cls_b,
        );
    }
    add_grad(grads, "decoder.boundary", &[cd], &shared.boundary);
    if config.depth_branch {
        add_grad(grads, "depth.w1", &params["depth.w1"].shape, &shared.depth_w1);
        add_grad(grads, "depth.b1", &params["depth.b1"].shape, &shared.depth_b1);
        add_grad(grads, "depth.w2", &params["depth.w2"].shape, &shared.depth_w2);
        add_grad(grads, "depth.b2", &params["depth.b2"].shape, &shared.depth_b2);
        add_grad(grads, "depth.oov", &params["depth.oov"].shape, &shared.depth_oov);
    }
    Ok(up_center.into_iter().zip(up_feature).collect())
}

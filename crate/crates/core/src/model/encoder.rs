//! Patch-wise MLP encoder over the depth observation.

use super::{ModelConfig, ModelParams, INPUT_SCALE};
use crate::geometry::DepthImage;
use crate::tensor::{tanh_backward, tanh_inplace, Linear, Tensor, TensorMap};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[H' * W', decoder_channels]`, row-major over `(row, col)` locations.
    pub features: Tensor,
    /// Per location: the input patch and every layer's output.
    activations: Vec<Vec<Vec<f64>>>,
}

impl EncoderOutput {
    fn layer_output(&self, loc: usize, layer: usize) -> &[f64] {
        &self.activations[loc][layer]
    }
}

fn n_layers(config: &ModelConfig) -> usize {
    config.encoder.depth + 1
}

pub fn encode(params: &ModelParams, config: &ModelConfig, obs: &DepthImage) -> Result<EncoderOutput> {
    if obs.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("observation"));
    }
    if [obs.height, obs.width] != config.image {
        return Err(Error::ShapeMismatch(format!(
            "observation {}x{} vs model {}x{}",
            obs.height, obs.width, config.image[0], config.image[1]
        )));
    }
    let s = config.encoder.patch;
    let (fh, fw) = config.feature_hw();
    let layers: Vec<Linear> = (0..n_layers(config))
        .map(|l| Linear::new(&params[&format!("encoder.{l}.w")], &params[&format!("encoder.{l}.b")]))
        .collect();
    let proj = config
        .projection
        .then(|| Linear::new(&params["proj.w"], &params["proj.b"]));
    let cd = config.decoder_channels;
    let mut features = Tensor::zeros(&[fh * fw, cd]);
    let mut activations = Vec::with_capacity(fh * fw);
    for gy in 0..fh {
        for gx in 0..fw {
            let mut patch = Vec::with_capacity(s * s);
            for py in 0..s {
                for px in 0..s {
                    patch.push(obs.at(gy * s + py, gx * s + px) / INPUT_SCALE);
                }
            }
            let mut acts = vec![patch];
            for (l, lin) in layers.iter().enumerate() {
                let mut y = lin.forward(acts.last().expect("input"));
                if l + 1 < layers.len() {
                    tanh_inplace(&mut y);
                }
                acts.push(y);
            }
            let out = match &proj {
                Some(p) => p.forward(acts.last().expect("output")),
                None => acts.last().expect("output").clone(),
            };
            let loc = gy * fw + gx;
            features.data[loc * cd..(loc + 1) * cd].copy_from_slice(&out);
            activations.push(acts);
        }
    }
    Ok(EncoderOutput { features, activations })
}

/// Backpropagates `d_features` (same layout as [`EncoderOutput::features`])
/// into encoder and projection parameter gradients.
pub fn encoder_backward(
    params: &ModelParams,
    config: &ModelConfig,
    enc: &EncoderOutput,
    d_features: &[f64],
    grads: &mut TensorMap,
) {
    let nl = n_layers(config);
    let cd = config.decoder_channels;
    let layers: Vec<Linear> = (0..nl)
        .map(|l| Linear::new(&params[&format!("encoder.{l}.w")], &params[&format!("encoder.{l}.b")]))
        .collect();
    let mut dw: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.w.len()]).collect();
    let mut db: Vec<Vec<f64>> = layers.iter().map(|l| vec![0.0; l.b.len()]).collect();
    let proj = config
        .projection
        .then(|| Linear::new(&params["proj.w"], &params["proj.b"]));
    let mut dpw = proj.map(|p| vec![0.0; p.w.len()]);
    let mut dpb = proj.map(|p| vec![0.0; p.b.len()]);
    for loc in 0..enc.activations.len() {
        let g_out = &d_features[loc * cd..(loc + 1) * cd];
        if g_out.iter().all(|&g| g == 0.0) {
            continue;
        }
        let mut g = match (&proj, &mut dpw, &mut dpb) {
            (Some(p), Some(w), Some(b)) => p.backward(enc.layer_output(loc, nl), g_out, w, b),
            _ => g_out.to_vec(),
        };
        for l in (0..nl).rev() {
            if l + 1 < nl {
                g = tanh_backward(enc.layer_output(loc, l + 1), &g);
            }
            g = layers[l].backward(enc.layer_output(loc, l), &g, &mut dw[l], &mut db[l]);
        }
    }
    for l in 0..nl {
        add_grad(
            grads,
            &format!("encoder.{l}.w"),
            &params[&format!("encoder.{l}.w")].shape,
            &dw[l],
        );
        add_grad(
            grads,
            &format!("encoder.{l}.b"),
            &params[&format!("encoder.{l}.b")].shape,
            &db[l],
        );
    }
    if let (Some(w), Some(b)) = (dpw, dpb) {
        add_grad(grads, "proj.w", &params["proj.w"].shape, &w);
        add_grad(grads, "proj.b", &params["proj.b"].shape, &b);
    }
}

pub(super) fn add_grad(grads: &mut TensorMap, name: &str, shape: &[usize], g: &[f64]) {
    let t = grads.entry(name.to_string()).or_insert_with(|| Tensor::zeros(shape));
    for (a, b) in t.data.iter_mut().zip(g) {
        *a += b;
    }
}

//! Dense `f64` tensors and the small amount of linear algebra the toy
//! networks need.

use std::collections::BTreeMap;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Tensor::zeros(&self.shape)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += scale * other`; shapes must agree.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Named tensors, ordered lexicographically by name.
pub type TensorMap = BTreeMap<String, Tensor>;

/// Accumulates `scale * src` into `dst`, inserting missing entries.
pub fn accumulate(dst: &mut TensorMap, src: &TensorMap, scale: f64) -> Result<()> {
    for (name, t) in src {
        match dst.get_mut(name) {
            Some(d) => d.add_scaled(t, scale)?,
            None => {
                let mut t = t.clone();
                t.scale(scale);
                dst.insert(name.clone(), t);
            }
        }
    }
    Ok(())
}

/// Row-major dense layer `y = W x + b` with `W` of shape `[out, in]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear<'a> {
    pub w: &'a [f64],
    pub b: &'a [f64],
    pub n_in: usize,
    pub n_out: usize,
}

impl<'a> Linear<'a> {
    pub fn new(w: &'a Tensor, b: &'a Tensor) -> Self {
        debug_assert_eq!(w.shape.len(), 2);
        Linear {
            w: &w.data,
            b: &b.data,
            n_out: w.shape[0],
            n_in: w.shape[1],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.n_in);
        let mut y = self.b.to_vec();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            *yo += dot(row, x);
        }
        y
    }

    /// Accumulates parameter gradients and returns `dL/dx`.
    pub fn backward(&self, x: &[f64], dy: &[f64], dw: &mut [f64], db: &mut [f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.n_in];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            db[o] += g;
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            let drow = &mut dw[o * self.n_in..(o + 1) * self.n_in];
            for i in 0..self.n_in {
                drow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn tanh_inplace(v: &mut [f64]) {
    v.iter_mut().for_each(|x| *x = x.tanh());
}

/// Backward through `h = tanh(a)` given the activations `h`.
pub fn tanh_backward(h: &[f64], dh: &[f64]) -> Vec<f64> {
    h.iter().zip(dh).map(|(h, g)| g * (1.0 - h * h)).collect()
}

/// Numerically stable log-softmax.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    log_softmax(z).into_iter().map(f64::exp).collect()
}

/// Index of the maximum entry; ties resolve to the lowest index.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// L2 normalisation `f / sqrt(|f|^2 + eps^2)`, smooth at the origin.
pub const NORM_EPS: f64 = 1e-12;

pub fn l2_normalize(f: &[f64]) -> (Vec<f64>, f64) {
    let r = (dot(f, f) + NORM_EPS * NORM_EPS).sqrt();
    (f.iter().map(|v| v / r).collect(), r)
}

/// Backward through [`l2_normalize`]: `dn/df = I/r - f f^T / r^3`.
pub fn l2_normalize_backward(f: &[f64], r: f64, dn: &[f64]) -> Vec<f64> {
    let proj = dot(f, dn) / (r * r * r);
    f.iter().zip(dn).map(|(fi, gi)| gi / r - fi * proj).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_round_trip() {
        let w = Tensor::from_vec(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::from_vec(&[2], vec![0.5, -0.5]).unwrap();
        let lin = Linear::new(&w, &b);
        assert_eq!(lin.forward(&[1., 0., -1.]), vec![-1.5, -2.5]);
        let mut dw = vec![0.0; 6];
        let mut db = vec![0.0; 2];
        let dx = lin.backward(&[1., 0., -1.], &[1., 2.], &mut dw, &mut db);
        assert_eq!(dx, vec![9., 12., 15.]);
        assert_eq!(dw, vec![1., 0., -1., 2., 0., -2.]);
        assert_eq!(db, vec![1., 2.]);
    }

    #[test]
    fn argmax_prefers_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn normalisation_handles_zero() {
        let (n, _) = l2_normalize(&[0.0, 0.0]);
        assert_eq!(n, vec![0.0, 0.0]);
        let (n, _) = l2_normalize(&[3.0, 4.0]);
        assert!((n[0] - 0.6).abs() < 1e-15 && (n[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn shape_checks() {
        assert!(Tensor::from_vec(&[2, 2], vec![0.0; 3]).is_err());
        let mut a = Tensor::zeros(&[2]);
        assert!(a.add_scaled(&Tensor::zeros(&[3]), 1.0).is_err());
    }
}

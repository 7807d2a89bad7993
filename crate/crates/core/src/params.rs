//! Parameter containers and the small dense layers shared by the encoder
//! and the task heads.
//!
//! Every model type implements [`Params`], which exposes its tensors in a
//! fixed order. Gradients use the same type as the parameters they belong
//! to, so optimizers and the gradient checker work on flat views.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub trait Params: Clone {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>);
    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>);

    fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::new();
        self.collect("", &mut out);
        out
    }

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    /// Overwrites every entry from `flat`, which must hold exactly
    /// [`Params::num_params`] values.
    fn assign_flat(&mut self, flat: &[f64]) {
        let mut offset = 0;
        let mut slots = Vec::new();
        self.collect_mut(&mut slots);
        for slot in slots {
            slot.copy_from_slice(&flat[offset..offset + slot.len()]);
            offset += slot.len();
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    fn map_inplace(&mut self, mut f: impl FnMut(&mut f64)) {
        let mut slots = Vec::new();
        self.collect_mut(&mut slots);
        slots.into_iter().flat_map(|s| s.iter_mut()).for_each(&mut f);
    }

    fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.map_inplace(|x| *x = 0.0);
        z
    }

    fn add_assign(&mut self, other: &Self) {
        let src = other.tensors();
        let mut slots = Vec::new();
        self.collect_mut(&mut slots);
        for (slot, t) in slots.into_iter().zip(src) {
            slot.iter_mut().zip(t.data).for_each(|(a, b)| *a += b);
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

impl Params for Array1<f64> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.as_slice().expect("parameters are contiguous"),
        });
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.as_slice_mut().expect("parameters are contiguous"));
    }
}

impl Params for Array2<f64> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        out.push(NamedTensor {
            name: prefix.to_string(),
            shape: self.shape().to_vec(),
            data: self.as_slice().expect("parameters are contiguous"),
        });
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        out.push(self.as_slice_mut().expect("parameters are contiguous"));
    }
}

impl<T: Params> Params for Vec<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        for (i, item) in self.iter().enumerate() {
            item.collect(&join(prefix, &i.to_string()), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        for item in self.iter_mut() {
            item.collect_mut(out);
        }
    }
}

pub fn uniform_matrix(rng: &mut impl Rng, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..=bound))
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    /// Uniform in `±1/sqrt(fan_in)`, zero bias.
    pub fn new(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self { weight: uniform_matrix(rng, fan_in, fan_out, bound), bias: Array1::zeros(fan_out) }
    }

    pub fn fan_out(&self) -> usize {
        self.bias.len()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    pub fn forward_vec(&self, x: ArrayView1<f64>) -> Array1<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Accumulates parameter gradients into `grad` and returns `dL/dx`.
    pub fn backward(&self, x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) -> Array2<f64> {
        grad.weight += &x.t().dot(&dy);
        grad.bias += &dy.sum_axis(Axis(0));
        dy.dot(&self.weight.t())
    }

    pub fn backward_vec(&self, x: ArrayView1<f64>, dy: ArrayView1<f64>, grad: &mut Linear) -> Array1<f64> {
        let outer = x.insert_axis(Axis(1)).dot(&dy.insert_axis(Axis(0)));
        grad.weight += &outer;
        grad.bias += &dy;
        self.weight.dot(&dy)
    }
}

impl Params for Linear {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.weight.collect(&join(prefix, "weight"), out);
        self.bias.collect(&join(prefix, "bias"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.weight.collect_mut(out);
        self.bias.collect_mut(out);
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Row-wise layer normalization with learned gain and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

pub struct LayerNormCache {
    normalized: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self { gamma: Array1::ones(dim), beta: Array1::zeros(dim) }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let d = x.ncols() as f64;
        let mut normalized = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in normalized.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / d;
            row -= mean;
            let var = row.iter().map(|v| v * v).sum::<f64>() / d;
            *s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row *= *s;
        }
        let y = &normalized * &self.gamma + &self.beta;
        (y, LayerNormCache { normalized, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: ArrayView2<f64>, grad: &mut LayerNorm) -> Array2<f64> {
        let d = dy.ncols() as f64;
        grad.gamma += &(&dy * &cache.normalized).sum_axis(Axis(0));
        grad.beta += &dy.sum_axis(Axis(0));
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (((mut out, g), xhat), &s) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.normalized.rows())
            .zip(cache.inv_std.iter())
        {
            let mean_g = g.sum() / d;
            let mean_gx = g.dot(&xhat) / d;
            out.assign(&((&g - mean_g - &(&xhat * mean_gx)) * s));
        }
        dx
    }
}

impl Params for LayerNorm {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<NamedTensor<'a>>) {
        self.gamma.collect(&join(prefix, "gamma"), out);
        self.beta.collect(&join(prefix, "beta"), out);
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [f64]>) {
        self.gamma.collect_mut(out);
        self.beta.collect_mut(out);
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Numerically stable softmax of a slice of logits.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-ln softmax(logits)[target]` computed via log-sum-exp.
pub fn cross_entropy(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

pub fn softmax_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn softmax_and_cross_entropy_agree() {
        let logits = [1.0, -2.0, 0.5];
        let p = softmax(&logits);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((cross_entropy(&logits, 2) + p[2].ln()).abs() < 1e-12);
        assert_eq!(softmax(&[0.0, 0.0]), vec![0.5, 0.5]);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let ln = LayerNorm::new(3);
        let (y, _) = ln.forward(array![[1.0, 2.0, 3.0], [10.0, -4.0, 0.5]].view());
        for row in y.rows() {
            assert!(row.sum().abs() < 1e-9);
        }
    }

    #[test]
    fn flatten_round_trips_through_assign() {
        let mut rng = rand::thread_rng();
        let lin = Linear::new(&mut rng, 3, 2);
        let mut other = lin.zeros_like();
        other.assign_flat(&lin.flatten());
        assert_eq!(other, lin);
        let names: Vec<String> = lin.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names, vec!["weight", "bias"]);
    }
}

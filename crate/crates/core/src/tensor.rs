//! Dense tensors, explicit per-layer backward functions, and the Adam
//! optimizer with cosine decay and decoupled weight decay.
//!
//! Training math is all f64; persisted feature payloads are f32. There is
//! no gradient tape: every layer exposes a forward and a matching backward
//! so each gradient path can be checked against finite differences in
//! isolation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Shape-tagged dense array of f64 values in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row count of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Column count of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn ensure_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    /// Values cast to IEEE 754 single precision, the on-disk feature format.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }
}

/// Integer-valued tensor holding quantized bottleneck symbols.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Vec<usize>,
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f64).collect(),
        }
    }
}

/// One named parameter: value plus a gradient slot of identical shape.
#[derive(Debug, Clone)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter collection. Iteration order is the sorted name order so
/// that optimizer sweeps and checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: BTreeMap<String, Param>,
    step: u64,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = Tensor::zeros(value.shape.clone());
        self.entries.insert(name.to_string(), Param { value, grad });
    }

    pub fn get(&self, name: &str) -> &Param {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
    }

    pub fn value(&self, name: &str) -> &Tensor {
        &self.get(name).value
    }

    pub fn entry_value_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"))
            .value
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn accumulate_grad(&mut self, name: &str, delta: &[f64]) {
        let p = self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        assert_eq!(p.grad.data.len(), delta.len(), "gradient size for {name}");
        for (g, d) in p.grad.data.iter_mut().zip(delta) {
            *g += d;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data.fill(0.0);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }
}

/// out[b,o] = sum_i input[b,i] * weights[i,o] + bias[o]
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if input.shape.len() != 2 || weights.shape.len() != 2 || bias.shape.len() != 1 {
        return Err(Error::ShapeMismatch("dense expects [BxI], [IxO], [O]".into()));
    }
    let (b, i) = (input.rows(), input.cols());
    let (wi, o) = (weights.rows(), weights.cols());
    if i != wi || bias.numel() != o {
        return Err(Error::ShapeMismatch(format!(
            "dense: input [{b}x{i}] vs weights [{wi}x{o}] vs bias [{}]",
            bias.numel()
        )));
    }
    let mut out = vec![0.0; b * o];
    for r in 0..b {
        let row = &input.data[r * i..(r + 1) * i];
        let dst = &mut out[r * o..(r + 1) * o];
        dst.copy_from_slice(&bias.data);
        for (k, &x) in row.iter().enumerate() {
            let wrow = &weights.data[k * o..(k + 1) * o];
            for (d, &w) in dst.iter_mut().zip(wrow) {
                *d += x * w;
            }
        }
    }
    Tensor::new(vec![b, o], out)
}

/// Backward of `dense_forward`. Returns (grad_input, grad_weights, grad_bias).
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (b, i) = (input.rows(), input.cols());
    let o = weights.cols();
    debug_assert_eq!(grad_out.shape, vec![b, o]);
    let mut gin = vec![0.0; b * i];
    let mut gw = vec![0.0; i * o];
    let mut gb = vec![0.0; o];
    for r in 0..b {
        let go = &grad_out.data[r * o..(r + 1) * o];
        let row = &input.data[r * i..(r + 1) * i];
        for (c, &g) in go.iter().enumerate() {
            gb[c] += g;
        }
        for k in 0..i {
            let wrow = &weights.data[k * o..(k + 1) * o];
            let mut acc = 0.0;
            for (c, &g) in go.iter().enumerate() {
                acc += g * wrow[c];
                gw[k * o + c] += row[k] * g;
            }
            gin[r * i + k] = acc;
        }
    }
    (
        Tensor { shape: vec![b, i], data: gin },
        Tensor { shape: vec![i, o], data: gw },
        Tensor { shape: vec![o], data: gb },
    )
}

/// Elementwise max(0, x).
pub fn relu(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Backward of relu: passes gradient where the pre-activation is > 0.
/// The subgradient at exactly 0 is 0.
pub fn relu_backward(pre_activation: &Tensor, grad_out: &Tensor) -> Tensor {
    debug_assert_eq!(pre_activation.shape, grad_out.shape);
    Tensor {
        shape: grad_out.shape.clone(),
        data: pre_activation
            .data
            .iter()
            .zip(&grad_out.data)
            .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

/// Mean cross entropy over the batch plus its gradient w.r.t. the logits:
/// grad = (softmax - onehot) / B.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let (b, c) = (logits.rows(), logits.cols());
    if labels.len() != b {
        return Err(Error::ShapeMismatch(format!(
            "{} labels for batch of {b}",
            labels.len()
        )));
    }
    let mut grad = vec![0.0; b * c];
    let mut loss = 0.0;
    for r in 0..b {
        let label = labels[r];
        if label >= c {
            return Err(Error::LabelOutOfRange { label, classes: c });
        }
        let row = &logits.data[r * c..(r + 1) * c];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for &v in row {
            denom += (v - max).exp();
        }
        let log_denom = denom.ln() + max;
        loss += log_denom - row[label];
        let g = &mut grad[r * c..(r + 1) * c];
        for (j, &v) in row.iter().enumerate() {
            g[j] = (v - max).exp() / denom / b as f64;
        }
        g[label] -= 1.0 / b as f64;
    }
    Ok((loss / b as f64, Tensor { shape: vec![b, c], data: grad }))
}

/// First/second moment accumulators for Adam, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            eps,
            moments: BTreeMap::new(),
        }
    }
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState::new(0.9, 0.999, 1e-8)
    }
}

/// One Adam update with bias correction over every parameter in the set.
/// Increments the step counter by exactly 1.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) {
    let t = params.step + 1;
    let bc1 = 1.0 - state.beta1.powi(t as i32);
    let bc2 = 1.0 - state.beta2.powi(t as i32);
    for (name, p) in params.entries.iter_mut() {
        let (m, v) = state
            .moments
            .entry(name.clone())
            .or_insert_with(|| (vec![0.0; p.grad.numel()], vec![0.0; p.grad.numel()]));
        for ((pv, &g), (mi, vi)) in p
            .value
            .data
            .iter_mut()
            .zip(&p.grad.data)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *mi = state.beta1 * *mi + (1.0 - state.beta1) * g;
            *vi = state.beta2 * *vi + (1.0 - state.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *pv -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    params.step = t;
}

/// lr0 * 0.5 * (1 + cos(pi * step / total_steps))
pub fn cosine_decay_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::StepOutOfRange { step, total: total_steps });
    }
    let frac = step as f64 / total_steps as f64;
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Adds `coefficient * value` to the gradient of every parameter whose name
/// does not start with `exclude_prefix`. The density parameters are excluded
/// by passing their name prefix.
pub fn apply_weight_decay(params: &mut ParamSet, coefficient: f64, exclude_prefix: &str) {
    if coefficient == 0.0 {
        return;
    }
    for (name, p) in params.entries.iter_mut() {
        if !exclude_prefix.is_empty() && name.starts_with(exclude_prefix) {
            continue;
        }
        for (g, &v) in p.grad.data.iter_mut().zip(&p.value.data) {
            *g += coefficient * v;
        }
    }
}

//! Per-channel learnable density over quantized bottleneck values.
//!
//! Each channel gets an independent univariate CDF built from a tiny
//! monotone network: four layers of widths (1, r, r, r, 1) with
//! `f_k(x) = g_k(H_k x + b_k)` and `g_k(x) = x + a_k * tanh(x)` on the
//! hidden layers, a plain affine map on the last, and a final sigmoid.
//! `H_k = softplus(raw)` keeps every weight positive and `a_k = tanh(raw)`
//! keeps |a_k| < 1, so the CDF is monotone for any parameter setting.
//!
//! During training the model supplies differentiable code lengths for
//! noise-relaxed values; after training it supplies exact integer-bin
//! probabilities for freezing into coder tables.

use crate::error::Result;
use crate::tensor::{IntTensor, ParamSet, Tensor};

/// Number of layers in the per-channel CDF network.
const LAYERS: usize = 4;

/// Probability floor: keeps -log2(p) finite for far-tail values. Below
/// table precision (2^-16) so it never distorts coding.
pub const PMF_FLOOR: f64 = 1e-9;

const CDF_MIN: f64 = 1e-300;
const CDF_MAX: f64 = 1.0 - f64::EPSILON / 2.0;

/// Bit totals for a batch: one entry per bottleneck channel.
#[derive(Debug, Clone)]
pub struct RateReport {
    pub total_bits: f64,
    pub per_channel_bits: Vec<f64>,
}

impl RateReport {
    fn from_channels(per_channel_bits: Vec<f64>) -> Self {
        let total_bits = per_channel_bits.iter().sum();
        RateReport { total_bits, per_channel_bits }
    }

    /// Mean per-example report for a batch of the given size.
    pub fn per_example(&self, batch: usize) -> RateReport {
        let scale = 1.0 / batch as f64;
        RateReport::from_channels(
            self.per_channel_bits.iter().map(|b| b * scale).collect(),
        )
    }
}

/// Descriptor for the factorized density. The parameters themselves live in
/// a [`ParamSet`] under the "density/" prefix so they are trained and
/// checkpointed alongside the network weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorizedDensity {
    channels: usize,
    hidden: usize,
}

pub const PARAM_PREFIX: &str = "density/";

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn softplus_inv(y: f64) -> f64 {
    y.exp_m1().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl FactorizedDensity {
    pub fn new(channels: usize, hidden: usize) -> Self {
        assert!(channels > 0 && hidden > 0);
        FactorizedDensity { channels, hidden }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Layer input/output widths: (1, r, r, r, 1).
    fn dims(&self) -> [usize; LAYERS + 1] {
        [1, self.hidden, self.hidden, self.hidden, 1]
    }

    fn h_name(k: usize) -> String {
        format!("{PARAM_PREFIX}h{k}")
    }

    fn b_name(k: usize) -> String {
        format!("{PARAM_PREFIX}b{k}")
    }

    fn a_name(k: usize) -> String {
        format!("{PARAM_PREFIX}a{k}")
    }

    /// Register freshly initialized parameters. The init is symmetric around
    /// zero (biases and curvatures at 0) with the weight magnitudes chosen so
    /// the initial CDF is close to a unit-scale logistic.
    pub fn init_params(&self, params: &mut ParamSet) {
        self.init_params_with_gain(params, 1.0);
    }

    /// Like [`init_params`](Self::init_params) but with the end-to-end linear
    /// gain of the fresh network set to `gain` instead of 1.
    pub fn init_params_with_gain(&self, params: &mut ParamSet, gain: f64) {
        let dims = self.dims();
        let c = self.channels;
        // r * h^4 == gain  =>  h = (gain / r)^(1/4)
        let h_eff = (gain / self.hidden as f64).powf(0.25);
        let raw_diag = softplus_inv(h_eff);
        let raw_off = softplus_inv(1e-6);
        for k in 0..LAYERS {
            let (din, dout) = (dims[k], dims[k + 1]);
            let mut h = vec![0.0; c * dout * din];
            for ch in 0..c {
                for i in 0..dout {
                    for j in 0..din {
                        let diagonal_like = din == 1 || dout == 1 || i == j;
                        h[ch * dout * din + i * din + j] =
                            if diagonal_like { raw_diag } else { raw_off };
                    }
                }
            }
            params.insert(&Self::h_name(k), Tensor::new(vec![c, dout, din], h).unwrap());
            params.insert(&Self::b_name(k), Tensor::zeros(vec![c, dout]));
            if k < LAYERS - 1 {
                params.insert(&Self::a_name(k), Tensor::zeros(vec![c, dout]));
            }
        }
    }

    /// Names of all raw parameter tensors, in layer order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for k in 0..LAYERS {
            names.push(Self::h_name(k));
            names.push(Self::b_name(k));
            if k < LAYERS - 1 {
                names.push(Self::a_name(k));
            }
        }
        names
    }

    /// Reconstruct the descriptor from checkpointed parameters, if present.
    pub fn from_params(params: &ParamSet) -> Option<Self> {
        if !params.contains(&Self::h_name(0)) {
            return None;
        }
        let shape = params.value(&Self::h_name(0)).shape().to_vec();
        Some(FactorizedDensity { channels: shape[0], hidden: shape[1] })
    }

    pub(crate) fn view<'a>(&self, params: &'a ParamSet) -> DensityView<'a> {
        DensityView::new(self, params)
    }

    /// CDF of one channel at a real point, strictly inside (0, 1).
    pub fn cdf(&self, params: &ParamSet, channel: usize, x: f64) -> f64 {
        assert!(channel < self.channels, "channel {channel} out of range");
        let view = self.view(params);
        let mut scratch = EvalScratch::new(self.hidden);
        view.forward(channel, x, &mut scratch)
    }

    /// Probability that the quantized value of this channel equals `n`:
    /// max(cdf(n + 1/2) - cdf(n - 1/2), floor).
    pub fn pmf_integer(&self, params: &ParamSet, channel: usize, n: i64) -> f64 {
        let view = self.view(params);
        let mut scratch = EvalScratch::new(self.hidden);
        view.pmf_integer(channel, n, &mut scratch)
    }

    /// Differentiable code length of noise-relaxed values `z_noisy = z + u`.
    /// Returns the bit totals, the gradient w.r.t. `z_noisy`, and the
    /// gradients w.r.t. the raw density parameters.
    pub fn rate_bits_noisy(
        &self,
        params: &ParamSet,
        z_noisy: &Tensor,
    ) -> Result<(RateReport, Tensor, DensityGrads)> {
        let view = self.view(params);
        let (batch, channels) = (z_noisy.rows(), z_noisy.cols());
        assert_eq!(channels, self.channels, "channel count mismatch");
        z_noisy.ensure_finite("rate_bits_noisy input")?;
        let mut per_channel = vec![0.0; channels];
        let mut dz = Tensor::zeros(vec![batch, channels]);
        let mut grads = DensityGrads::zeros(self);
        let mut s_hi = EvalScratch::new(self.hidden);
        let mut s_lo = EvalScratch::new(self.hidden);
        let ln2 = std::f64::consts::LN_2;
        for b in 0..batch {
            for c in 0..channels {
                let x = z_noisy.at2(b, c);
                let c_hi = view.forward(c, x + 0.5, &mut s_hi);
                let c_lo = view.forward(c, x - 0.5, &mut s_lo);
                let p_raw = c_hi - c_lo;
                let p = p_raw.max(PMF_FLOOR);
                per_channel[c] += -(p.ln()) / ln2;
                if p_raw > PMF_FLOOR {
                    let up = -1.0 / (p * ln2);
                    // d bits / d cdf_hi = up, d bits / d cdf_lo = -up
                    let dx_hi = view.backward(c, up, &s_hi, &mut grads);
                    let dx_lo = view.backward(c, -up, &s_lo, &mut grads);
                    dz.data_mut()[b * channels + c] = dx_hi + dx_lo;
                }
            }
        }
        Ok((RateReport::from_channels(per_channel), dz, grads))
    }

    /// Exact code length of integer symbols under the model.
    pub fn rate_bits_discrete(&self, params: &ParamSet, z_hat: &IntTensor) -> RateReport {
        let view = self.view(params);
        let channels = self.channels;
        assert_eq!(z_hat.shape.last(), Some(&channels), "channel count mismatch");
        let mut per_channel = vec![0.0; channels];
        let mut scratch = EvalScratch::new(self.hidden);
        let ln2 = std::f64::consts::LN_2;
        for (i, &n) in z_hat.data.iter().enumerate() {
            let c = i % channels;
            let p = view.pmf_integer(c, n as i64, &mut scratch);
            per_channel[c] += -(p.ln()) / ln2;
        }
        RateReport::from_channels(per_channel)
    }

    /// Accumulate `scale * grads` into the parameter gradient slots.
    pub fn apply_grads(&self, params: &mut ParamSet, grads: &DensityGrads, scale: f64) {
        for k in 0..LAYERS {
            accumulate_scaled(params, &Self::h_name(k), &grads.h[k], scale);
            accumulate_scaled(params, &Self::b_name(k), &grads.b[k], scale);
            if k < LAYERS - 1 {
                accumulate_scaled(params, &Self::a_name(k), &grads.a[k], scale);
            }
        }
    }
}

fn accumulate_scaled(params: &mut ParamSet, name: &str, delta: &[f64], scale: f64) {
    if scale == 1.0 {
        params.accumulate_grad(name, delta);
    } else {
        let scaled: Vec<f64> = delta.iter().map(|d| d * scale).collect();
        params.accumulate_grad(name, &scaled);
    }
}

/// Gradients w.r.t. the raw density parameters, same layout as the tensors.
#[derive(Debug, Clone)]
pub struct DensityGrads {
    pub h: [Vec<f64>; LAYERS],
    pub b: [Vec<f64>; LAYERS],
    pub a: [Vec<f64>; LAYERS - 1],
}

impl DensityGrads {
    pub fn zeros(density: &FactorizedDensity) -> Self {
        let dims = density.dims();
        let c = density.channels;
        let h = std::array::from_fn(|k| vec![0.0; c * dims[k + 1] * dims[k]]);
        let b = std::array::from_fn(|k| vec![0.0; c * dims[k + 1]]);
        let a = std::array::from_fn(|k| vec![0.0; c * dims[k + 1]]);
        DensityGrads { h, b, a }
    }

    /// Gradient slice for a parameter tensor name.
    pub fn lookup(&self, density: &FactorizedDensity, name: &str) -> &[f64] {
        for k in 0..LAYERS {
            if name == FactorizedDensity::h_name(k) {
                return &self.h[k];
            }
            if name == FactorizedDensity::b_name(k) {
                return &self.b[k];
            }
            if k < LAYERS - 1 && name == FactorizedDensity::a_name(k) {
                return &self.a[k];
            }
        }
        let _ = density;
        panic!("unknown density parameter {name:?}")
    }
}

/// Effective (reparameterized) weights plus chain factors for one ParamSet,
/// borrowed for the duration of a batch.
pub(crate) struct DensityView<'a> {
    channels: usize,
    r: usize,
    h: [Vec<f64>; LAYERS],
    dh: [Vec<f64>; LAYERS],
    b: [&'a [f64]; LAYERS],
    a: [Vec<f64>; LAYERS - 1],
    da: [Vec<f64>; LAYERS - 1],
}

impl<'a> DensityView<'a> {
    fn new(density: &FactorizedDensity, params: &'a ParamSet) -> Self {
        let mut h: [Vec<f64>; LAYERS] = Default::default();
        let mut dh: [Vec<f64>; LAYERS] = Default::default();
        let mut b: [&[f64]; LAYERS] = [&[]; LAYERS];
        let mut a: [Vec<f64>; LAYERS - 1] = Default::default();
        let mut da: [Vec<f64>; LAYERS - 1] = Default::default();
        for k in 0..LAYERS {
            let raw = params.value(&FactorizedDensity::h_name(k)).data();
            h[k] = raw.iter().map(|&v| softplus(v)).collect();
            dh[k] = raw.iter().map(|&v| sigmoid(v)).collect();
            b[k] = params.value(&FactorizedDensity::b_name(k)).data();
            if k < LAYERS - 1 {
                let raw_a = params.value(&FactorizedDensity::a_name(k)).data();
                a[k] = raw_a.iter().map(|&v| v.tanh()).collect();
                da[k] = a[k].iter().map(|&t| 1.0 - t * t).collect();
            }
        }
        DensityView { channels: density.channels, r: density.hidden, h, dh, b, a, da }
    }

    /// CDF forward pass for one channel, caching intermediates in `scratch`.
    fn forward(&self, c: usize, x: f64, s: &mut EvalScratch) -> f64 {
        let r = self.r;
        s.x = x;
        // layer 0: 1 -> r
        for i in 0..r {
            let u = self.h[0][c * r + i] * x + self.b[0][c * r + i];
            s.u[0][i] = u;
            s.t[0][i] = u.tanh();
            s.v[0][i] = u + self.a[0][c * r + i] * s.t[0][i];
        }
        // layers 1, 2: r -> r
        for k in 1..LAYERS - 1 {
            for i in 0..r {
                let mut u = self.b[k][c * r + i];
                for j in 0..r {
                    u += self.h[k][c * r * r + i * r + j] * s.v[k - 1][j];
                }
                s.u[k][i] = u;
                s.t[k][i] = u.tanh();
                s.v[k][i] = u + self.a[k][c * r + i] * s.t[k][i];
            }
        }
        // layer 3: r -> 1, then sigmoid
        let mut t = self.b[LAYERS - 1][c];
        for j in 0..r {
            t += self.h[LAYERS - 1][c * r + j] * s.v[LAYERS - 2][j];
        }
        s.logit = t;
        sigmoid(t).clamp(CDF_MIN, CDF_MAX)
    }

    /// Reverse pass for the most recent forward of channel `c` in `scratch`.
    /// `up` is d(loss)/d(cdf). Accumulates parameter gradients and returns
    /// d(loss)/d(x).
    fn backward(&self, c: usize, up: f64, s: &EvalScratch, g: &mut DensityGrads) -> f64 {
        let r = self.r;
        let sig = sigmoid(s.logit).clamp(CDF_MIN, CDF_MAX);
        let dt = up * sig * (1.0 - sig);
        // layer 3
        let mut dv = vec![0.0; r];
        g.b[LAYERS - 1][c] += dt;
        for j in 0..r {
            let idx = c * r + j;
            g.h[LAYERS - 1][idx] += dt * s.v[LAYERS - 2][j] * self.dh[LAYERS - 1][idx];
            dv[j] = dt * self.h[LAYERS - 1][idx];
        }
        // layers 2, 1
        for k in (1..LAYERS - 1).rev() {
            let mut du = vec![0.0; r];
            for i in 0..r {
                let idx = c * r + i;
                let th = s.t[k][i];
                g.a[k][idx] += dv[i] * th * self.da[k][idx];
                du[i] = dv[i] * (1.0 + self.a[k][idx] * (1.0 - th * th));
                g.b[k][idx] += du[i];
            }
            let mut dprev = vec![0.0; r];
            for i in 0..r {
                let row_base = c * r * r + i * r;
                for j in 0..r {
                    g.h[k][row_base + j] += du[i] * s.v[k - 1][j] * self.dh[k][row_base + j];
                    dprev[j] += du[i] * self.h[k][row_base + j];
                }
            }
            dv = dprev;
        }
        // layer 0
        let mut dx = 0.0;
        for i in 0..r {
            let idx = c * r + i;
            let th = s.t[0][i];
            g.a[0][idx] += dv[i] * th * self.da[0][idx];
            let du = dv[i] * (1.0 + self.a[0][idx] * (1.0 - th * th));
            g.b[0][idx] += du;
            g.h[0][idx] += du * s.x * self.dh[0][idx];
            dx += du * self.h[0][idx];
        }
        dx
    }

    pub(crate) fn pmf_integer(&self, c: usize, n: i64, s: &mut EvalScratch) -> f64 {
        let hi = self.forward(c, n as f64 + 0.5, s);
        let lo = self.forward(c, n as f64 - 0.5, s);
        (hi - lo).max(PMF_FLOOR)
    }

    pub(crate) fn cdf_at(&self, c: usize, x: f64, s: &mut EvalScratch) -> f64 {
        self.forward(c, x, s)
    }
}

/// Reusable per-evaluation cache of layer intermediates.
pub(crate) struct EvalScratch {
    x: f64,
    logit: f64,
    u: [Vec<f64>; LAYERS - 1],
    t: [Vec<f64>; LAYERS - 1],
    v: [Vec<f64>; LAYERS - 1],
}

impl EvalScratch {
    pub(crate) fn new(r: usize) -> Self {
        EvalScratch {
            x: 0.0,
            logit: 0.0,
            u: std::array::from_fn(|_| vec![0.0; r]),
            t: std::array::from_fn(|_| vec![0.0; r]),
            v: std::array::from_fn(|_| vec![0.0; r]),
        }
    }

}

//! Dense-layer math, the two distillation loss terms, plain SGD with step
//! decay, and a central-difference gradient checker.

use rand::Rng;

use crate::error::{check_dims, Error, Result};

/// `sign` with `sign(0) = +1`, the convention used everywhere in the crate.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// A fully connected layer `y = W'x + b`, where `W' = sign(W)` when the layer
/// is binarized. `weights` is row-major, `out_dim x in_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    pub binarized: bool,
}

/// Gradient buffers shaped like a [`DenseLayer`].
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrads {
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseGrads {
    pub fn zero(&mut self) {
        self.weights.fill(0.0);
        self.bias.fill(0.0);
    }
}

impl DenseLayer {
    /// Uniform init in `[-1/sqrt(in_dim), 1/sqrt(in_dim)]`; biases start at 0.
    pub fn new<R: Rng + ?Sized>(
        in_dim: usize,
        out_dim: usize,
        with_bias: bool,
        binarized: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid(format!(
                "layer dims must be positive, got {in_dim}x{out_dim}"
            )));
        }
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = (0..in_dim * out_dim)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias: with_bias.then(|| vec![0.0; out_dim]),
            binarized,
        })
    }

    pub fn from_parts(
        in_dim: usize,
        out_dim: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
        binarized: bool,
    ) -> Result<Self> {
        check_dims(in_dim * out_dim, weights.len())?;
        if let Some(b) = &bias {
            check_dims(out_dim, b.len())?;
        }
        if weights.iter().chain(bias.iter().flatten()).any(|w| !w.is_finite()) {
            return Err(Error::Numeric("non-finite layer parameter".into()));
        }
        Ok(Self {
            in_dim,
            out_dim,
            weights,
            bias,
            binarized,
        })
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.as_ref().map_or(0, Vec::len)
    }

    pub fn zero_grads(&self) -> DenseGrads {
        DenseGrads {
            weights: vec![0.0; self.weights.len()],
            bias: vec![0.0; self.bias.as_ref().map_or(0, Vec::len)],
        }
    }

    #[inline]
    fn effective(&self, w: f64) -> f64 {
        if self.binarized {
            sign(w)
        } else {
            w
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.in_dim, x.len())?;
        let mut out = vec![0.0; self.out_dim];
        self.forward_into(x, &mut out);
        Ok(out)
    }

    /// Unchecked forward used on hot paths; `x` and `out` must be sized.
    pub fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for (o, row) in out.iter_mut().zip(self.weights.chunks_exact(self.in_dim)) {
            *o = if self.binarized {
                row.iter().zip(x).map(|(w, xi)| sign(*w) * xi).sum()
            } else {
                row.iter().zip(x).map(|(w, xi)| w * xi).sum()
            };
        }
        if let Some(b) = &self.bias {
            for (o, bi) in out.iter_mut().zip(b) {
                *o += bi;
            }
        }
    }

    /// Accumulates parameter gradients for one sample into `grads` and, when
    /// `grad_in` is given, writes the gradient with respect to the input.
    /// Binarized weights use the hard-tanh straight-through estimator: the
    /// shadow weight receives the gradient only while `|w| <= clip`.
    pub fn backward(
        &self,
        x: &[f64],
        grad_out: &[f64],
        grads: &mut DenseGrads,
        grad_in: Option<&mut [f64]>,
        clip: f64,
    ) {
        for ((g, row), grow) in grad_out
            .iter()
            .zip(self.weights.chunks_exact(self.in_dim))
            .zip(grads.weights.chunks_exact_mut(self.in_dim))
        {
            if *g == 0.0 {
                continue;
            }
            if self.binarized {
                for ((gw, w), xi) in grow.iter_mut().zip(row).zip(x) {
                    if w.abs() <= clip {
                        *gw += g * xi;
                    }
                }
            } else {
                for (gw, xi) in grow.iter_mut().zip(x) {
                    *gw += g * xi;
                }
            }
        }
        if self.bias.is_some() {
            for (gb, g) in grads.bias.iter_mut().zip(grad_out) {
                *gb += g;
            }
        }
        if let Some(gi) = grad_in {
            gi.fill(0.0);
            for (g, row) in grad_out.iter().zip(self.weights.chunks_exact(self.in_dim)) {
                for (gx, w) in gi.iter_mut().zip(row) {
                    *gx += g * self.effective(*w);
                }
            }
        }
    }

    pub fn apply_sgd(&mut self, grads: &DenseGrads, lr: f64) -> Result<()> {
        sgd_step(&mut self.weights, &grads.weights, lr)?;
        if let Some(b) = &mut self.bias {
            sgd_step(b, &grads.bias, lr)?;
        }
        Ok(())
    }
}

pub fn dense_forward(x: &[f64], layer: &DenseLayer) -> Result<Vec<f64>> {
    layer.forward(x)
}

/// Hard-tanh straight-through estimator for `sign`.
pub fn sign_ste_backward(upstream: &[f64], preactivation: &[f64], clip: f64) -> Result<Vec<f64>> {
    check_dims(upstream.len(), preactivation.len())?;
    Ok(upstream
        .iter()
        .zip(preactivation)
        .map(|(g, p)| if p.abs() <= clip { *g } else { 0.0 })
        .collect())
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = max_of(z);
    let exps: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = max_of(z);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Cross-entropy against a hard label: `-log softmax(z)[label]` and its
/// gradient `softmax(z) - onehot(label)`.
pub fn nll_loss(z: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= z.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: z.len(),
        });
    }
    let loss = -log_softmax(z)[label];
    let mut grad = softmax(z);
    grad[label] -= 1.0;
    Ok((loss, grad))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// `KL(softmax(z_t / tau) || softmax(z_s / tau))` without the `tau^2` factor.
pub fn kd_divergence(z_s: &[f64], z_t: &[f64], tau: f64) -> Result<f64> {
    check_dims(z_s.len(), z_t.len())?;
    check_tau(tau)?;
    let scaled_s: Vec<f64> = z_s.iter().map(|v| v / tau).collect();
    let scaled_t: Vec<f64> = z_t.iter().map(|v| v / tau).collect();
    let log_s = log_softmax(&scaled_s);
    let log_t = log_softmax(&scaled_t);
    let kl = log_t
        .iter()
        .zip(&log_s)
        .map(|(lt, ls)| {
            let pt = lt.exp();
            if pt == 0.0 {
                0.0
            } else {
                pt * (lt - ls)
            }
        })
        .sum::<f64>();
    Ok(kl.max(0.0))
}

/// Softened distillation term `tau^2 * KL(p_t || p_s)` with gradient
/// `tau * (p_s - p_t)` with respect to the student logits.
pub fn kd_loss(z_s: &[f64], z_t: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    let kl = kd_divergence(z_s, z_t, tau)?;
    let scaled_s: Vec<f64> = z_s.iter().map(|v| v / tau).collect();
    let scaled_t: Vec<f64> = z_t.iter().map(|v| v / tau).collect();
    let ps = softmax(&scaled_s);
    let pt = softmax(&scaled_t);
    let grad = ps.iter().zip(&pt).map(|(s, t)| tau * (s - t)).collect();
    Ok((tau * tau * kl, grad))
}

/// Weight `alpha` on the distillation term and temperature `tau`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistillConfig {
    pub alpha: f64,
    pub temperature: f64,
}

impl DistillConfig {
    pub fn new(alpha: f64, temperature: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0, 1], got {alpha}")));
        }
        check_tau(temperature)?;
        Ok(Self { alpha, temperature })
    }
}

/// Value and gradient of one sample's combined objective, with the raw
/// (unweighted) component values kept for logging and for the
/// parameterized-alpha update.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTerms {
    pub loss: f64,
    pub kd: f64,
    pub nll: f64,
    pub grad: Vec<f64>,
}

/// `alpha * L_KD(z_s, z_t) + (1 - alpha) * L_NLL(z_s, y)`.
pub fn combined_loss(z_s: &[f64], z_t: &[f64], label: usize, cfg: &DistillConfig) -> Result<LossTerms> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(Error::invalid(format!(
            "alpha must lie in [0, 1], got {}",
            cfg.alpha
        )));
    }
    let (kd, g_kd) = kd_loss(z_s, z_t, cfg.temperature)?;
    let (nll, g_nll) = nll_loss(z_s, label)?;
    let a = cfg.alpha;
    let b = 1.0 - a;
    Ok(LossTerms {
        loss: a * kd + b * nll,
        kd,
        nll,
        grad: g_kd.iter().zip(&g_nll).map(|(k, n)| a * k + b * n).collect(),
    })
}

/// `p <- p - lr * g`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    check_dims(params.len(), grads.len())?;
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be finite and >= 0, got {lr}")));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Step-decay learning-rate policy: `base * factor^floor(epoch / step)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDecay {
    pub base_lr: f64,
    pub factor: f64,
    pub step_size: usize,
}

impl StepDecay {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.base_lr * self.factor.powi((epoch / self.step_size.max(1)) as i32)
    }
}

/// Central-difference check over every coordinate of `params`.
pub fn finite_diff_check<F>(loss_fn: F, params: &[f64], epsilon: f64) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    finite_diff_check_sampled(loss_fn, params, epsilon, params.len())
}

/// Like [`finite_diff_check`] but only probes up to `max_coords`
/// evenly strided coordinates. Returns the max of
/// `|g_fd - g| / max(1e-8, |g_fd| + |g|)`.
pub fn finite_diff_check_sampled<F>(mut loss_fn: F, params: &[f64], epsilon: f64, max_coords: usize) -> f64
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = loss_fn(params);
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let stride = params.len().div_ceil(max_coords.max(1)).max(1);
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in (0..params.len()).step_by(stride) {
        let orig = probe[i];
        probe[i] = orig + epsilon;
        let up = loss_fn(&probe).0;
        probe[i] = orig - epsilon;
        let down = loss_fn(&probe).0;
        probe[i] = orig;
        let fd = (up - down) / (2.0 * epsilon);
        let err = (fd - analytic[i]).abs() / (fd.abs() + analytic[i].abs()).max(1e-8);
        worst = worst.max(err);
    }
    worst
}

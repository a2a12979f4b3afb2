//! The low-dimensional computing (LDC) student.
//!
//! A sample of `N` quantized features is encoded as
//! `sign(sum_j F_j * tile(V(x_j)))`, where `F_j` is a trained bipolar feature
//! vector of dimension `D_f` and `V(level)` is the `D_v`-dimensional output of a
//! small shared ValueBox network, repeated `D_f / D_v` times. Classification
//! is the nearest class vector in Hamming distance.
//!
//! [`LdcModel`] is the trainable form: real-valued shadow weights, binarized
//! on the forward pass with a hard-tanh straight-through estimator. The class
//! layer stays real-valued during training and is binarized on export.
//! [`PackedLdcModel`] is the frozen bit-packed form used for inference.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::error::{check_dims, Error, Result};
use crate::nn::{sign, DenseGrads, DenseLayer};
use crate::vsa::{nearest_class, read_u32, ClassBook, Hypervector, WORD_BITS};

pub const MODEL_MAGIC: &[u8; 4] = b"LDC1";
/// Magic plus the five u32 shape fields.
pub const MODEL_HEADER_BYTES: usize = 4 + 5 * 4;

/// Shape of an LDC classifier. This is exactly what the model file stores.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LdcShape {
    pub num_features: usize,
    pub num_levels: usize,
    pub feature_dim: usize,
    pub value_dim: usize,
    pub num_classes: usize,
}

impl LdcShape {
    pub fn validate(&self) -> Result<()> {
        let LdcShape {
            num_features,
            num_levels,
            feature_dim,
            value_dim,
            num_classes,
        } = *self;
        if num_features == 0 || feature_dim == 0 || value_dim == 0 {
            return Err(Error::invalid("LDC dimensions must be positive"));
        }
        if num_levels < 2 {
            return Err(Error::invalid(format!("need at least 2 levels, got {num_levels}")));
        }
        if num_classes < 2 {
            return Err(Error::invalid(format!("need at least 2 classes, got {num_classes}")));
        }
        if feature_dim % value_dim != 0 {
            return Err(Error::invalid(format!(
                "feature dim {feature_dim} must be a multiple of value dim {value_dim}"
            )));
        }
        Ok(())
    }

    /// Parameter bits of the packed model: `N*D_f + M*D_v + C*D_f`.
    pub fn payload_bits(&self) -> usize {
        self.num_features * self.feature_dim
            + self.num_levels * self.value_dim
            + self.num_classes * self.feature_dim
    }

    /// Exact length of the serialized model file.
    pub fn file_len(&self) -> usize {
        MODEL_HEADER_BYTES
            + (self.num_features + self.num_classes) * Hypervector::encoded_len(self.feature_dim)
            + self.num_levels * Hypervector::encoded_len(self.value_dim)
    }
}

/// Trainable-model configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct LdcConfig {
    pub shape: LdcShape,
    pub valuebox_hidden: usize,
    /// Factor on the class-layer dot products, so the logits live on a
    /// range comparable to a float teacher's.
    pub logit_scale: f64,
    /// Train the factor in log space instead of keeping it fixed.
    pub learn_scale: bool,
    /// Scale on the bundle accumulator before the sign STE; `None` means `1/sqrt(N)`.
    pub accumulator_scale: Option<f64>,
    /// Hard-tanh STE band for binarized weights and activations.
    pub ste_clip: f64,
    /// Half-width of the uniform init of the feature shadow weights.
    pub feature_init: f64,
    /// Train the class layer through `sign`, so the training form predicts
    /// exactly like the exported Hamming classifier.
    pub binary_class: bool,
}

impl LdcConfig {
    pub fn new(shape: LdcShape) -> Self {
        Self {
            shape,
            valuebox_hidden: 8,
            logit_scale: 0.25,
            learn_scale: false,
            accumulator_scale: None,
            ste_clip: 1.0,
            feature_init: 0.05,
            binary_class: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if self.valuebox_hidden == 0 {
            return Err(Error::invalid("valuebox hidden width must be positive"));
        }
        for (name, v) in [
            ("logit_scale", self.logit_scale),
            ("ste_clip", self.ste_clip),
            ("feature_init", self.feature_init),
            ("accumulator_scale", self.accumulator_scale.unwrap_or(1.0)),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    fn acc_scale(&self) -> f64 {
        self.accumulator_scale
            .unwrap_or(1.0 / (self.shape.num_features as f64).sqrt())
    }
}

/// Training form of the student.
#[derive(Clone, Debug, PartialEq)]
pub struct LdcModel {
    pub config: LdcConfig,
    /// `N x D_f` shadow weights of the feature vectors.
    pub feature_shadow: Vec<f64>,
    /// ValueBox first layer, `1 -> hidden`, real-valued, tanh.
    pub valuebox_in: DenseLayer,
    /// ValueBox second layer, `hidden -> D_v`, binary weights, sign output.
    pub valuebox_out: DenseLayer,
    /// Class layer, `D_f -> C`.
    pub class_layer: DenseLayer,
    /// Logits are `exp(log_scale)` times the class-layer outputs.
    pub log_scale: f64,
}

/// Everything that depends only on the weights, computed once per minibatch.
#[derive(Clone, Debug)]
pub struct BatchContext {
    /// `sign(feature_shadow)`, `N x D_f`.
    feature_sign: Vec<f64>,
    /// Per level: hidden activations of the ValueBox.
    hidden: Vec<Vec<f64>>,
    /// Per level: scaled ValueBox preactivation, `D_v` entries.
    value_pre: Vec<Vec<f64>>,
    /// Per level: value vector tiled up to `D_f`, entries in `{-1, +1}`.
    tiled: Vec<f64>,
}

impl BatchContext {
    pub fn value_vector(&self, level: usize, value_dim: usize) -> Vec<f64> {
        self.value_pre[level].iter().take(value_dim).map(|&p| sign(p)).collect()
    }
}

/// Per-sample scratch space reused across a minibatch.
#[derive(Clone, Debug)]
pub struct Scratch {
    acc: Vec<f64>,
    enc: Vec<f64>,
    pub logits: Vec<f64>,
    grad_enc: Vec<f64>,
}

/// Gradient accumulators for one minibatch.
#[derive(Clone, Debug)]
pub struct LdcGrads {
    pub feature: Vec<f64>,
    pub class: DenseGrads,
    pub log_scale: f64,
    /// Gradient with respect to the tiled value table, `M x D_f`.
    tiled: Vec<f64>,
}

impl LdcGrads {
    pub fn zero(&mut self) {
        self.feature.fill(0.0);
        self.class.zero();
        self.log_scale = 0.0;
        self.tiled.fill(0.0);
    }
}

impl LdcModel {
    pub fn new<R: Rng + ?Sized>(config: LdcConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let s = config.shape;
        let feature_shadow = (0..s.num_features * s.feature_dim)
            .map(|_| rng.random_range(-config.feature_init..=config.feature_init))
            .collect();
        let mut valuebox_in = DenseLayer::new(1, config.valuebox_hidden, true, false, rng)?;
        // Soft steps at thresholds spread over the level range. With zero
        // biases every unit would be odd in the level and the table would
        // collapse to one code and its negation.
        let h = config.valuebox_hidden as f64;
        let bias = valuebox_in.bias.as_mut().expect("valuebox_in has a bias");
        for (k, (w, b)) in valuebox_in.weights.iter_mut().zip(bias.iter_mut()).enumerate() {
            let threshold = -1.0 + 2.0 * (k as f64 + rng.random::<f64>()) / h;
            let slope = if rng.random::<bool>() { 3.0 } else { -3.0 };
            *w = slope;
            *b = -slope * threshold;
        }
        let valuebox_out = DenseLayer::new(config.valuebox_hidden, s.value_dim, false, true, rng)?;
        let class_layer = DenseLayer::new(s.feature_dim, s.num_classes, false, config.binary_class, rng)?;
        let log_scale = config.logit_scale.ln();
        Ok(Self {
            config,
            feature_shadow,
            valuebox_in,
            valuebox_out,
            class_layer,
            log_scale,
        })
    }

    pub fn shape(&self) -> LdcShape {
        self.config.shape
    }

    pub fn param_count(&self) -> usize {
        self.feature_shadow.len()
            + self.valuebox_in.param_count()
            + self.valuebox_out.param_count()
            + self.class_layer.param_count()
            + 1
    }

    /// Level `m` mapped onto `[-1, 1]`.
    fn level_input(&self, level: usize) -> f64 {
        2.0 * level as f64 / (self.config.shape.num_levels - 1) as f64 - 1.0
    }

    pub fn batch_context(&self) -> BatchContext {
        let s = self.config.shape;
        let h = self.config.valuebox_hidden;
        let reps = s.feature_dim / s.value_dim;
        let mut hidden = Vec::with_capacity(s.num_levels);
        let mut value_pre = Vec::with_capacity(s.num_levels);
        let mut tiled = Vec::with_capacity(s.num_levels * s.feature_dim);
        for m in 0..s.num_levels {
            let mut hm = vec![0.0; h];
            self.valuebox_in.forward_into(&[self.level_input(m)], &mut hm);
            hm.iter_mut().for_each(|v| *v = v.tanh());
            let mut pm = vec![0.0; s.value_dim];
            self.valuebox_out.forward_into(&hm, &mut pm);
            pm.iter_mut().for_each(|v| *v /= h as f64);
            for _ in 0..reps {
                tiled.extend(pm.iter().map(|&p| sign(p)));
            }
            hidden.push(hm);
            value_pre.push(pm);
        }
        BatchContext {
            feature_sign: self.feature_shadow.iter().map(|&w| sign(w)).collect(),
            hidden,
            value_pre,
            tiled,
        }
    }

    pub fn scratch(&self) -> Scratch {
        let s = self.config.shape;
        Scratch {
            acc: vec![0.0; s.feature_dim],
            enc: vec![0.0; s.feature_dim],
            logits: vec![0.0; s.num_classes],
            grad_enc: vec![0.0; s.feature_dim],
        }
    }

    pub fn zero_grads(&self) -> LdcGrads {
        let s = self.config.shape;
        LdcGrads {
            feature: vec![0.0; self.feature_shadow.len()],
            class: self.class_layer.zero_grads(),
            log_scale: 0.0,
            tiled: vec![0.0; s.num_levels * s.feature_dim],
        }
    }

    fn check_sample(&self, x: &[u16]) -> Result<()> {
        let s = self.config.shape;
        check_dims(s.num_features, x.len())?;
        if let Some(&l) = x.iter().find(|&&l| l as usize >= s.num_levels) {
            return Err(Error::LevelOutOfRange {
                level: l as usize,
                levels: s.num_levels,
            });
        }
        Ok(())
    }

    /// ValueBox output for one level, components in `{-1, +1}`.
    pub fn valuebox_encode(&self, level: usize) -> Result<Vec<f64>> {
        let s = self.config.shape;
        if level >= s.num_levels {
            return Err(Error::LevelOutOfRange {
                level,
                levels: s.num_levels,
            });
        }
        let mut h = vec![0.0; self.config.valuebox_hidden];
        self.valuebox_in.forward_into(&[self.level_input(level)], &mut h);
        h.iter_mut().for_each(|v| *v = v.tanh());
        let mut p = vec![0.0; s.value_dim];
        self.valuebox_out.forward_into(&h, &mut p);
        Ok(p.into_iter().map(sign).collect())
    }

    /// Training forward pass; leaves the logits in `scratch.logits`.
    /// `x` must already be validated.
    pub fn forward_ctx(&self, ctx: &BatchContext, x: &[u16], scratch: &mut Scratch) {
        let d = self.config.shape.feature_dim;
        scratch.acc.fill(0.0);
        for (j, &level) in x.iter().enumerate() {
            let fs = &ctx.feature_sign[j * d..(j + 1) * d];
            let tv = &ctx.tiled[level as usize * d..(level as usize + 1) * d];
            for ((a, f), v) in scratch.acc.iter_mut().zip(fs).zip(tv) {
                *a += f * v;
            }
        }
        for (e, a) in scratch.enc.iter_mut().zip(&scratch.acc) {
            *e = sign(*a);
        }
        self.class_layer.forward_into(&scratch.enc, &mut scratch.logits);
        let scale = self.log_scale.exp();
        scratch.logits.iter_mut().for_each(|z| *z *= scale);
    }

    /// Backward pass for the sample last run through [`Self::forward_ctx`]
    /// with the same `scratch`. `grad_logits` is dL/dlogits.
    pub fn backward_ctx(
        &self,
        ctx: &BatchContext,
        x: &[u16],
        grad_logits: &[f64],
        scratch: &mut Scratch,
        grads: &mut LdcGrads,
    ) {
        let d = self.config.shape.feature_dim;
        let scale = self.log_scale.exp();
        grads.log_scale += grad_logits.iter().zip(&scratch.logits).map(|(g, z)| g * z).sum::<f64>();
        let clip = self.config.ste_clip;
        let acc_scale = self.config.acc_scale();
        let g_scaled: Vec<f64> = grad_logits.iter().map(|g| g * scale).collect();
        self.class_layer
            .backward(&scratch.enc, &g_scaled, &mut grads.class, Some(&mut scratch.grad_enc), clip);
        // sign STE on the scaled accumulator
        for (g, a) in scratch.grad_enc.iter_mut().zip(&scratch.acc) {
            *g = if (a * acc_scale).abs() <= clip {
                *g * acc_scale
            } else {
                0.0
            };
        }
        for (j, &level) in x.iter().enumerate() {
            let lv = level as usize;
            let shadow = &self.feature_shadow[j * d..(j + 1) * d];
            let fs = &ctx.feature_sign[j * d..(j + 1) * d];
            let tv = &ctx.tiled[lv * d..(lv + 1) * d];
            let gf = &mut grads.feature[j * d..(j + 1) * d];
            for (((gf, w), v), ga) in gf.iter_mut().zip(shadow).zip(tv).zip(&scratch.grad_enc) {
                if w.abs() <= clip {
                    *gf += ga * v;
                }
            }
            let gt = &mut grads.tiled[lv * d..(lv + 1) * d];
            for ((gt, f), ga) in gt.iter_mut().zip(fs).zip(&scratch.grad_enc) {
                *gt += ga * f;
            }
        }
    }

    /// Applies `p <- p - lr * g` to every parameter (pass the batch-mean
    /// learning rate), backpropagating the accumulated value-table gradient
    /// through the ValueBox first, then clips binarized shadow weights back
    /// into the STE band.
    pub fn apply_grads(&mut self, ctx: &BatchContext, grads: &LdcGrads, lr: f64) -> Result<()> {
        let s = self.config.shape;
        let h = self.config.valuebox_hidden;
        let clip = self.config.ste_clip;
        let mut g_in = self.valuebox_in.zero_grads();
        let mut g_out = self.valuebox_out.zero_grads();
        let mut g_hidden = vec![0.0; h];
        for m in 0..s.num_levels {
            let gt = &grads.tiled[m * s.feature_dim..(m + 1) * s.feature_dim];
            if gt.iter().all(|g| *g == 0.0) {
                continue;
            }
            let mut g_value = vec![0.0; s.value_dim];
            for (k, g) in gt.iter().enumerate() {
                g_value[k % s.value_dim] += g;
            }
            // sign STE, then the 1/hidden scaling of the preactivation
            let g_pre: Vec<f64> = g_value
                .iter()
                .zip(&ctx.value_pre[m])
                .map(|(g, p)| if p.abs() <= clip { g / h as f64 } else { 0.0 })
                .collect();
            self.valuebox_out
                .backward(&ctx.hidden[m], &g_pre, &mut g_out, Some(&mut g_hidden), clip);
            for (gh, hv) in g_hidden.iter_mut().zip(&ctx.hidden[m]) {
                *gh *= 1.0 - hv * hv;
            }
            self.valuebox_in
                .backward(&[self.level_input(m)], &g_hidden, &mut g_in, None, clip);
        }
        crate::nn::sgd_step(&mut self.feature_shadow, &grads.feature, lr)?;
        self.class_layer.apply_sgd(&grads.class, lr)?;
        if self.config.learn_scale {
            // kept within a decade of its initial value: a collapsed scale
            // zeroes every other gradient and the model cannot recover
            let init = self.config.logit_scale.ln();
            let band = std::f64::consts::LN_10;
            self.log_scale = (self.log_scale - lr * grads.log_scale).clamp(init - band, init + band);
        }
        self.valuebox_in.apply_sgd(&g_in, lr)?;
        self.valuebox_out.apply_sgd(&g_out, lr)?;
        for w in self
            .feature_shadow
            .iter_mut()
            .chain(self.valuebox_out.weights.iter_mut())
        {
            *w = w.clamp(-clip, clip);
        }
        if self.config.binary_class {
            self.class_layer.weights.iter_mut().for_each(|w| *w = w.clamp(-clip, clip));
        }
        if self
            .class_layer
            .weights
            .iter()
            .chain(&self.valuebox_in.weights)
            .chain(std::iter::once(&self.log_scale))
            .any(|w| !w.is_finite())
        {
            return Err(Error::Numeric("student weights diverged".into()));
        }
        Ok(())
    }

    /// Logits of the training forward pass.
    pub fn forward_train(&self, x: &[u16]) -> Result<Vec<f64>> {
        self.check_sample(x)?;
        let ctx = self.batch_context();
        let mut scratch = self.scratch();
        self.forward_ctx(&ctx, x, &mut scratch);
        Ok(scratch.logits)
    }

    /// Binarized class vectors and feature vectors, packed.
    pub fn export_inference(&self) -> PackedLdcModel {
        let s = self.config.shape;
        let d = s.feature_dim;
        let features = (0..s.num_features)
            .map(|j| {
                let row = &self.feature_shadow[j * d..(j + 1) * d];
                Hypervector::from_fn(d, |i| row[i] >= 0.0)
            })
            .collect();
        let value_table = (0..s.num_levels)
            .map(|m| {
                let v = self.valuebox_encode(m).expect("level in range");
                Hypervector::from_fn(s.value_dim, |i| v[i] > 0.0)
            })
            .collect();
        let classes = (0..s.num_classes)
            .map(|c| {
                let row = &self.class_layer.weights[c * d..(c + 1) * d];
                Hypervector::from_fn(d, |i| row[i] >= 0.0)
            })
            .collect();
        PackedLdcModel::new(
            s,
            features,
            value_table,
            ClassBook::new(classes).expect("validated class count"),
        )
        .expect("shapes follow the config")
    }
}

/// Frozen bit-packed student.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedLdcModel {
    shape: LdcShape,
    features: Vec<Hypervector>,
    value_table: Vec<Hypervector>,
    classbook: ClassBook,
    /// Each value vector tiled to `D_f`; derived, not serialized.
    tiled_values: Vec<Hypervector>,
}

impl PackedLdcModel {
    pub fn new(
        shape: LdcShape,
        features: Vec<Hypervector>,
        value_table: Vec<Hypervector>,
        classbook: ClassBook,
    ) -> Result<Self> {
        shape.validate()?;
        check_dims(shape.num_features, features.len())?;
        check_dims(shape.num_levels, value_table.len())?;
        check_dims(shape.num_classes, classbook.num_classes())?;
        check_dims(shape.feature_dim, classbook.dim())?;
        for f in &features {
            check_dims(shape.feature_dim, f.dim())?;
        }
        for v in &value_table {
            check_dims(shape.value_dim, v.dim())?;
        }
        let reps = shape.feature_dim / shape.value_dim;
        let tiled_values = value_table.iter().map(|v| v.tile(reps)).collect();
        Ok(Self {
            shape,
            features,
            value_table,
            classbook,
            tiled_values,
        })
    }

    pub fn shape(&self) -> LdcShape {
        self.shape
    }

    pub fn features(&self) -> &[Hypervector] {
        &self.features
    }

    pub fn value_table(&self) -> &[Hypervector] {
        &self.value_table
    }

    pub fn classbook(&self) -> &ClassBook {
        &self.classbook
    }

    fn check_sample(&self, x: &[u16]) -> Result<()> {
        check_dims(self.shape.num_features, x.len())?;
        if let Some(&l) = x.iter().find(|&&l| l as usize >= self.shape.num_levels) {
            return Err(Error::LevelOutOfRange {
                level: l as usize,
                levels: self.shape.num_levels,
            });
        }
        Ok(())
    }

    /// `sign(sum_j F_j (x) tile(V[x_j]))` with `sign(0) = +1`, using only
    /// XNOR, bit counting and a compare.
    pub fn encode(&self, x: &[u16]) -> Result<Hypervector> {
        self.check_sample(x)?;
        let d = self.shape.feature_dim;
        let n_words = d.div_ceil(WORD_BITS);
        let mut ones = vec![0u32; n_words * WORD_BITS];
        for (f, &level) in self.features.iter().zip(x) {
            let tv = &self.tiled_values[level as usize];
            for (k, (a, b)) in f.words().iter().zip(tv.words()).enumerate() {
                let bound = !(a ^ b);
                let slot = &mut ones[k * WORD_BITS..(k + 1) * WORD_BITS];
                for (bit, cnt) in slot.iter_mut().enumerate() {
                    *cnt += ((bound >> bit) & 1) as u32;
                }
            }
        }
        // bundle value = 2 * ones - N; keep +1 when it is >= 0
        let n = self.shape.num_features as u32;
        Ok(Hypervector::from_fn(d, |i| 2 * ones[i] >= n))
    }

    pub fn infer(&self, x: &[u16]) -> Result<usize> {
        nearest_class(&self.encode(x)?, &self.classbook)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MODEL_MAGIC)?;
        let s = self.shape;
        for v in [s.num_features, s.num_levels, s.feature_dim, s.value_dim, s.num_classes] {
            let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
            w.write_all(&v.to_le_bytes())?;
        }
        for hv in self
            .features
            .iter()
            .chain(&self.value_table)
            .chain(self.classbook.vectors())
        {
            hv.write_to(w)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.shape.file_len());
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(Error::Format("not an LDC1 model file".into()));
        }
        let mut fields = [0usize; 5];
        for f in &mut fields {
            *f = read_u32(r)? as usize;
        }
        let shape = LdcShape {
            num_features: fields[0],
            num_levels: fields[1],
            feature_dim: fields[2],
            value_dim: fields[3],
            num_classes: fields[4],
        };
        shape.validate()?;
        let read_n = |r: &mut R, n: usize| -> Result<Vec<Hypervector>> {
            (0..n).map(|_| Hypervector::read_from(r)).collect()
        };
        let features = read_n(r, shape.num_features)?;
        let values = read_n(r, shape.num_levels)?;
        let classes = read_n(r, shape.num_classes)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after model".into()));
        }
        Self::new(shape, features, values, ClassBook::new(classes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{finite_diff_check, nll_loss};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, m: usize, df: usize, dv: usize, c: usize) -> LdcShape {
        LdcShape {
            num_features: n,
            num_levels: m,
            feature_dim: df,
            value_dim: dv,
            num_classes: c,
        }
    }

    fn model(s: LdcShape, seed: u64) -> LdcModel {
        LdcModel::new(LdcConfig::new(s), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn random_sample(rng: &mut ChaCha8Rng, s: LdcShape) -> Vec<u16> {
        (0..s.num_features).map(|_| rng.random_range(0..s.num_levels as u16)).collect()
    }

    #[test]
    fn config_validation() {
        assert!(shape(4, 8, 12, 5, 3).validate().is_err());
        assert!(shape(4, 1, 8, 4, 3).validate().is_err());
        assert!(shape(4, 8, 8, 4, 1).validate().is_err());
        assert!(shape(4, 8, 8, 4, 3).validate().is_ok());
    }

    #[test]
    fn valuebox_outputs_are_bipolar_and_deterministic() {
        let m = model(shape(3, 16, 8, 4, 2), 1);
        for level in 0..16 {
            let v = m.valuebox_encode(level).unwrap();
            assert_eq!(v.len(), 4);
            assert!(v.iter().all(|x| *x == 1.0 || *x == -1.0));
            assert_eq!(v, m.valuebox_encode(level).unwrap());
        }
        assert!(matches!(m.valuebox_encode(16), Err(Error::LevelOutOfRange { .. })));
    }

    #[test]
    fn packed_value_table_matches_training_path() {
        let m = model(shape(3, 16, 8, 4, 2), 2);
        let packed = m.export_inference();
        for level in 0..16 {
            let expect: Vec<i8> = m.valuebox_encode(level).unwrap().iter().map(|v| *v as i8).collect();
            assert_eq!(packed.value_table()[level].to_bipolar(), expect);
        }
    }

    #[test]
    fn single_feature_encoding_is_plain_binding() {
        let m = model(shape(1, 4, 8, 2, 2), 3);
        let packed = m.export_inference();
        for level in 0..4u16 {
            let tiled = packed.value_table()[level as usize].tile(4);
            let expect = packed.features()[0].bind(&tiled).unwrap();
            assert_eq!(packed.encode(&[level]).unwrap(), expect);
        }
    }

    #[test]
    fn hand_computed_two_feature_encoding() {
        // F_1 = [+,+,-,-], F_2 = [+,-,+,-]; level 0 -> V = [+,-], level 1 -> V = [-,-]
        let f1 = Hypervector::from_bipolar(&[1, 1, -1, -1]).unwrap();
        let f2 = Hypervector::from_bipolar(&[1, -1, 1, -1]).unwrap();
        let v0 = Hypervector::from_bipolar(&[1, -1]).unwrap();
        let v1 = Hypervector::from_bipolar(&[-1, -1]).unwrap();
        let book = ClassBook::new(vec![Hypervector::ones(4), Hypervector::minus_ones(4)]).unwrap();
        let p = PackedLdcModel::new(shape(2, 2, 4, 2, 2), vec![f1, f2], vec![v0, v1], book).unwrap();
        // x = (0, 1): F_1*[+,-,+,-] = [+,-,-,+]; F_2*[-,-,-,-] = [-,+,-,+]
        // sum = [0, 0, -2, 2] -> sign with sgn(0)=+1 -> [+,+,-,+]
        assert_eq!(p.encode(&[0, 1]).unwrap().to_bipolar(), vec![1, 1, -1, 1]);
        // x = (1, 1): F_1*[-,-,-,-] = [-,-,+,+]; sum with [-,+,-,+] = [-2,0,0,2]
        assert_eq!(p.encode(&[1, 1]).unwrap().to_bipolar(), vec![-1, 1, 1, 1]);
        assert_eq!(p.infer(&[1, 1]).unwrap(), 0);
        assert!(p.encode(&[2, 0]).is_err());
        assert!(p.encode(&[0]).is_err());
    }

    #[test]
    fn tiling_is_identity_when_dims_match() {
        let m = model(shape(5, 4, 4, 4, 3), 4);
        let p = m.export_inference();
        for (v, t) in p.value_table().iter().zip(&p.tiled_values) {
            assert_eq!(v, t);
        }
    }

    #[test]
    fn training_encoding_matches_packed_encoding() {
        let s = shape(9, 8, 64, 4, 3);
        let m = model(s, 5);
        let p = m.export_inference();
        let ctx = m.batch_context();
        let mut scratch = m.scratch();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let x = random_sample(&mut rng, s);
            m.forward_ctx(&ctx, &x, &mut scratch);
            let expect: Vec<i8> = scratch.enc.iter().map(|v| *v as i8).collect();
            assert_eq!(p.encode(&x).unwrap().to_bipolar(), expect);
        }
    }

    #[test]
    fn logits_have_class_count() {
        let s = shape(4, 4, 8, 2, 6);
        let m = model(s, 7);
        assert_eq!(m.forward_train(&[0, 1, 2, 3]).unwrap().len(), 6);
        assert!(m.forward_train(&[0, 1, 2, 4]).is_err());
    }

    #[test]
    fn infer_zero_distance_and_ties() {
        let s = shape(3, 4, 8, 4, 2);
        let m = model(s, 8);
        let p = m.export_inference();
        let x = [1u16, 2, 3];
        let enc = p.encode(&x).unwrap();
        let book = ClassBook::new(vec![enc.clone(), enc.negate()]).unwrap();
        let p2 = PackedLdcModel::new(s, p.features().to_vec(), p.value_table().to_vec(), book).unwrap();
        assert_eq!(p2.infer(&x).unwrap(), 0);
        let tie = ClassBook::new(vec![enc.clone(), enc.clone()]).unwrap();
        let p3 = PackedLdcModel::new(s, p.features().to_vec(), p.value_table().to_vec(), tie).unwrap();
        assert_eq!(p3.infer(&x).unwrap(), 0);
    }

    #[test]
    fn export_is_deterministic_and_roundtrips() {
        let s = shape(10, 16, 128, 4, 5);
        let a = model(s, 9).export_inference().to_bytes();
        let b = model(s, 9).export_inference().to_bytes();
        assert_eq!(a, b);
        let m = model(s, 9);
        assert_eq!(m.export_inference().to_bytes(), m.export_inference().to_bytes());
        assert_eq!(a.len(), s.file_len());
        let back = PackedLdcModel::read_from(&mut a.as_slice()).unwrap();
        assert_eq!(back.to_bytes(), a);
        assert!(back.classbook().vectors().iter().all(|v| v.dim() == 128));
    }

    #[test]
    fn read_rejects_garbage() {
        assert!(PackedLdcModel::read_from(&mut &b"LDC0\0\0\0\0"[..]).is_err());
        let s = shape(2, 2, 8, 4, 2);
        let mut bytes = model(s, 1).export_inference().to_bytes();
        bytes.push(0);
        assert!(PackedLdcModel::read_from(&mut bytes.as_slice()).is_err());
        let bytes = model(s, 1).export_inference().to_bytes();
        assert!(PackedLdcModel::read_from(&mut &bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn float_readout_gradient_matches_finite_differences() {
        let s = shape(6, 8, 16, 4, 3);
        let mut cfg = LdcConfig::new(s);
        cfg.binary_class = false;
        let m = LdcModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let x = [0u16, 3, 7, 2, 5, 1];
        let label = 2;
        let err = finite_diff_check(
            |w| {
                let mut mm = m.clone();
                let (&log_scale, weights) = w.split_last().unwrap();
                mm.class_layer.weights = weights.to_vec();
                mm.log_scale = log_scale;
                let ctx = mm.batch_context();
                let mut sc = mm.scratch();
                mm.forward_ctx(&ctx, &x, &mut sc);
                let (loss, g) = nll_loss(&sc.logits, label).unwrap();
                let mut grads = mm.zero_grads();
                mm.backward_ctx(&ctx, &x, &g, &mut sc, &mut grads);
                let mut all = grads.class.weights;
                all.push(grads.log_scale);
                (loss, all)
            },
            &[m.class_layer.weights.clone(), vec![m.log_scale]].concat(),
            1e-4,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn sgd_moves_toward_lower_loss() {
        let s = shape(8, 8, 32, 4, 3);
        let mut m = model(s, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let data: Vec<(Vec<u16>, usize)> = (0..60).map(|i| (random_sample(&mut rng, s), i % 3)).collect();
        let loss = |m: &LdcModel| -> f64 {
            data.iter()
                .map(|(x, y)| nll_loss(&m.forward_train(x).unwrap(), *y).unwrap().0)
                .sum::<f64>()
                / data.len() as f64
        };
        let before = loss(&m);
        for _ in 0..30 {
            let ctx = m.batch_context();
            let mut sc = m.scratch();
            let mut g = m.zero_grads();
            for (x, y) in &data {
                m.forward_ctx(&ctx, x, &mut sc);
                let (_, gl) = nll_loss(&sc.logits, *y).unwrap();
                m.backward_ctx(&ctx, x, &gl, &mut sc, &mut g);
            }
            m.apply_grads(&ctx, &g, 0.5 / data.len() as f64).unwrap();
        }
        assert!(loss(&m) < before);
        assert!(m.feature_shadow.iter().all(|w| w.abs() <= 1.0));
    }

    #[test]
    fn file_len_formula() {
        let s = shape(32, 16, 128, 4, 5);
        assert_eq!(s.payload_bits(), 32 * 128 + 16 * 4 + 5 * 128);
        assert_eq!(s.file_len(), 24 + 37 * (4 + 16) + 16 * (4 + 8));
    }
}

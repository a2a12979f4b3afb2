//! Float MLP teacher and its on-disk logit cache.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::data::{digest_u64, Dataset};
use crate::error::{check_dims, Error, Result};
use crate::nn::{nll_loss, softmax, DenseGrads, DenseLayer, StepDecay};
use crate::vsa::read_u32;

pub const LOGIT_MAGIC: &[u8; 4] = b"LGT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    fn apply(self, v: &mut [f64]) {
        match self {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => (y > 0.0) as u8 as f64,
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherConfig {
    /// Input width, hidden widths, class count.
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub epochs: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_step: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TeacherConfig {
    pub fn new(layer_dims: Vec<usize>) -> Self {
        Self {
            layer_dims,
            activation: Activation::Relu,
            epochs: 20,
            lr: 0.05,
            lr_decay: 0.5,
            lr_step: 10,
            batch_size: 32,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::invalid("teacher needs at least an input and an output width"));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::invalid("teacher layer widths must be positive"));
        }
        if *self.layer_dims.last().unwrap() < 2 {
            return Err(Error::invalid("teacher needs at least two outputs"));
        }
        if self.batch_size == 0 || self.lr_step == 0 {
            return Err(Error::invalid("teacher batch size and lr step must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("teacher lr must be >= 0, got {}", self.lr)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::invalid(format!(
                "teacher lr decay must be in (0, 1], got {}",
                self.lr_decay
            )));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    fn hash_into(&self, h: &mut Sha256) {
        h.update((self.layer_dims.len() as u64).to_le_bytes());
        for d in &self.layer_dims {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(self.activation.name().as_bytes());
        h.update((self.epochs as u64).to_le_bytes());
        h.update(self.lr.to_bits().to_le_bytes());
        h.update(self.lr_decay.to_bits().to_le_bytes());
        h.update((self.lr_step as u64).to_le_bytes());
        h.update((self.batch_size as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel {
    pub config: TeacherConfig,
    pub layers: Vec<DenseLayer>,
    /// Per-feature standardization, fitted on the training split.
    pub input_mean: Vec<f64>,
    pub input_std: Vec<f64>,
    /// Fingerprint of the set the model was trained on, 0 while untrained.
    pub trained_on: u64,
}

pub fn build_teacher(cfg: &TeacherConfig) -> Result<TeacherModel> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let layers = cfg
        .layer_dims
        .windows(2)
        .map(|w| DenseLayer::new(w[0], w[1], true, false, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let n = cfg.layer_dims[0];
    Ok(TeacherModel {
        config: cfg.clone(),
        layers,
        input_mean: vec![0.0; n],
        input_std: vec![1.0; n],
        trained_on: 0,
    })
}

/// Buffers for one forward/backward pass.
struct Workspace {
    /// `acts[0]` is the standardized input, `acts[l + 1]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
}

impl TeacherModel {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(DenseLayer::param_count).sum()
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"teacher");
        self.config.hash_into(&mut h);
        h.update(self.trained_on.to_le_bytes());
        digest_u64(h)
    }

    fn workspace(&self) -> Workspace {
        let acts = self.config.layer_dims.iter().map(|&d| vec![0.0; d]).collect();
        let grads = self.config.layer_dims.iter().map(|&d| vec![0.0; d]).collect();
        Workspace { acts, grads }
    }

    fn forward_ws(&self, x: &[f64], ws: &mut Workspace) {
        for ((a, xi), (m, s)) in ws.acts[0]
            .iter_mut()
            .zip(x)
            .zip(self.input_mean.iter().zip(&self.input_std))
        {
            *a = (xi - m) / s;
        }
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            let (head, tail) = ws.acts.split_at_mut(l + 1);
            layer.forward_into(&head[l], &mut tail[0]);
            if l != last {
                self.config.activation.apply(&mut tail[0]);
            }
        }
    }

    /// Backpropagates dL/dlogits through the activations left by `forward_ws`.
    fn backward_ws(&self, grad_logits: &[f64], ws: &mut Workspace, grads: &mut [DenseGrads]) {
        let n = self.layers.len();
        ws.grads[n].copy_from_slice(grad_logits);
        for l in (0..n).rev() {
            let (lo, hi) = ws.grads.split_at_mut(l + 1);
            let grad_in = if l > 0 { Some(&mut lo[l][..]) } else { None };
            self.layers[l].backward(&ws.acts[l], &hi[0], &mut grads[l], grad_in, f64::INFINITY);
            if l > 0 {
                for (g, y) in ws.grads[l].iter_mut().zip(&ws.acts[l]) {
                    *g *= self.config.activation.grad_from_output(*y);
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dims(self.config.layer_dims[0], x.len())?;
        let mut ws = self.workspace();
        self.forward_ws(x, &mut ws);
        Ok(ws.acts.pop().unwrap())
    }

    pub fn accuracy(&self, ds: &Dataset) -> Result<f64> {
        let cache = teacher_logits(self, ds)?;
        let correct = ds
            .labels()
            .iter()
            .enumerate()
            .filter(|(i, &y)| argmax(cache.get(*i)) == y)
            .count();
        Ok(correct as f64 / ds.len().max(1) as f64)
    }

    /// Loss and gradients of the mean NLL over `indices`, used by the
    /// gradient checks.
    pub fn batch_loss_and_grads(&self, ds: &Dataset, indices: &[usize]) -> Result<(f64, Vec<DenseGrads>)> {
        let mut ws = self.workspace();
        let mut grads: Vec<DenseGrads> = self.layers.iter().map(DenseLayer::zero_grads).collect();
        let mut total = 0.0;
        for &i in indices {
            self.forward_ws(ds.row(i), &mut ws);
            let (loss, mut g) = nll_loss(ws.acts.last().unwrap(), ds.labels()[i])?;
            g.iter_mut().for_each(|v| *v /= indices.len() as f64);
            total += loss;
            self.backward_ws(&g, &mut ws, &mut grads);
        }
        Ok((total / indices.len() as f64, grads))
    }
}

pub(crate) fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in z.iter().enumerate() {
        if *v > z[best] {
            best = i;
        }
    }
    best
}

/// Minibatch SGD on the cross-entropy. Returns the model and the mean
/// training loss of every epoch.
pub fn train_teacher(mut model: TeacherModel, train: &Dataset) -> Result<(TeacherModel, Vec<f64>)> {
    if train.is_empty() {
        return Err(Error::Empty("teacher training set"));
    }
    check_dims(model.config.layer_dims[0], train.num_features())?;
    if train.num_classes() != model.num_classes() {
        return Err(Error::invalid(format!(
            "teacher has {} outputs but the dataset has {} classes",
            model.num_classes(),
            train.num_classes()
        )));
    }
    let cfg = model.config.clone();
    let (mean, std) = train.feature_moments();
    model.input_mean = mean;
    model.input_std = std.into_iter().map(|s| if s > 0.0 { s } else { 1.0 }).collect();
    model.trained_on = train.fingerprint();

    let schedule = StepDecay {
        base_lr: cfg.lr,
        factor: cfg.lr_decay,
        step_size: cfg.lr_step,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7ea_c4e5);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut ws = model.workspace();
    let mut grads: Vec<DenseGrads> = model.layers.iter().map(DenseLayer::zero_grads).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = schedule.lr_at(epoch);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(DenseGrads::zero);
            for &i in batch {
                model.forward_ws(train.row(i), &mut ws);
                let (loss, g) = nll_loss(ws.acts.last().unwrap(), train.labels()[i])?;
                total += loss;
                model.backward_ws(&g, &mut ws, &mut grads);
            }
            let step = lr / batch.len() as f64;
            for (layer, g) in model.layers.iter_mut().zip(&grads) {
                layer.apply_sgd(g, step)?;
            }
        }
        let mean_loss = total / train.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Numeric(format!("teacher loss diverged at epoch {epoch}")));
        }
        history.push(mean_loss);
    }
    Ok((model, history))
}

/// Per-sample teacher logits, position-aligned with a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitCache {
    num_classes: usize,
    values: Vec<f64>,
    dataset_fingerprint: u64,
    teacher_fingerprint: u64,
}

impl LogitCache {
    pub fn new(
        num_classes: usize,
        values: Vec<f64>,
        dataset_fingerprint: u64,
        teacher_fingerprint: u64,
    ) -> Result<Self> {
        if num_classes < 2 || !values.len().is_multiple_of(num_classes) {
            return Err(Error::Format(format!(
                "{} logits do not split into rows of {num_classes}",
                values.len()
            )));
        }
        Ok(Self {
            num_classes,
            values,
            dataset_fingerprint,
            teacher_fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.num_classes
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.values[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn dataset_fingerprint(&self) -> u64 {
        self.dataset_fingerprint
    }

    pub fn teacher_fingerprint(&self) -> u64 {
        self.teacher_fingerprint
    }

    /// Fails hard when the cache was computed for different data.
    pub fn check(&self, dataset_fingerprint: u64, len: usize) -> Result<()> {
        if self.dataset_fingerprint != dataset_fingerprint {
            return Err(Error::FingerprintMismatch {
                what: "dataset",
                expected: dataset_fingerprint,
                found: self.dataset_fingerprint,
            });
        }
        check_dims(len, self.len())
    }

    pub fn check_teacher(&self, teacher_fingerprint: u64) -> Result<()> {
        if self.teacher_fingerprint != teacher_fingerprint {
            return Err(Error::FingerprintMismatch {
                what: "teacher",
                expected: teacher_fingerprint,
                found: self.teacher_fingerprint,
            });
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(LOGIT_MAGIC)?;
        let n = u32::try_from(self.len()).map_err(|_| Error::Format("too many samples".into()))?;
        w.write_all(&n.to_le_bytes())?;
        w.write_all(&(self.num_classes as u32).to_le_bytes())?;
        w.write_all(&self.dataset_fingerprint.to_le_bytes())?;
        w.write_all(&self.teacher_fingerprint.to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != LOGIT_MAGIC {
            return Err(Error::Format("not an LGT1 logit cache".into()));
        }
        let n = read_u32(r)? as usize;
        let c = read_u32(r)? as usize;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let dataset_fp = u64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let teacher_fp = u64::from_le_bytes(b8);
        let mut values = Vec::with_capacity(n * c);
        for _ in 0..n * c {
            r.read_exact(&mut b8)?;
            values.push(f64::from_le_bytes(b8));
        }
        if r.read(&mut [0u8; 1])? != 0 {
            return Err(Error::Format("trailing bytes after logit cache".into()));
        }
        Self::new(c, values, dataset_fp, teacher_fp)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(28 + self.values.len() * 8);
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

pub fn teacher_logits(model: &TeacherModel, ds: &Dataset) -> Result<LogitCache> {
    check_dims(model.config.layer_dims[0], ds.num_features())?;
    let mut ws = model.workspace();
    let mut values = Vec::with_capacity(ds.len() * model.num_classes());
    for i in 0..ds.len() {
        model.forward_ws(ds.row(i), &mut ws);
        values.extend_from_slice(ws.acts.last().unwrap());
    }
    LogitCache::new(model.num_classes(), values, ds.fingerprint(), model.fingerprint())
}

/// Cross-entropy of each cached row against the dataset labels.
pub fn teacher_loss_scores(cache: &LogitCache, ds: &Dataset) -> Result<Vec<f64>> {
    cache.check(ds.fingerprint(), ds.len())?;
    (0..ds.len())
        .map(|i| nll_loss(cache.get(i), ds.labels()[i]).map(|(l, _)| l))
        .collect()
}

/// Softmax probabilities of one cached row.
pub fn cached_probs(cache: &LogitCache, i: usize) -> Vec<f64> {
    softmax(cache.get(i))
}

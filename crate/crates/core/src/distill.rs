//! Difficulty ranking, curriculum pools, alpha schedules and the scheduled
//! distillation loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::QuantizedDataset;
use crate::error::{check_dims, Error, Result};
use crate::ldc::{LdcModel, PackedLdcModel};
use crate::nn::{combined_loss, nll_loss, DistillConfig, StepDecay};
use crate::teacher::{argmax, LogitCache};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlphaMode {
    Static,
    Linear,
    Exponential,
    Parameterized,
}

impl AlphaMode {
    pub const ALL: [AlphaMode; 4] = [
        AlphaMode::Static,
        AlphaMode::Linear,
        AlphaMode::Exponential,
        AlphaMode::Parameterized,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlphaMode::Static => "static",
            AlphaMode::Linear => "linear",
            AlphaMode::Exponential => "exponential",
            AlphaMode::Parameterized => "parameterized",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlphaSchedule {
    pub mode: AlphaMode,
    pub alpha0: f64,
    /// Change point `P`: no decay before this epoch.
    pub change_point: usize,
    /// Decay step `k`: decay only on epochs divisible by `k`.
    pub decay_step: usize,
    /// Decay rate `gamma`.
    pub decay_rate: f64,
    /// Scaling factor `r` in the exponent `ceil(h / r)`.
    pub scaling_factor: usize,
    /// Value the linear mode reaches at the final epoch.
    pub linear_end: f64,
    /// Learning rate of the sigmoid logit in parameterized mode.
    pub alpha_lr: f64,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        Self {
            mode: AlphaMode::Exponential,
            alpha0: 0.8,
            change_point: 0,
            decay_step: 1,
            decay_rate: 0.9,
            scaling_factor: 50,
            linear_end: 0.0,
            alpha_lr: 0.05,
        }
    }
}

impl AlphaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha0) {
            return Err(Error::invalid(format!("alpha0 must lie in [0, 1], got {}", self.alpha0)));
        }
        if !(0.0..=1.0).contains(&self.linear_end) {
            return Err(Error::invalid(format!(
                "linear_end must lie in [0, 1], got {}",
                self.linear_end
            )));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return Err(Error::invalid(format!(
                "decay rate must lie in (0, 1], got {}",
                self.decay_rate
            )));
        }
        if self.decay_step == 0 || self.scaling_factor == 0 {
            return Err(Error::invalid("decay step and scaling factor must be >= 1"));
        }
        if !(self.alpha_lr >= 0.0 && self.alpha_lr.is_finite()) {
            return Err(Error::invalid(format!("alpha_lr must be >= 0, got {}", self.alpha_lr)));
        }
        Ok(())
    }
}

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

/// Mutable scheduler state. Exponential decay compounds, so epochs must be
/// visited in increasing order.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaState {
    total_epochs: usize,
    alpha: f64,
    /// Sigmoid logit, parameterized mode only.
    logit: f64,
    next_epoch: usize,
}

impl AlphaState {
    pub fn new(schedule: &AlphaSchedule, total_epochs: usize) -> Self {
        let p = schedule.alpha0.clamp(1e-6, 1.0 - 1e-6);
        Self {
            total_epochs,
            alpha: schedule.alpha0,
            logit: (p / (1.0 - p)).ln(),
            next_epoch: 0,
        }
    }

    /// Current alpha without advancing anything.
    pub fn current(&self, schedule: &AlphaSchedule) -> f64 {
        match schedule.mode {
            AlphaMode::Parameterized => sigmoid(self.logit),
            _ => self.alpha,
        }
    }

    /// One gradient step on the sigmoid logit given the batch-mean raw loss
    /// terms: `dL/da = sigmoid'(a) * (L_KD - L_NLL)`.
    pub fn learn(&mut self, schedule: &AlphaSchedule, mean_kd: f64, mean_nll: f64) {
        if schedule.mode != AlphaMode::Parameterized {
            return;
        }
        let s = sigmoid(self.logit);
        self.logit -= schedule.alpha_lr * s * (1.0 - s) * (mean_kd - mean_nll);
    }
}

/// Alpha for epoch `h`. Call once per epoch in increasing `h`.
pub fn alpha_at(schedule: &AlphaSchedule, h: usize, state: &mut AlphaState) -> Result<f64> {
    if h < state.next_epoch {
        return Err(Error::invalid(format!(
            "alpha schedule already advanced past epoch {h}"
        )));
    }
    state.next_epoch = h + 1;
    let alpha = match schedule.mode {
        AlphaMode::Static => schedule.alpha0,
        AlphaMode::Exponential => {
            if h >= schedule.change_point && h.is_multiple_of(schedule.decay_step) {
                let exponent = h.div_ceil(schedule.scaling_factor) as i32;
                state.alpha = (state.alpha * schedule.decay_rate.powi(exponent)).max(0.0);
            }
            state.alpha
        }
        AlphaMode::Linear => {
            let last = state.total_epochs.saturating_sub(1);
            let a = if h < schedule.change_point {
                schedule.alpha0
            } else if last <= schedule.change_point {
                schedule.linear_end
            } else {
                let t = ((h - schedule.change_point) as f64 / (last - schedule.change_point) as f64).min(1.0);
                schedule.alpha0 + (schedule.linear_end - schedule.alpha0) * t
            };
            state.alpha = a.clamp(0.0, 1.0);
            state.alpha
        }
        AlphaMode::Parameterized => sigmoid(state.logit),
    };
    Ok(alpha)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OrderMode {
    Curriculum,
    Random,
    AntiCurriculum,
}

impl OrderMode {
    pub const ALL: [OrderMode; 3] = [OrderMode::Curriculum, OrderMode::Random, OrderMode::AntiCurriculum];

    pub fn name(self) -> &'static str {
        match self {
            OrderMode::Curriculum => "curriculum",
            OrderMode::Random => "random",
            OrderMode::AntiCurriculum => "anti",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "curriculum" => Some(OrderMode::Curriculum),
            "random" => Some(OrderMode::Random),
            "anti" | "anti-curriculum" | "anti_curriculum" => Some(OrderMode::AntiCurriculum),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CurriculumMode {
    /// Train on the pool of the current phase, reshuffled each epoch.
    StagedPools,
    /// Walk the whole ranked sequence in order every epoch.
    SortedFull,
}

impl CurriculumMode {
    pub fn name(self) -> &'static str {
        match self {
            CurriculumMode::StagedPools => "staged_pools",
            CurriculumMode::SortedFull => "sorted_full",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "staged_pools" => Some(CurriculumMode::StagedPools),
            "sorted_full" => Some(CurriculumMode::SortedFull),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RankingSource {
    StudentLoss,
    TeacherLoss,
}

impl RankingSource {
    pub fn name(self) -> &'static str {
        match self {
            RankingSource::StudentLoss => "student_loss",
            RankingSource::TeacherLoss => "teacher_loss",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "student_loss" => Some(RankingSource::StudentLoss),
            "teacher_loss" => Some(RankingSource::TeacherLoss),
            _ => None,
        }
    }
}

/// Cross-entropy of the reference model on every sample; higher is harder.
pub fn score_difficulty(reference: &LdcModel, ds: &QuantizedDataset) -> Result<Vec<f64>> {
    let s = reference.shape();
    check_dims(s.num_features, ds.num_features())?;
    check_dims(s.num_classes, ds.num_classes())?;
    if ds.num_levels() != s.num_levels {
        return Err(Error::LevelOutOfRange {
            level: ds.num_levels() - 1,
            levels: s.num_levels,
        });
    }
    let ctx = reference.batch_context();
    let mut scratch = reference.scratch();
    (0..ds.len())
        .map(|i| {
            reference.forward_ctx(&ctx, ds.row(i), &mut scratch);
            nll_loss(&scratch.logits, ds.labels()[i]).map(|(l, _)| l)
        })
        .collect()
}

/// Stable ascending (curriculum) or descending (anti-curriculum) sort by
/// score with ties kept in index order, or a seeded shuffle.
pub fn order_dataset(scores: &[f64], mode: OrderMode, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match mode {
        OrderMode::Curriculum => idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b])),
        OrderMode::AntiCurriculum => idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a])),
        OrderMode::Random => idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed)),
    }
    idx
}

/// Ranked samples split into three nested pools trained in three phases.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumPlan {
    pub permutation: Vec<usize>,
    pub order_mode: OrderMode,
    pub pool_fractions: [f64; 3],
    pub pool_sizes: [usize; 3],
    pub phase_epochs: [usize; 3],
    pub scores: Vec<f64>,
}

impl CurriculumPlan {
    /// Ranks `scores` and builds the pools. Random order has no notion of
    /// easy or hard samples, so it always trains on the full set.
    pub fn from_scores(
        scores: Vec<f64>,
        order_mode: OrderMode,
        fractions: [f64; 3],
        total_epochs: usize,
        phase_split: Option<[usize; 3]>,
        seed: u64,
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Empty("difficulty scores"));
        }
        let permutation = order_dataset(&scores, order_mode, seed);
        let fractions = if order_mode == OrderMode::Random {
            [1.0; 3]
        } else {
            fractions
        };
        let mut plan = build_pools(permutation, fractions, total_epochs, phase_split)?;
        plan.order_mode = order_mode;
        plan.scores = scores;
        Ok(plan)
    }

    pub fn len(&self) -> usize {
        self.permutation.len()
    }

    pub fn is_empty(&self) -> bool {
        self.permutation.is_empty()
    }

    pub fn total_epochs(&self) -> usize {
        self.phase_epochs.iter().sum()
    }

    pub fn phase_of(&self, epoch: usize) -> usize {
        let mut end = 0;
        for (b, n) in self.phase_epochs.iter().enumerate() {
            end += n;
            if epoch < end {
                return b;
            }
        }
        2
    }

    pub fn pool(&self, phase: usize) -> &[usize] {
        &self.permutation[..self.pool_sizes[phase]]
    }
}

/// Pool `b` is the first `floor(f_b * I)` entries of the permutation.
/// Phases default to thirds of `H` with the remainder in the last one.
pub fn build_pools(
    permutation: Vec<usize>,
    fractions: [f64; 3],
    total_epochs: usize,
    phase_split: Option<[usize; 3]>,
) -> Result<CurriculumPlan> {
    let n = permutation.len();
    let mut seen = vec![false; n];
    for &i in &permutation {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::invalid("permutation is not a bijection"));
        }
    }
    for (b, &f) in fractions.iter().enumerate() {
        if !(f > 0.0 && f <= 1.0) {
            return Err(Error::invalid(format!("pool fraction {f} not in (0, 1]")));
        }
        if b > 0 && f < fractions[b - 1] {
            return Err(Error::invalid("pool fractions must be nondecreasing"));
        }
    }
    let pool_sizes = fractions.map(|f| (f * n as f64).floor() as usize);
    if pool_sizes[0] == 0 {
        return Err(Error::Empty("easy pool"));
    }
    if total_epochs == 0 {
        return Err(Error::invalid("need at least one epoch"));
    }
    let phase_epochs = match phase_split {
        Some(p) => {
            if p.iter().sum::<usize>() != total_epochs {
                return Err(Error::invalid(format!(
                    "phase epochs {p:?} do not sum to {total_epochs}"
                )));
            }
            p
        }
        None => {
            let third = total_epochs / 3;
            [third, third, total_epochs - 2 * third]
        }
    };
    Ok(CurriculumPlan {
        permutation,
        order_mode: OrderMode::Curriculum,
        pool_fractions: fractions,
        pool_sizes,
        phase_epochs,
        scores: Vec::new(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: StepDecay,
    pub temperature: f64,
    pub seed: u64,
    pub curriculum_mode: CurriculumMode,
    pub ranking_source: RankingSource,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be >= 1"));
        }
        if !(self.lr.base_lr >= 0.0 && self.lr.base_lr.is_finite()) {
            return Err(Error::invalid(format!("lr must be >= 0, got {}", self.lr.base_lr)));
        }
        if !(self.lr.factor > 0.0 && self.lr.factor <= 1.0) || self.lr.step_size == 0 {
            return Err(Error::invalid("lr decay factor must be in (0, 1] with a step >= 1"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One epoch of training statistics. Loss columns are means over the
/// samples visited that epoch, with `train_loss = kd_term + nll_term`;
/// `train_acc` is the running accuracy of the training forward pass and
/// `test_acc` the packed-model accuracy after the epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub alpha: f64,
    pub pool_size: usize,
    pub train_loss: f64,
    pub kd_term: f64,
    pub nll_term: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

pub fn packed_accuracy(model: &PackedLdcModel, ds: &QuantizedDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut correct = 0usize;
    for i in 0..ds.len() {
        correct += (model.infer(ds.row(i))? == ds.labels()[i]) as usize;
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Accuracy of the training-form forward pass.
pub fn train_form_accuracy(model: &LdcModel, ds: &QuantizedDataset) -> f64 {
    let ctx = model.batch_context();
    let mut scratch = model.scratch();
    let correct = (0..ds.len())
        .filter(|&i| {
            model.forward_ctx(&ctx, ds.row(i), &mut scratch);
            argmax(&scratch.logits) == ds.labels()[i]
        })
        .count();
    correct as f64 / ds.len().max(1) as f64
}

fn check_compatible(student: &LdcModel, ds: &QuantizedDataset) -> Result<()> {
    let s = student.shape();
    check_dims(s.num_features, ds.num_features())?;
    check_dims(s.num_classes, ds.num_classes())?;
    if ds.num_levels() != s.num_levels {
        return Err(Error::invalid(format!(
            "data has {} levels but the student expects {}",
            ds.num_levels(),
            s.num_levels
        )));
    }
    Ok(())
}

/// Scheduled distillation. With `teacher = None` this is plain supervised
/// training: alpha is pinned to 0 and no teacher term is computed.
pub fn train_student_scheduled(
    mut student: LdcModel,
    teacher: Option<&LogitCache>,
    train: &QuantizedDataset,
    test: Option<&QuantizedDataset>,
    plan: &CurriculumPlan,
    schedule: &AlphaSchedule,
    cfg: &TrainConfig,
) -> Result<(LdcModel, Vec<MetricsRow>)> {
    cfg.validate()?;
    schedule.validate()?;
    check_compatible(&student, train)?;
    if let Some(t) = test {
        check_compatible(&student, t)?;
    }
    check_dims(train.len(), plan.len())?;
    if plan.total_epochs() != cfg.epochs {
        return Err(Error::invalid(format!(
            "plan covers {} epochs but training runs {}",
            plan.total_epochs(),
            cfg.epochs
        )));
    }
    if let Some(cache) = teacher {
        cache.check(train.fingerprint(), train.len())?;
        check_dims(train.num_classes(), cache.num_classes())?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AlphaState::new(schedule, cfg.epochs);
    let mut grads = student.zero_grads();
    let mut scratch = student.scratch();
    let mut order: Vec<usize> = Vec::with_capacity(train.len());
    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let alpha = match teacher {
            Some(_) => alpha_at(schedule, epoch, &mut state)?,
            None => 0.0,
        };
        order.clear();
        match cfg.curriculum_mode {
            CurriculumMode::StagedPools => {
                order.extend_from_slice(plan.pool(plan.phase_of(epoch)));
                order.shuffle(&mut rng);
            }
            CurriculumMode::SortedFull => order.extend_from_slice(&plan.permutation),
        }
        let lr = cfg.lr.lr_at(epoch);
        let (mut kd_sum, mut nll_sum, mut correct) = (0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let ctx = student.batch_context();
            grads.zero();
            let batch_alpha = match teacher {
                Some(_) => state.current(schedule),
                None => 0.0,
            };
            let distill = DistillConfig::new(batch_alpha, cfg.temperature)?;
            let (mut raw_kd, mut raw_nll) = (0.0, 0.0);
            for &i in batch {
                let x = train.row(i);
                let y = train.labels()[i];
                student.forward_ctx(&ctx, x, &mut scratch);
                correct += (argmax(&scratch.logits) == y) as usize;
                let (grad, kd_part, nll_part) = match teacher {
                    Some(cache) => {
                        let t = combined_loss(&scratch.logits, cache.get(i), y, &distill)?;
                        raw_kd += t.kd;
                        raw_nll += t.nll;
                        (t.grad, batch_alpha * t.kd, (1.0 - batch_alpha) * t.nll)
                    }
                    None => {
                        let (nll, g) = nll_loss(&scratch.logits, y)?;
                        raw_nll += nll;
                        (g, 0.0, nll)
                    }
                };
                kd_sum += kd_part;
                nll_sum += nll_part;
                student.backward_ctx(&ctx, x, &grad, &mut scratch, &mut grads);
            }
            student.apply_grads(&ctx, &grads, lr / batch.len() as f64)?;
            let n = batch.len() as f64;
            state.learn(schedule, raw_kd / n, raw_nll / n);
        }
        let visited = order.len() as f64;
        let (kd_term, nll_term) = (kd_sum / visited, nll_sum / visited);
        if !(kd_term + nll_term).is_finite() {
            return Err(Error::Numeric(format!("training loss diverged at epoch {epoch}")));
        }
        let test_acc = match test {
            Some(t) => packed_accuracy(&student.export_inference(), t)?,
            None => f64::NAN,
        };
        metrics.push(MetricsRow {
            epoch,
            alpha,
            pool_size: order.len(),
            train_loss: kd_term + nll_term,
            kd_term,
            nll_term,
            train_acc: correct as f64 / visited,
            test_acc,
        });
    }
    Ok((student, metrics))
}

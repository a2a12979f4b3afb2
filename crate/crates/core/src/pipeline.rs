//! End-to-end runs: data, teacher, ranking, scheduled distillation, export,
//! evaluation and the files they leave behind.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{DataSource, RunConfig};
use crate::cost::{report_csv, ArchSpec};
use crate::data::{digest_u64, load_dataset, split, synth_generate, Dataset, QuantSpec, QuantizedDataset};
use crate::distill::{
    packed_accuracy, score_difficulty, train_student_scheduled, AlphaMode, AlphaSchedule, CurriculumPlan,
    MetricsRow, OrderMode, RankingSource,
};
use crate::error::{check_dims, Error, Result};
use crate::ldc::{LdcModel, PackedLdcModel};
use crate::teacher::{build_teacher, teacher_logits, teacher_loss_scores, train_teacher, LogitCache, TeacherModel};

pub const METRICS_HEADER: &str = "epoch,alpha,pool_size,train_loss,kd_term,nll_term,train_acc,test_acc";

/// Derives the seed of one pipeline stage from the root seed.
pub fn stage_seed(root: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(stage.as_bytes());
    digest_u64(h)
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        e @ Error::Stage { .. } => e,
        e => Error::Stage {
            stage: name,
            source: Box::new(e),
        },
    })
}

/// Loads or generates the full dataset.
pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.source {
        DataSource::Synth => {
            let mut synth = cfg.synth.clone();
            synth.seed = stage_seed(cfg.seed, "data");
            synth_generate(&synth)
        }
        DataSource::Csv => {
            let path = cfg
                .data_path
                .as_ref()
                .ok_or_else(|| Error::config("data.path", None, "required when data.source = csv"))?;
            load_dataset(path, cfg.data_classes)
        }
    }
}

/// Everything upstream of the student that many runs can share: the split,
/// its quantization, the teacher's logits and the difficulty scores.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub train: Dataset,
    pub test: Dataset,
    pub qtrain: QuantizedDataset,
    pub qtest: QuantizedDataset,
    pub teacher: Option<TeacherModel>,
    pub teacher_cache: Option<LogitCache>,
    pub teacher_test_acc: Option<f64>,
    pub student_scores: Option<Vec<f64>>,
    pub teacher_scores: Option<Vec<f64>>,
}

/// Data, split and quantization only.
pub fn prepare_data(cfg: &RunConfig) -> Result<(Dataset, Dataset, QuantizedDataset, QuantizedDataset)> {
    cfg.validate()?;
    let full = stage("data", load_data(cfg))?;
    let (mut train, mut test) = stage("split", split(&full, cfg.train_fraction, stage_seed(cfg.seed, "split")))?;
    train.name = "train".into();
    test.name = "test".into();
    let spec = stage("quantize", QuantSpec::fit(&train, cfg.levels))?;
    let qtrain = stage("quantize", spec.apply(&train))?;
    let qtest = stage("quantize", spec.apply(&test))?;
    Ok((train, test, qtrain, qtest))
}

/// Fingerprint the teacher will have once trained on `train`; lets a cached
/// logit file be validated without retraining.
pub fn expected_teacher_fingerprint(cfg: &RunConfig, train: &Dataset) -> Result<u64> {
    let tcfg = cfg.teacher_config(train.num_features(), train.num_classes(), stage_seed(cfg.seed, "teacher"));
    let mut model = build_teacher(&tcfg)?;
    model.trained_on = train.fingerprint();
    Ok(model.fingerprint())
}

pub fn train_teacher_stage(cfg: &RunConfig, train: &Dataset) -> Result<(TeacherModel, LogitCache)> {
    let tcfg = cfg.teacher_config(train.num_features(), train.num_classes(), stage_seed(cfg.seed, "teacher"));
    let (model, _) = stage("teacher", build_teacher(&tcfg).and_then(|m| train_teacher(m, train)))?;
    let cache = stage("teacher", teacher_logits(&model, train))?;
    Ok((model, cache))
}

/// Loss of a no-distillation reference student trained on the train split.
pub fn student_loss_scores(cfg: &RunConfig, qtrain: &QuantizedDataset) -> Result<Vec<f64>> {
    let mut rcfg = cfg.clone();
    rcfg.epochs = cfg.rank_epochs;
    rcfg.phase_epochs = None;
    rcfg.schedule = AlphaSchedule {
        mode: AlphaMode::Static,
        alpha0: 0.0,
        ..AlphaSchedule::default()
    };
    let seed = stage_seed(cfg.seed, "rank");
    let reference = LdcModel::new(
        rcfg.ldc_config(qtrain.num_features(), qtrain.num_classes()),
        &mut ChaCha8Rng::seed_from_u64(seed),
    )?;
    let zeros = vec![0.0; qtrain.len()];
    let plan = CurriculumPlan::from_scores(zeros, OrderMode::Random, [1.0; 3], rcfg.epochs, None, seed)?;
    let train_cfg = rcfg.train_config(stage_seed(seed, "shuffle"));
    let (reference, _) = train_student_scheduled(reference, None, qtrain, None, &plan, &rcfg.schedule, &train_cfg)?;
    score_difficulty(&reference, qtrain)
}

impl Experiment {
    /// Data, teacher (reusing `cached` logits when given) and the ranking the
    /// config asks for.
    pub fn prepare(cfg: &RunConfig, cached: Option<LogitCache>) -> Result<Self> {
        let (train, test, qtrain, qtest) = prepare_data(cfg)?;
        let mut exp = Experiment {
            train,
            test,
            qtrain,
            qtest,
            teacher: None,
            teacher_cache: None,
            teacher_test_acc: None,
            student_scores: None,
            teacher_scores: None,
        };
        if cfg.teacher_enabled {
            match cached {
                Some(cache) => {
                    stage("teacher", cache.check(exp.train.fingerprint(), exp.train.len()))?;
                    let expect = expected_teacher_fingerprint(cfg, &exp.train)?;
                    stage("teacher", cache.check_teacher(expect))?;
                    exp.teacher_cache = Some(cache);
                }
                None => {
                    let (model, cache) = train_teacher_stage(cfg, &exp.train)?;
                    exp.teacher_test_acc = Some(stage("teacher", model.accuracy(&exp.test))?);
                    exp.teacher = Some(model);
                    exp.teacher_cache = Some(cache);
                }
            }
        }
        exp.ensure_scores(cfg)?;
        Ok(exp)
    }

    /// Computes the difficulty scores `cfg` needs if they are missing.
    /// Random order needs none.
    pub fn ensure_scores(&mut self, cfg: &RunConfig) -> Result<()> {
        if cfg.order == OrderMode::Random {
            return Ok(());
        }
        match cfg.ranking_source {
            RankingSource::StudentLoss if self.student_scores.is_none() => {
                self.student_scores = Some(stage("rank", student_loss_scores(cfg, &self.qtrain))?);
            }
            RankingSource::TeacherLoss if self.teacher_scores.is_none() => {
                let cache = self
                    .teacher_cache
                    .as_ref()
                    .ok_or_else(|| Error::config("ranking_source", None, "teacher_loss needs a teacher"))?;
                self.teacher_scores = Some(stage("rank", teacher_loss_scores(cache, &self.train))?);
            }
            _ => {}
        }
        Ok(())
    }

    pub fn scores(&self, cfg: &RunConfig) -> Result<Vec<f64>> {
        if cfg.order == OrderMode::Random {
            return Ok(vec![0.0; self.qtrain.len()]);
        }
        let s = match cfg.ranking_source {
            RankingSource::StudentLoss => &self.student_scores,
            RankingSource::TeacherLoss => &self.teacher_scores,
        };
        s.clone()
            .ok_or_else(|| Error::invalid(format!("{} scores were not computed", cfg.ranking_source.name())))
    }
}

#[derive(Clone, Debug)]
pub struct StudentRun {
    pub model: LdcModel,
    pub packed: PackedLdcModel,
    pub metrics: Vec<MetricsRow>,
    pub plan: CurriculumPlan,
    /// Packed-model accuracy on the test split.
    pub test_acc: f64,
}

/// Ranking, pools, scheduled distillation, export and evaluation on top of a
/// prepared experiment. With the teacher disabled this is the plain
/// supervised LDC baseline.
pub fn run_student(cfg: &RunConfig, exp: &Experiment) -> Result<StudentRun> {
    cfg.validate()?;
    let scores = stage("rank", exp.scores(cfg))?;
    let plan = stage(
        "pools",
        CurriculumPlan::from_scores(
            scores,
            cfg.order,
            cfg.pool_fractions,
            cfg.epochs,
            cfg.phase_epochs,
            stage_seed(cfg.seed, "order"),
        ),
    )?;
    let student = stage(
        "distill",
        LdcModel::new(
            cfg.ldc_config(exp.qtrain.num_features(), exp.qtrain.num_classes()),
            &mut ChaCha8Rng::seed_from_u64(stage_seed(cfg.seed, "student")),
        ),
    )?;
    let teacher = if cfg.teacher_enabled {
        Some(
            exp.teacher_cache
                .as_ref()
                .ok_or_else(|| Error::invalid("experiment has no teacher logits"))?,
        )
    } else {
        None
    };
    let (model, metrics) = stage(
        "distill",
        train_student_scheduled(
            student,
            teacher,
            &exp.qtrain,
            Some(&exp.qtest),
            &plan,
            &cfg.schedule,
            &cfg.train_config(stage_seed(cfg.seed, "shuffle")),
        ),
    )?;
    let packed = model.export_inference();
    let test_acc = stage("eval", packed_accuracy(&packed, &exp.qtest))?;
    Ok(StudentRun {
        model,
        packed,
        metrics,
        plan,
        test_acc,
    })
}

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn metrics_line(out: &mut String, prefix: Option<&str>, r: &MetricsRow) {
    if let Some(p) = prefix {
        out.push_str(p);
        out.push(',');
    }
    writeln!(
        out,
        "{},{},{},{},{},{},{},{}",
        r.epoch,
        fmt_f(r.alpha),
        r.pool_size,
        fmt_f(r.train_loss),
        fmt_f(r.kd_term),
        fmt_f(r.nll_term),
        fmt_f(r.train_acc),
        fmt_f(r.test_acc)
    )
    .unwrap();
}

/// Metrics CSV with floats at 17 significant digits.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for r in rows {
        metrics_line(&mut out, None, r);
    }
    out
}

pub fn scores_csv(scores: &[f64], permutation: &[usize]) -> String {
    let mut rank = vec![0usize; scores.len()];
    for (pos, &i) in permutation.iter().enumerate() {
        rank[i] = pos;
    }
    let mut out = String::from("index,score,rank\n");
    for (i, s) in scores.iter().enumerate() {
        writeln!(out, "{i},{},{}", fmt_f(*s), rank[i]).unwrap();
    }
    out
}

/// Cost rows for the configured student next to the reference architectures.
pub fn cost_specs(cfg: &RunConfig, num_features: usize, num_classes: usize) -> Vec<(String, ArchSpec)> {
    let shape = cfg.ldc_config(num_features, num_classes).shape;
    let mut teacher_dims = vec![num_features];
    teacher_dims.extend(&cfg.teacher_hidden);
    teacher_dims.push(num_classes);
    let binary = vec![true; teacher_dims.len() - 1];
    vec![
        ("ldc".into(), ArchSpec::LdcPacked(shape)),
        (
            "hdc_d4000".into(),
            ArchSpec::HdcProfile {
                num_features,
                dim: 4000,
                num_classes,
            },
        ),
        (
            "teacher_mlp".into(),
            ArchSpec::FloatMlp {
                layer_dims: teacher_dims.clone(),
            },
        ),
        (
            "binarized_mlp".into(),
            ArchSpec::BinarizedMlp {
                layer_dims: teacher_dims,
                binary,
            },
        ),
    ]
}

/// Tracks written files so a failed run leaves nothing half-done behind.
pub struct ArtifactWriter {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl ArtifactWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf> {
        let path = self.path(name);
        fs::write(&path, bytes)?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn rollback(self) {
        for p in self.written {
            let _ = fs::remove_file(p);
        }
    }

    pub fn finish(self) -> Vec<PathBuf> {
        self.written
    }
}

/// Runs `body` with a writer into `dir`, deleting everything it wrote if it
/// fails.
pub fn with_artifacts<T>(dir: &Path, body: impl FnOnce(&mut ArtifactWriter) -> Result<T>) -> Result<T> {
    let mut w = ArtifactWriter::new(dir)?;
    match body(&mut w) {
        Ok(v) => {
            w.finish();
            Ok(v)
        }
        Err(e) => {
            w.rollback();
            Err(e)
        }
    }
}

pub const TEACHER_CACHE_FILE: &str = "teacher.lgt";

#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub run: StudentRun,
    pub teacher_test_acc: Option<f64>,
}

/// The logit cache in `out`, if the config wants a teacher and one is there.
/// It is validated later, against the data it is used with.
pub fn cached_teacher(cfg: &RunConfig, out: &Path) -> Result<Option<LogitCache>> {
    let path = out.join(TEACHER_CACHE_FILE);
    if cfg.teacher_enabled && path.exists() {
        Ok(Some(stage("teacher", LogitCache::load(&path))?))
    } else {
        Ok(None)
    }
}

/// Full pipeline. Reuses `teacher.lgt` from `out` when present; a cache that
/// does not match the configured data or teacher is a hard error.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<PipelineOutput> {
    cfg.validate()?;
    let cached = cached_teacher(cfg, out)?;
    let reused = cached.is_some();
    with_artifacts(out, |w| {
        let exp = Experiment::prepare(cfg, cached)?;
        let run = run_student(cfg, &exp)?;
        w.write("config.txt", cfg.to_text())?;
        w.write("quant.csv", exp.qtrain.spec().to_csv())?;
        w.write("test.csv", exp.test.to_csv())?;
        if let (Some(cache), false) = (&exp.teacher_cache, reused) {
            let mut buf = Vec::new();
            cache.write_to(&mut buf)?;
            w.write(TEACHER_CACHE_FILE, buf)?;
        }
        if cfg.order != OrderMode::Random {
            w.write("scores.csv", scores_csv(&run.plan.scores, &run.plan.permutation))?;
        }
        w.write("metrics.csv", metrics_csv(&run.metrics))?;
        w.write("model.ldc", run.packed.to_bytes())?;
        let specs = cost_specs(cfg, exp.qtrain.num_features(), exp.qtrain.num_classes());
        w.write("cost.csv", report_csv(&specs)?)?;
        Ok(PipelineOutput {
            run,
            teacher_test_acc: exp.teacher_test_acc,
        })
    })
}

/// Accuracy of a saved model on a CSV dataset quantized with a saved spec.
pub fn evaluate_files(model: &Path, data: &Path, quant: &Path) -> Result<f64> {
    let packed = stage("eval", PackedLdcModel::load(model))?;
    let spec = stage("eval", QuantSpec::parse_csv(&fs::read_to_string(quant)?))?;
    let ds = stage("eval", load_dataset(data, packed.shape().num_classes))?;
    let q = stage("eval", spec.apply(&ds))?;
    stage("eval", packed_accuracy(&packed, &q))
}

/// Key of the shared, mode-independent part of a run: everything except the
/// schedule, ordering and pool settings.
pub fn preparation_key(cfg: &RunConfig) -> u64 {
    let mut base = cfg.clone();
    base.schedule = AlphaSchedule::default();
    base.order = OrderMode::Curriculum;
    base.pool_fractions = [1.0; 3];
    base.phase_epochs = None;
    base.tau = 1.0;
    let mut h = Sha256::new();
    h.update(base.to_text().as_bytes());
    digest_u64(h)
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub value: String,
    pub test_acc: f64,
    pub metrics: Vec<MetricsRow>,
}

/// One run per value of `axis`, each into `out/<axis>=<value>`, sharing data
/// and teacher work whenever the axis leaves them unchanged. Writes
/// `out/sweep.csv` with the axis as the leading column.
pub fn sweep(cfg: &RunConfig, axis: &str, values: &[String], out: &Path) -> Result<Vec<SweepResult>> {
    if cfg.get(axis).is_none() || axis == "profile" {
        return Err(Error::config(axis, None, "not a sweepable key"));
    }
    if values.is_empty() {
        return Err(Error::config(axis, None, "no sweep values"));
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        c.set(axis, v)?;
        c.validate()?;
        configs.push(c);
    }
    with_artifacts(out, |w| {
        let mut shared: Option<(u64, Experiment)> = None;
        let mut results = Vec::new();
        let mut csv = format!("{axis},{METRICS_HEADER}\n");
        for (c, v) in configs.iter().zip(values) {
            let key = preparation_key(c);
            if shared.as_ref().map(|(k, _)| *k) != Some(key) {
                shared = Some((key, Experiment::prepare(c, None)?));
            }
            let exp = &mut shared.as_mut().unwrap().1;
            exp.ensure_scores(c)?;
            let run = run_student(c, exp)?;
            let sub = w.path(&format!("{axis}={v}"));
            fs::create_dir_all(&sub)?;
            w.write(&format!("{axis}={v}/metrics.csv"), metrics_csv(&run.metrics))?;
            w.write(&format!("{axis}={v}/model.ldc"), run.packed.to_bytes())?;
            for r in &run.metrics {
                metrics_line(&mut csv, Some(v), r);
            }
            results.push(SweepResult {
                value: v.clone(),
                test_acc: run.test_acc,
                metrics: run.metrics,
            });
        }
        w.write("sweep.csv", csv)?;
        Ok(results)
    })
}

/// Fraction of the hardest `ceil(q * I)` samples under one ranking that are
/// also among the hardest under the other.
pub fn rank_overlap(teacher_scores: &[f64], student_scores: &[f64], q: f64) -> Result<f64> {
    check_dims(teacher_scores.len(), student_scores.len())?;
    if teacher_scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if !(q > 0.0 && q <= 1.0) {
        return Err(Error::invalid(format!("q must lie in (0, 1], got {q}")));
    }
    let n = teacher_scores.len();
    let top = ((q * n as f64).ceil() as usize).min(n);
    let hardest = |s: &[f64]| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        let mut mark = vec![false; n];
        for &i in &idx[..top] {
            mark[i] = true;
        }
        mark
    };
    let a = hardest(teacher_scores);
    let b = hardest(student_scores);
    let both = a.iter().zip(&b).filter(|(x, y)| **x && **y).count();
    Ok(both as f64 / top as f64)
}

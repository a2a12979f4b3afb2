//! `schedkd`: drives the scheduled distillation pipeline stage by stage.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or file
//! error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use schedkd::config::{parse_config, DataSource, RunConfig};
use schedkd::cost::{report_csv, report_table};
use schedkd::data::load_dataset;
use schedkd::distill::{order_dataset, OrderMode, RankingSource};
use schedkd::pipeline::{
    cached_teacher, evaluate_files, load_data, rank_overlap, run_pipeline, scores_csv, stage_seed, sweep,
    Experiment, TEACHER_CACHE_FILE,
};
use schedkd::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "schedkd", version, about = "Scheduled knowledge distillation into LDC classifiers")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Run configuration ("key = value" lines). Defaults apply without it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "schedkd-out")]
    out: PathBuf,
    /// Alpha schedule: static, linear, exponential or parameterized.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Data order: curriculum, random or anti.
    #[arg(long, global = true)]
    order: Option<String>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or load) the dataset and write it as CSV.
    GenData,
    /// Train the teacher and cache its logits on the training split.
    TrainTeacher,
    /// Score training samples by difficulty and write their ranking.
    Rank {
        /// Also report the teacher/student hardest-set overlap at these fractions.
        #[arg(long, value_delimiter = ',')]
        overlap: Vec<f64>,
    },
    /// Full run: teacher, ranking, scheduled distillation, export and evaluation.
    Distill,
    /// Accuracy of a saved model on a CSV dataset.
    Eval {
        /// Model file; defaults to OUT/model.ldc.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Dataset CSV; defaults to OUT/test.csv.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Quantization spec; defaults to OUT/quant.csv.
        #[arg(long)]
        quant: Option<PathBuf>,
    },
    /// Operation counts and model sizes of the student and reference models.
    Cost {
        /// Print CSV instead of a table.
        #[arg(long)]
        csv: bool,
    },
    /// One full run per value of a config key.
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
}

fn load_config(c: &Common) -> Result<RunConfig, Error> {
    let mut cfg = match &c.config {
        Some(path) => parse_config(path)?,
        None => RunConfig::default(),
    };
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    if let Some(m) = &c.mode {
        cfg.set("mode", m)?;
    }
    if let Some(o) = &c.order {
        cfg.set("order", o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli.common)?;
    let out = &cli.common.out;
    match cli.command {
        Command::GenData => {
            let ds = load_data(&cfg)?;
            let path = out.join("data.csv");
            write(&path, ds.to_csv())?;
            println!("wrote {} samples ({} features, {} classes) to {}", ds.len(), ds.num_features(), ds.num_classes(), path.display());
        }
        Command::TrainTeacher => {
            if !cfg.teacher_enabled {
                return Err(Error::InvalidArgument("teacher.enabled is false".into()));
            }
            let exp = Experiment::prepare(&RunConfig { order: OrderMode::Random, ..cfg }, None)?;
            let cache = exp.teacher_cache.as_ref().expect("teacher enabled");
            let mut buf = Vec::new();
            cache.write_to(&mut buf)?;
            let path = out.join(TEACHER_CACHE_FILE);
            write(&path, buf)?;
            if let Some(acc) = exp.teacher_test_acc {
                println!("teacher test accuracy {acc:.6}");
            }
            println!("wrote {}", path.display());
        }
        Command::Rank { overlap } => {
            let mut cfg = cfg;
            if cfg.order == OrderMode::Random {
                cfg.order = OrderMode::Curriculum;
            }
            let mut exp = Experiment::prepare(&cfg, cached_teacher(&cfg, out)?)?;
            let scores = exp.scores(&cfg)?;
            let perm = order_dataset(&scores, cfg.order, stage_seed(cfg.seed, "order"));
            let path = out.join("scores.csv");
            write(&path, scores_csv(&scores, &perm))?;
            println!("wrote {} {} scores to {}", scores.len(), cfg.ranking_source.name(), path.display());
            if !overlap.is_empty() {
                let mut both = cfg.clone();
                both.ranking_source = RankingSource::StudentLoss;
                exp.ensure_scores(&both)?;
                both.ranking_source = RankingSource::TeacherLoss;
                exp.ensure_scores(&both)?;
                let t = exp.teacher_scores.as_deref().expect("computed above");
                let s = exp.student_scores.as_deref().expect("computed above");
                for q in overlap {
                    println!("overlap q={q} {:.6}", rank_overlap(t, s, q)?);
                }
            }
        }
        Command::Distill => {
            let res = run_pipeline(&cfg, out)?;
            if let Some(acc) = res.teacher_test_acc {
                println!("teacher test accuracy {acc:.6}");
            }
            println!("student test accuracy {:.6}", res.run.test_acc);
            println!("artifacts in {}", out.display());
        }
        Command::Eval { model, data, quant } => {
            let model = model.unwrap_or_else(|| out.join("model.ldc"));
            let data = data.unwrap_or_else(|| out.join("test.csv"));
            let quant = quant.unwrap_or_else(|| out.join("quant.csv"));
            println!("{:.6}", evaluate_files(&model, &data, &quant)?);
        }
        Command::Cost { csv } => {
            let (n, c) = match cfg.source {
                DataSource::Synth => (cfg.synth.num_features, cfg.synth.num_classes),
                DataSource::Csv => {
                    let ds = load_dataset(cfg.data_path.as_ref().expect("validated"), cfg.data_classes)?;
                    (ds.num_features(), ds.num_classes())
                }
            };
            let specs = schedkd::pipeline::cost_specs(&cfg, n, c);
            if csv {
                print!("{}", report_csv(&specs)?);
            } else {
                print!("{}", report_table(&specs)?);
            }
        }
        Command::Sweep { axis, values } => {
            for r in sweep(&cfg, &axis, &values, out)? {
                println!("{axis}={} test accuracy {:.6}", r.value, r.test_acc);
            }
            println!("wrote {}", out.join("sweep.csv").display());
        }
    }
    Ok(())
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}

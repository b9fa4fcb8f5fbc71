//! `demorph`: corpus generation, training, evaluation, calibration, MAP
//! tables and plots for the toy demorphing pipeline.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use demorph_core::backends::Backends;
use demorph_core::config::RunConfig;
use demorph_core::dmad::{calibrate_threshold, read_scores, scores_csv, Detector, Threshold};
use demorph_core::evaluation::{evaluate_corpus, metric_rows, parse_scenarios, Evaluated};
use demorph_core::metrics::{map_matrix, metrics_csv};
use demorph_core::toyworld::{build_corpus, calibrate_toy_threshold, load_corpus, write_corpus, Split, ToyWorld};
use demorph_core::training::{load_model, run_training, TrainingSet};
use demorph_core::util::{fmt_f64, write_atomic};
use demorph_core::Error;

const SCORES_FILE: &str = "scores.csv";
const BASELINE_SCORES_FILE: &str = "scores_no_demorph.csv";
const METRICS_FILE: &str = "metrics.csv";
const THRESHOLDS_FILE: &str = "thresholds.csv";
const MAP_FILE: &str = "map.csv";

#[derive(Parser)]
#[command(name = "demorph", version, about = "Face demorphing and differential morph detection on a toy world")]
struct Cli {
    /// `key = value` configuration file; toy defaults otherwise.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for `plot`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render identities, build morphs and write the corpus manifest.
    GenCorpus,
    /// Train the demorpher on a corpus.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a corpus split with a checkpoint and the no-demorph baseline.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// accomplice, criminal, bonafide or all
        #[arg(long, default_value = "all")]
        scenario: String,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Calibrate the verification threshold at a target false match rate.
    Calibrate {
        /// Corpus whose document/live comparisons are used.
        #[arg(long, conflicts_with = "scores", required_unless_present = "scores")]
        corpus: Option<PathBuf>,
        /// CSV with `label,score` rows, label `mated` or `nonmated`.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long, default_value_t = 0.001)]
        target_fmr: f64,
    },
    /// Morphing attack potential table from the corpus verification outcomes.
    Map {
        #[arg(long)]
        corpus: PathBuf,
        /// Largest attempt count `r` tabulated.
        #[arg(long, default_value_t = 1)]
        max_r: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
    /// DET curve or score histogram as SVG.
    Plot {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long, value_enum)]
        kind: PlotKind,
        /// Threshold marker; read from a sidecar file.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum PlotKind {
    Det,
    Histogram,
}

/// 0 success, 2 configuration or usage, 3 I/O or malformed input files,
/// 4 state mismatch, 1 anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::UnknownKind(_)
        | Error::RangeError(_)
        | Error::EmptyScoreSet(_)
        | Error::EmptyDataset(_)
        | Error::InsufficientIdentities { .. }
        | Error::TooSmallForScales { .. }
        | Error::WeightsPassMismatch(_)
        | Error::ScenarioNotApplicable(_) => 2,
        Error::Io(_) | Error::Json(_) | Error::Decode(_) | Error::Checkpoint(_) | Error::Parse(_) => 3,
        Error::DigestMismatch { .. } | Error::StateMismatch(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("SFDM_NUM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // Fails only if a pool already exists, which cannot happen this early.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>, Error> {
    let Some(path) = &cli.config else { return Ok(None) };
    let text = fs::read_to_string(path)?;
    Ok(Some(RunConfig::parse(&text)?))
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn write(path: &Path, text: &str) -> Result<(), Error> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn splits(s: SplitArg) -> Vec<Split> {
    match s {
        SplitArg::Train => vec![Split::Train],
        SplitArg::Test => vec![Split::Test],
        SplitArg::All => vec![Split::Train, Split::Test],
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenCorpus => {
            let mut cfg = cfg.unwrap_or_else(RunConfig::toy);
            if let Some(s) = cli.seed {
                cfg.reseed(s);
            }
            cfg.validate()?;
            let world = ToyWorld::new(Backends::toy(&cfg.backend)?, cfg.corpus.id_dim)?;
            let corpus = build_corpus(&cfg.corpus, &world)?;
            let dir = out_dir(&cli, "corpus");
            write_corpus(&corpus, &cfg, &dir)?;
            write(&dir.join(THRESHOLDS_FILE), &corpus.thresholds[0].to_csv())?;
            println!(
                "{} identities, {} morphs ({} accepted), tau {}",
                corpus.identities.len(),
                corpus.morphs.len(),
                corpus.morphs.iter().filter(|m| m.accepted).count(),
                fmt_f64(corpus.tau())
            );
        }
        Command::Train { corpus, resume } => {
            let (corpus_cfg, corpus) = load_corpus(corpus)?;
            let mut cfg = cfg.unwrap_or(corpus_cfg.clone());
            if let Some(s) = cli.seed {
                // Only the training-side seeds; the backends belong to the corpus.
                let mut seeded = cfg.clone();
                seeded.reseed(s);
                cfg.model.seed = seeded.model.seed;
                cfg.train.seed = seeded.train.seed;
            }
            if cfg.backend != corpus_cfg.backend {
                return Err(Error::StateMismatch("backend configuration differs from the corpus manifest".into()));
            }
            let backends = Backends::toy(&cfg.backend)?;
            let set = TrainingSet::from_corpus(&corpus)?;
            let dir = out_dir(&cli, "run");
            let state = run_training(&cfg, &backends, &set, &dir, resume.as_deref())?;
            println!("trained to step {}", state.step);
        }
        Command::Evaluate { checkpoint, corpus, scenario, split } => {
            let (model_cfg, model) = load_model(checkpoint)?;
            let (corpus_cfg, corpus) = load_corpus(corpus)?;
            if model_cfg.backend != corpus_cfg.backend {
                return Err(Error::StateMismatch("checkpoint and corpus use different backends".into()));
            }
            let backends = Backends::toy(&model_cfg.backend)?;
            let scenarios = parse_scenarios(scenario).map_err(|e| Error::Config(e.to_string()))?;
            let tau = corpus.tau();
            let mut rows = Vec::new();
            let dir = out_dir(&cli, "eval");
            for (detector, file) in [(Detector::Model(&model), SCORES_FILE), (Detector::NoDemorph, BASELINE_SCORES_FILE)] {
                let mut evaluated: Vec<Evaluated> = Vec::new();
                for sp in splits(*split) {
                    evaluated.extend(evaluate_corpus(&corpus, sp, &scenarios, detector, &backends)?);
                }
                let records: Vec<_> = evaluated.iter().map(|e| e.record.clone()).collect();
                write(&dir.join(file), &scores_csv(&records))?;
                rows.extend(metric_rows("toy", &evaluated, &scenarios, &corpus.config.methods, tau)?);
            }
            write(&dir.join(METRICS_FILE), &metrics_csv(&rows))?;
            write(&dir.join(THRESHOLDS_FILE), &corpus.thresholds[0].to_csv())?;
            println!("{} metric rows at tau {}", rows.len(), fmt_f64(tau));
        }
        Command::Calibrate { corpus, scores, target_fmr } => {
            let threshold = match (corpus, scores) {
                (Some(dir), _) => {
                    let (corpus_cfg, corpus) = load_corpus(dir)?;
                    let backends = Backends::toy(&corpus_cfg.backend)?;
                    calibrate_toy_threshold(&corpus.identities, backends.frs.as_ref(), *target_fmr)?
                }
                (None, Some(path)) => {
                    let (mated, nonmated) = read_comparisons(path)?;
                    calibrate_threshold(&mated, &nonmated, *target_fmr, "scores")?
                }
                (None, None) => unreachable!("clap requires one source"),
            };
            write(&out_dir(&cli, ".").join(THRESHOLDS_FILE), &threshold.to_csv())?;
            println!(
                "tau {} tmr {} fmr {}",
                fmt_f64(threshold.tau),
                fmt_f64(threshold.achieved_tmr),
                fmt_f64(threshold.achieved_fmr)
            );
        }
        Command::Map { corpus, max_r, split } => {
            let (_, corpus) = load_corpus(corpus)?;
            if *max_r == 0 {
                return Err(Error::Config("--max-r must be positive".into()));
            }
            let mut outcomes = Vec::new();
            for sp in splits(*split) {
                outcomes.extend(corpus.map_outcomes(Some(sp)));
            }
            let n_frs = corpus.thresholds.len();
            let table = map_matrix(&outcomes, *max_r, n_frs)?;
            let mut text = String::from("r,c,value\n");
            for r in 1..=*max_r {
                for c in 1..=n_frs {
                    text.push_str(&format!("{r},{c},{}\n", fmt_f64(table.get(r, c))));
                }
            }
            write(&out_dir(&cli, ".").join(MAP_FILE), &text)?;
        }
        Command::Plot { scores, kind, thresholds } => {
            let records = read_scores(scores)?;
            let tau = match thresholds {
                Some(p) => Some(Threshold::from_csv(&fs::read_to_string(p)?, "sidecar")?.tau),
                None => None,
            };
            let default = match kind {
                PlotKind::Det => "det.svg",
                PlotKind::Histogram => "histogram.svg",
            };
            let path = cli.out.clone().unwrap_or_else(|| PathBuf::from(default));
            let svg = match kind {
                PlotKind::Det => plot::det(&records)?,
                PlotKind::Histogram => plot::histogram(&records, tau)?,
            };
            write(&path, &svg)?;
        }
    }
    Ok(())
}

/// Reads `label,score` rows with labels `mated` / `nonmated`.
fn read_comparisons(path: &Path) -> Result<(Vec<f64>, Vec<f64>), Error> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("label,score") {
        return Err(Error::Parse("expected header 'label,score'".into()));
    }
    let (mut mated, mut nonmated) = (Vec::new(), Vec::new());
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let (label, score) = line.split_once(',').ok_or_else(|| Error::Parse(format!("bad row '{line}'")))?;
        let s: f64 = score.trim().parse().map_err(|_| Error::Parse(format!("bad score '{score}'")))?;
        match label.trim() {
            "mated" => mated.push(s),
            "nonmated" => nonmated.push(s),
            other => return Err(Error::Parse(format!("unknown label '{other}'"))),
        }
    }
    Ok((mated, nonmated))
}

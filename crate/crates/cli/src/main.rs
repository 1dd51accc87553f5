//! `cac`: run the calcium-scoring pipeline stage by stage or end to end,
//! and serve the review API.
//!
//! Exit codes: 0 success, 2 finished but some studies were excluded,
//! 1 failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cac_core::cohort::{OutcomeKind, StrataSpec};
use cac_core::mask::{baseline_segment, run_external_model, write_mask_file, ExternalRunnerConfig, RoiBox};
use cac_core::pipeline::{self, Grid, PipelineConfig, SegmentMode, StageReport};
use cac_core::review::ReviewService;
use cac_core::stats::SubgroupKey;
use cac_core::store::{ScoreStore, StoreSlices};
use cac_core::synth::{write_dataset, SynthSpec};
use cac_core::volume::SelectionPolicy;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "cac", version, about = "Opportunistic coronary artery calcium scoring toolkit")]
struct Cli {
    /// Score store directory.
    #[arg(long, global = true)]
    store: Option<PathBuf>,
    /// Root seed for a new store; must match the seed of an existing one.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pipeline configuration (TOML). Command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Select one series per study directory and copy it into the store.
    Ingest {
        #[arg(long)]
        input: Option<PathBuf>,
        /// Store directory (same as --store).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Series-selection policy (TOML).
        #[arg(long)]
        policy: Option<PathBuf>,
    },
    /// Produce calcium masks for ingested studies.
    Segment(SegmentArgs),
    /// Agatston-score segmented studies, or one volume against a mask file.
    Score {
        #[arg(long, requires = "mask")]
        volume: Option<String>,
        #[arg(long, requires = "volume")]
        mask: Option<PathBuf>,
    },
    /// Extract reference scores from gated CT reports.
    ExtractReports {
        /// Newline-delimited report records.
        #[arg(long = "in")]
        input: Option<PathBuf>,
        /// Rule pack (TOML); the bundled pack when absent.
        #[arg(long)]
        rules: Option<PathBuf>,
        /// Store directory (same as --store).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pair non-gated scans with gated reports.
    Pair {
        #[arg(long)]
        scans: Option<PathBuf>,
        #[arg(long)]
        window_days: Option<i64>,
    },
    /// Split pairs into tune and test halves by center.
    Split {
        #[arg(long)]
        ratio: Option<f64>,
        /// Centers used for model training, excluded from both halves.
        #[arg(long, value_delimiter = ',')]
        train_centers: Option<Vec<String>>,
    },
    /// Agreement and threshold metrics on the test pairs.
    Evaluate {
        #[arg(long, value_delimiter = ',')]
        thresholds: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        subgroups: Option<Vec<String>>,
        #[arg(long)]
        bootstrap: Option<usize>,
        /// Also copy the reports to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build survival rows for the test patients.
    SurvivalRows {
        #[arg(long)]
        outcome: Option<OutcomeArg>,
        #[arg(long)]
        strata: Option<StrataArg>,
        #[command(flatten)]
        records: PatientFiles,
    },
    /// Kaplan-Meier curves, at-risk tables and Cox fits.
    Survival {
        #[arg(long)]
        grid: Option<GridArg>,
        /// Also copy the reports to this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// CAC bin distribution of the screening cohort.
    ScreeningReport {
        #[arg(long)]
        scans: Option<PathBuf>,
        #[command(flatten)]
        records: PatientFiles,
    },
    /// Living patients with CAC >400 not on lipid-lowering therapy.
    TherapyGap {
        #[arg(long)]
        scans: Option<PathBuf>,
        /// Days before follow-up end within which a prescription counts as active.
        #[arg(long)]
        active_window_days: Option<i64>,
        #[command(flatten)]
        records: PatientFiles,
    },
    /// Review service.
    Review {
        #[command(subcommand)]
        command: ReviewCommand,
    },
    /// Run every configured stage.
    Run,
    /// Write a synthetic example dataset and its configuration.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 48)]
        paired: usize,
        #[arg(long, default_value_t = 40)]
        screening: usize,
        /// Number of studies with truncated pixel data.
        #[arg(long, default_value_t = 0)]
        corrupt: usize,
    },
}

#[derive(Subcommand)]
enum ReviewCommand {
    /// Serve the review API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Registered reviewer ids; any non-empty id when absent.
        #[arg(long, value_delimiter = ',')]
        reviewers: Option<Vec<String>>,
    },
}

#[derive(Args)]
struct SegmentArgs {
    /// Segment a single stored study instead of running the stage.
    #[arg(long)]
    volume: Option<String>,
    /// HU-threshold segmentation; for testing only.
    #[arg(long, conflicts_with_all = ["runner", "masks"])]
    baseline: bool,
    /// Baseline region as z0,y0,x0,z1,y1,x1.
    #[arg(long, requires = "baseline")]
    roi: Option<String>,
    /// External model command line.
    #[arg(long)]
    runner: Option<String>,
    /// Directory of precomputed `<study_uid>.mask` files.
    #[arg(long)]
    masks: Option<PathBuf>,
    /// With --volume: where to write the mask (default: the store).
    #[arg(long, requires = "volume")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PatientFiles {
    #[arg(long)]
    patients: Option<PathBuf>,
    #[arg(long)]
    diagnoses: Option<PathBuf>,
    #[arg(long)]
    prescriptions: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum OutcomeArg {
    Death,
    Composite,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrataArg {
    None,
    LipidEver,
    LipidBeforeEvent,
}

#[derive(Clone, Copy, ValueEnum)]
enum GridArg {
    Yearly,
    Monthly,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

const PARTIAL: u8 = 2;

fn exit_for(excluded: usize) -> ExitCode {
    if excluded > 0 {
        ExitCode::from(PARTIAL)
    } else {
        ExitCode::SUCCESS
    }
}

struct Session {
    config: PipelineConfig,
    store_dir: Option<PathBuf>,
    seed: Option<u64>,
}

impl Session {
    fn open_store(&self, alt: Option<&Path>) -> Result<ScoreStore> {
        let dir = alt.or(self.store_dir.as_deref()).context("--store is required")?;
        ScoreStore::open(dir, self.seed.or(self.config.seed))
            .with_context(|| format!("opening store {}", dir.display()))
    }
}

fn report_stage(report: &StageReport) -> Result<ExitCode> {
    println!("{}", serde_json::to_string(report)?);
    Ok(exit_for(report.excluded))
}

fn require<'a>(value: Option<&'a PathBuf>, what: &str) -> Result<&'a PathBuf> {
    value.with_context(|| format!("no {what} given on the command line or in the config"))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    let mut ctx = Session { config, store_dir: cli.store, seed: cli.seed };
    let cfg = &mut ctx.config;

    match cli.command {
        Command::Ingest { input, out, policy } => {
            if let Some(p) = policy {
                let text = fs::read_to_string(&p).with_context(|| p.display().to_string())?;
                cfg.selection = SelectionPolicy::from_toml(&text).with_context(|| p.display().to_string())?;
            }
            let input = input.or(cfg.inputs.studies.clone());
            let input = require(input.as_ref(), "input directory")?;
            let store = ctx.open_store(out.as_deref())?;
            report_stage(&pipeline::ingest(&store, input, &ctx.config.selection)?)
        }
        Command::Segment(args) => segment(&mut ctx, args),
        Command::Score { volume, mask } => {
            let store = ctx.open_store(None)?;
            match (volume, mask) {
                (Some(volume), Some(mask)) => {
                    let score = pipeline::score_one(&store, &volume, &mask, &ctx.config.scoring)?;
                    println!("{}", serde_json::to_string(&score)?);
                    Ok(ExitCode::SUCCESS)
                }
                _ => report_stage(&pipeline::score(&store, &ctx.config.scoring)?),
            }
        }
        Command::ExtractReports { input, rules, out } => {
            let input = input.or(cfg.inputs.reports.clone());
            let input = require(input.as_ref(), "report records file")?;
            let rules = rules.or(cfg.inputs.rules.clone());
            let store = ctx.open_store(out.as_deref())?;
            report_stage(&pipeline::extract_reports(&store, input, rules.as_deref())?)
        }
        Command::Pair { scans, window_days } => {
            let scans = scans.or(cfg.inputs.scans.clone());
            let scans = require(scans.as_ref(), "scans file")?;
            let window = window_days.unwrap_or(cfg.cohort.window_days);
            let store = ctx.open_store(None)?;
            report_stage(&pipeline::pair(&store, scans, window)?)
        }
        Command::Split { ratio, train_centers } => {
            if let Some(r) = ratio {
                cfg.cohort.split_ratio = r;
            }
            if let Some(c) = train_centers {
                cfg.cohort.train_centers = c;
            }
            let store = ctx.open_store(None)?;
            let seed = store.seed_for("split")?;
            report_stage(&pipeline::split(&store, &ctx.config.cohort, seed)?)
        }
        Command::Evaluate { thresholds, subgroups, bootstrap, out } => {
            if let Some(t) = thresholds {
                cfg.evaluate.thresholds = t;
            }
            if let Some(s) = subgroups {
                cfg.evaluate.subgroups = s
                    .iter()
                    .map(|k| SubgroupKey::parse(k).with_context(|| format!("unknown subgroup {k:?}")))
                    .collect::<Result<_>>()?;
            }
            if let Some(b) = bootstrap {
                cfg.evaluate.bootstrap_iterations = b;
            }
            let store = ctx.open_store(None)?;
            let seed = store.seed_for("bootstrap")?;
            let report = pipeline::evaluate(&store, &ctx.config.evaluate, seed)?;
            copy_reports(&store, "evaluate", out.as_deref())?;
            report_stage(&report)
        }
        Command::SurvivalRows { outcome, strata, records } => {
            if let Some(o) = outcome {
                cfg.survival.outcome = match o {
                    OutcomeArg::Death => OutcomeKind::AllCauseDeath,
                    OutcomeArg::Composite => OutcomeKind::CompositeMiCvaDeath,
                };
            }
            if let Some(s) = strata {
                cfg.survival.strata = match s {
                    StrataArg::None => StrataSpec::None,
                    StrataArg::LipidEver => StrataSpec::LipidEver,
                    StrataArg::LipidBeforeEvent => StrataSpec::LipidBeforeEvent,
                };
            }
            apply_patient_files(cfg, records);
            let store = ctx.open_store(None)?;
            report_stage(&pipeline::survival_rows(&store, &ctx.config.inputs, &ctx.config.survival)?)
        }
        Command::Survival { grid, out } => {
            let grid = match grid {
                Some(GridArg::Yearly) => Grid::Yearly,
                Some(GridArg::Monthly) => Grid::Monthly,
                None => cfg.survival.grid,
            };
            let store = ctx.open_store(None)?;
            let report = pipeline::survival(&store, grid)?;
            copy_reports(&store, "survival", out.as_deref())?;
            report_stage(&report)
        }
        Command::ScreeningReport { scans, records } => {
            if scans.is_some() {
                cfg.inputs.scans = scans;
            }
            apply_patient_files(cfg, records);
            let store = ctx.open_store(None)?;
            let c = &ctx.config;
            let report = pipeline::screening(&store, &c.inputs, &c.cohort.train_centers, &c.therapy)?;
            print!("{}", fs::read_to_string(store.reports_dir().join("screening/distribution.csv"))?);
            Ok(exit_for(report.excluded))
        }
        Command::TherapyGap { scans, active_window_days, records } => {
            if scans.is_some() {
                cfg.inputs.scans = scans;
            }
            if let Some(days) = active_window_days {
                cfg.therapy.active_window_days = days;
            }
            apply_patient_files(cfg, records);
            if cfg.inputs.patients.is_none() {
                bail!("the therapy gap needs --patients (and usually --prescriptions)");
            }
            let store = ctx.open_store(None)?;
            let c = &ctx.config;
            pipeline::screening(&store, &c.inputs, &c.cohort.train_centers, &c.therapy)?;
            print!("{}", fs::read_to_string(store.reports_dir().join("screening/therapy_gap.json"))?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Review { command: ReviewCommand::Serve { port, bind, reviewers } } => {
            let store = ctx.open_store(None)?;
            serve(&store, &bind, port, reviewers)
        }
        Command::Run => {
            let store = ctx.open_store(None)?;
            let report = pipeline::run_pipeline(&store, &ctx.config)?;
            for stage in &report.stages {
                println!("{}", serde_json::to_string(stage)?);
            }
            if let Some(a) = &report.accounting {
                eprintln!("{} input studies: {} scored, {} excluded", a.input_studies, a.scored, a.excluded);
            }
            eprintln!("reports in {}", store.reports_dir().display());
            Ok(if report.has_exclusions() { ExitCode::from(PARTIAL) } else { ExitCode::SUCCESS })
        }
        Command::Synth { out, paired, screening, corrupt } => {
            let spec = SynthSpec {
                seed: ctx.seed.unwrap_or(SynthSpec::default().seed),
                paired_patients: paired,
                screening_patients: screening,
                corrupt_studies: corrupt,
                ..Default::default()
            };
            let ds = write_dataset(&out, &spec).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", ds.config.display());
            eprintln!("{} studies; run with: cac run --config {} --store <dir>", ds.study_count, ds.config.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn apply_patient_files(cfg: &mut PipelineConfig, files: PatientFiles) {
    let inputs = &mut cfg.inputs;
    for (slot, value) in [
        (&mut inputs.patients, files.patients),
        (&mut inputs.diagnoses, files.diagnoses),
        (&mut inputs.prescriptions, files.prescriptions),
    ] {
        if value.is_some() {
            *slot = value;
        }
    }
}

fn segment(ctx: &mut Session, args: SegmentArgs) -> Result<ExitCode> {
    let seg = &mut ctx.config.segment;
    if args.baseline {
        seg.mode = Some(SegmentMode::Baseline);
        seg.roi = args.roi.or(seg.roi.take());
    } else if let Some(dir) = args.masks {
        seg.mode = Some(SegmentMode::Masks);
        seg.masks_dir = Some(dir);
        seg.runner = args.runner.or(seg.runner.take());
    } else if let Some(runner) = args.runner {
        seg.mode = Some(SegmentMode::Runner);
        seg.runner = Some(runner);
    }
    let store = ctx.open_store(None)?;
    let seg = &ctx.config.segment;
    let Some(study) = args.volume else {
        return report_stage(&pipeline::segment(&store, seg)?);
    };

    let volume = store.load_volume(&study).with_context(|| format!("study {study} is not in the store"))?;
    let mask = match seg.effective_mode() {
        Some(SegmentMode::Baseline) => {
            let roi = match seg.roi.as_deref() {
                Some(text) => RoiBox::parse(text).with_context(|| format!("malformed ROI {text:?}"))?,
                None => RoiBox::whole(volume.dims),
            };
            baseline_segment(&volume, roi, seg.threshold_hu)?
        }
        Some(SegmentMode::Runner) | Some(SegmentMode::Masks) if seg.runner.is_some() => {
            let cmd = seg.runner.as_deref().unwrap_or_default();
            let runner = ExternalRunnerConfig::from_command_line(cmd).context("empty runner command")?;
            run_external_model(&volume, &runner)?
        }
        _ => bail!("single-volume segmentation needs --baseline or --runner"),
    };
    let out = args.out.unwrap_or_else(|| store.mask_path(&study));
    write_mask_file(&mask, &out)?;
    println!(
        "{}",
        serde_json::json!({
            "study_uid": study,
            "mask": out,
            "voxel_count": mask.voxel_count(),
            "positive_slices": mask.positive_slices(),
        })
    );
    Ok(ExitCode::SUCCESS)
}

fn copy_reports(store: &ScoreStore, section: &str, out: Option<&Path>) -> Result<()> {
    let Some(out) = out else { return Ok(()) };
    let src = store.reports_dir().join(section);
    fs::create_dir_all(out)?;
    for entry in fs::read_dir(&src).with_context(|| src.display().to_string())? {
        let entry = entry?;
        if entry.file_type()?.is_file() {
            fs::copy(entry.path(), out.join(entry.file_name()))?;
        }
    }
    Ok(())
}

fn serve(store: &ScoreStore, bind: &str, port: u16, reviewers: Option<Vec<String>>) -> Result<ExitCode> {
    let pool = pipeline::review_candidates(store)?;
    let mut service = ReviewService::open(&store.review_dir(), pool, Box::new(StoreSlices::new(store)))?;
    if let Some(r) = reviewers {
        service = service.with_reviewers(r);
    }
    let app = cac_cli::api::router(Arc::new(service));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener =
            tokio::net::TcpListener::bind((bind, port)).await.with_context(|| format!("binding {bind}:{port}"))?;
        eprintln!("review API listening on http://{}", listener.local_addr()?);
        axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(ExitCode::SUCCESS)
    })
}

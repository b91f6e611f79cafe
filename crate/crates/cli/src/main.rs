//! `gssm` command-line pipeline.

mod config;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gssm::attribution::{
    expected_gradients, reference_centers, top_factors, write_attribution_csv, AttributionRecord, FactorSummary,
    Period,
};
use gssm::data::{load_event_dir, load_event_raw, metadata_path, save_event, Event};
use gssm::ekf::{reconstruct_event, tune_ekf_params};
use gssm::error::{GssmError, Result};
use gssm::evaluation::{render_curves, stage_one, vote, write_outputs};
use gssm::features::{extract_features, read_jsonl, sample_seed, write_jsonl, InteractionSample};
use gssm::model::Model;
use gssm::pipeline::{default_scorers, evaluate_events, risk_series, score_event, split_by_event, training_samples, write_risk_csv};
use gssm::synth::generate_dataset;
use gssm::train::{resume, write_log_csv, TrainState};
use rayon::prelude::*;

use config::{parent_dir, write_manifest, RunConfig};

#[derive(Parser)]
#[command(name = "gssm", version, about = "Context-conditioned collision risk pipeline")]
struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides the configuration).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (also `GSSM_WORKERS`).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground truth.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        train_events: Option<usize>,
        #[arg(long)]
        test_events: Option<usize>,
    },
    /// Reconstruct trajectories with the extended Kalman filters.
    Reconstruct {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Grid-search the noise scale before reconstructing.
        #[arg(long)]
        tune: bool,
    },
    /// Extract training samples as JSON lines.
    ExtractFeatures {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the density model.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Risk series for one event or pair.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        event: Option<String>,
        /// `subject:object` agent ids.
        #[arg(long)]
        pair: Option<String>,
        #[arg(long, default_value = "risk.csv")]
        out: PathBuf,
    },
    /// Run the evaluation protocol against all scorers.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expected-gradients attribution over danger and safe periods.
    Attribute {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training events or samples for the reference set.
        #[arg(long)]
        train_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_events: Option<usize>,
    },
    /// Render SVG plots from curve CSVs.
    Curves {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Reconstruct { .. } => "reconstruct",
            Command::ExtractFeatures { .. } => "extract-features",
            Command::Train { .. } => "train",
            Command::Infer { .. } => "infer",
            Command::Evaluate { .. } => "evaluate",
            Command::Attribute { .. } => "attribute",
            Command::Curves { .. } => "curves",
        }
    }
}

fn progress(stage: &str, msg: impl AsRef<str>) {
    eprintln!("[{stage}] {}", msg.as_ref());
}

/// `path/sub` when it exists, otherwise `path`.
fn subdir(path: &Path, sub: &str) -> PathBuf {
    let p = path.join(sub);
    if p.is_dir() {
        p
    } else {
        path.to_path_buf()
    }
}

fn load_samples(path: &Path, config: &RunConfig) -> Result<Vec<InteractionSample>> {
    if path.is_file() {
        return read_jsonl(path);
    }
    let events = load_event_dir(&subdir(path, "train"))?;
    training_samples(&events, config.training.stride, config.model.dropout, config.seed)
}

fn load_raw_dir(dir: &Path) -> Result<Vec<Event>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv") && metadata_path(p).exists())
        .collect();
    paths.sort();
    paths.iter().map(|p| load_event_raw(p)).collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
        config.apply_seed();
    }
    let workers = cli
        .workers
        .or(config.workers)
        .or_else(|| std::env::var("GSSM_WORKERS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| GssmError::Config(e.to_string()))?;
    }
    let stage = cli.command.name();
    match &cli.command {
        Command::Synth { out, train_events, test_events } => {
            if let Some(n) = train_events {
                config.generator.n_train_events = *n;
            }
            if let Some(n) = test_events {
                config.generator.n_test_events = *n;
            }
            let truth = generate_dataset(&config.generator, out)?;
            progress(stage, format!("{} events written to {}", truth.events.len(), out.display()));
            write_manifest(out, stage, &[], &config)
        }
        Command::Reconstruct { data, out, tune } => {
            std::fs::create_dir_all(out)?;
            let events = load_raw_dir(data)?;
            let params = if *tune {
                let grid: Vec<_> = config.ekf_grid.iter().map(|&f| config.ekf.scale_measurement(f)).collect();
                let p = tune_ekf_params(&events, &grid)?;
                std::fs::write(out.join("ekf_params.json"), serde_json::to_string_pretty(&p)?)?;
                p
            } else {
                config.ekf
            };
            let rebuilt: Vec<Event> = events
                .par_iter()
                .map(|e| {
                    reconstruct_event(e, &params).map_err(|err| GssmError::Reconstruction(format!("event {}: {err}", e.event_id)))
                })
                .collect::<Result<_>>()?;
            for e in &rebuilt {
                save_event(e, &out.join(format!("{}.csv", e.event_id)))?;
            }
            progress(stage, format!("{} events reconstructed", rebuilt.len()));
            write_manifest(out, stage, &[data], &config)
        }
        Command::ExtractFeatures { data, out } => {
            let events = load_event_dir(&subdir(data, "train"))?;
            let samples = training_samples(&events, config.training.stride, config.model.dropout, config.seed)?;
            std::fs::create_dir_all(parent_dir(out))?;
            write_jsonl(out, &samples)?;
            progress(stage, format!("{} samples from {} events", samples.len(), events.len()));
            write_manifest(&parent_dir(out), stage, &[data], &config)
        }
        Command::Train { data, out, epochs } => {
            if let Some(n) = epochs {
                config.model.max_epochs = *n;
            }
            let samples = load_samples(data, &config)?;
            let (train, val) = split_by_event(samples, config.training.val_fraction, config.seed);
            progress(stage, format!("{} training / {} validation samples", train.len(), val.len()));
            if val.is_empty() {
                return Err(GssmError::Training { epoch: 0, message: "validation split is empty".into() });
            }
            let mut state = TrainState::new(config.model.clone(), &train)?;
            resume(&mut state, &train, &val, |e| {
                progress(stage, format!("epoch {} train {:.5} val {:.5}", e.epoch, e.train_loss, e.val_loss))
            })?;
            let dir = parent_dir(out);
            std::fs::create_dir_all(&dir)?;
            state.best.save(out)?;
            write_log_csv(&dir.join("training_log.csv"), &state.log)?;
            progress(stage, format!("best epoch {} (val {:.5})", state.best_epoch, state.best_val));
            write_manifest(&dir, stage, &[data], &config)
        }
        Command::Infer { model, data, event, pair, out } => {
            let model_obj = Model::load(model)?;
            let events = load_event_dir(&subdir(data, "test"))?;
            let (subject, object) = match pair {
                Some(p) => {
                    let (s, o) = p
                        .split_once(':')
                        .ok_or_else(|| GssmError::Argument(format!("pair {p:?} is not of the form subject:object")))?;
                    (Some(s.to_owned()), Some(o.to_owned()))
                }
                None => (None, None),
            };
            let mut rows = Vec::new();
            let mut matched = false;
            for e in events.iter().filter(|e| event.as_ref().is_none_or(|id| *id == e.event_id)) {
                matched = true;
                let subj = subject.clone().unwrap_or_else(|| e.subject().agent_id.clone());
                for obj in e.objects().filter(|o| object.as_ref().is_none_or(|id| *id == o.agent_id)) {
                    for p in risk_series(e, &model_obj, &subj, &obj.agent_id)? {
                        rows.push((e.event_id.clone(), obj.agent_id.clone(), p));
                    }
                }
            }
            if !matched {
                return Err(GssmError::Argument(format!("no event matches {:?}", event)));
            }
            std::fs::create_dir_all(parent_dir(out))?;
            write_risk_csv(out, &rows)?;
            progress(stage, format!("{} risk points", rows.len()));
            write_manifest(&parent_dir(out), stage, &[model, data], &config)
        }
        Command::Evaluate { model, data, out } => {
            let model_obj = Model::load(model)?;
            let events = load_event_dir(&subdir(data, "test"))?;
            let outcome = evaluate_events(&events, &default_scorers(&model_obj), &config.evaluation)?;
            write_outputs(out, &outcome)?;
            for (name, s) in &outcome.scorers {
                progress(stage, format!("{name}: AUPRC {:.4}, max F1 {:.4}", s.report.auprc, s.report.max_f1));
            }
            write_manifest(out, stage, &[model, data], &config)
        }
        Command::Attribute { model, data, train_data, out, max_events } => {
            attribute(stage, &config, model, data, train_data, out, *max_events)?;
            write_manifest(out, stage, &[model, data, train_data], &config)
        }
        Command::Curves { input, out } => {
            render_curves(input, out)?;
            write_manifest(out, stage, &[input], &config)
        }
    }
}

fn attribute(
    stage: &str,
    config: &RunConfig,
    model: &Path,
    data: &Path,
    train_data: &Path,
    out: &Path,
    max_events: Option<usize>,
) -> Result<()> {
    let opts = &config.attribution;
    let model = Model::load(model)?;
    let pool = load_samples(train_data, &RunConfig { model: gssm::model::ModelConfig { dropout: 0.0, ..config.model.clone() }, ..config.clone() })?;
    let step = (pool.len() / opts.reference_pool.max(1)).max(1);
    let pool: Vec<InteractionSample> = pool.into_iter().step_by(step).take(opts.reference_pool).collect();
    let refs = reference_centers(&model.encode_tokens(&pool)?, opts.references.min(pool.len()), config.seed)?;
    progress(stage, format!("{} reference centres from {} samples", refs.len(), pool.len()));

    let events = load_event_dir(&subdir(data, "test"))?;
    let scorers = default_scorers(&model);
    let mut jobs: Vec<(usize, String, f64, Period)> = Vec::new();
    for (e, event) in events.iter().enumerate().filter(|(_, e)| e.severity.is_safety_critical()).take(max_events.unwrap_or(usize::MAX)) {
        let scores = score_event(event, &scorers)?;
        let votes: Vec<_> = scores.risks.values().map(|s| stage_one(&scores.periods, s)).collect();
        let Some(target) = vote(&votes, config.evaluation.count_abstentions) else { continue };
        let gssm_series = &scores.risks[gssm::pipeline::GSSM];
        let (d0, d1) = scores.periods.danger;
        let mut push = |object: &str, lo: f64, hi: f64, period: Period| {
            if let Some(series) = gssm_series.get(object) {
                for &t in series.times.iter().filter(|t| **t >= lo - 1e-9 && **t <= hi + 1e-9).step_by(opts.stride.max(1)) {
                    jobs.push((e, object.to_owned(), t, period));
                }
            }
        };
        push(&target, d0, d1, Period::Danger);
        for (object, &(lo, hi)) in &scores.periods.safe {
            if *object != target {
                push(object, lo, hi, Period::Safe);
            }
        }
    }
    progress(stage, format!("attributing {} time steps", jobs.len()));
    let attributed: Vec<(AttributionRecord, Period, String)> = jobs
        .par_iter()
        .enumerate()
        .map(|(n, (e, object, t, period))| {
            let event = &events[*e];
            let sample = extract_features(event, &event.subject().agent_id, object, *t, 0.0, 0)?;
            let theta = model.encode_tokens(std::slice::from_ref(&sample))?.remove(0);
            let attribution =
                expected_gradients(&model, &theta, sample.s, &refs, opts.samples, sample_seed(config.seed, n as u64))?;
            Ok((
                AttributionRecord { event_id: event.event_id.clone(), time: *t, attribution },
                *period,
                event.annotations.event_type.name(),
            ))
        })
        .collect::<Result<_>>()?;
    std::fs::create_dir_all(out)?;
    let records: Vec<AttributionRecord> = attributed.iter().map(|(r, _, _)| r.clone()).collect();
    write_attribution_csv(&out.join("attribution.csv"), &records)?;
    let mut groups: BTreeMap<String, [Vec<_>; 2]> = BTreeMap::new();
    for (r, period, condition) in attributed {
        let slot = usize::from(period == Period::Danger);
        groups.entry("all".into()).or_default()[slot].push(r.attribution.clone());
        groups.entry(condition).or_default()[slot].push(r.attribution);
    }
    let mut summary = FactorSummary::default();
    for (condition, [safe, danger]) in &groups {
        for (period, series) in [(Period::Safe, safe), (Period::Danger, danger)] {
            if !series.is_empty() {
                summary.insert(condition, period, top_factors(series, period, opts.n_top)?);
            }
        }
    }
    summary.write(&out.join("factors.json"))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let stage = cli.command.name();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{stage}]: {e}");
            ExitCode::from(1)
        }
    }
}

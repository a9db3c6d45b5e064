mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;

use maas_choice::capacity::{fit_efficiency_model, samples_from_records, CapacityProvenance, EfficiencyModel, IntervalRecord};
use maas_choice::choice::{estimate_theta, ChoiceObservation, Dispersion, ThetaOptions};
use maas_choice::eval::{
    compare_models, match_score, nrmsd_with, surplus_monitor, ComparisonData, ComparisonOptions, ModelVariant, Window,
};
use maas_choice::ingest::{ingest, parse_timestamp, parse_trips, CostParams, IngestOptions};
use maas_choice::io::{self, ModelFile};
use maas_choice::network::{ChoiceSet, Network};
use maas_choice::online::{run_online, IntervalResult, OfflineModel, OnlineConfig, ShadowPriceOptions, StreamItem};
use maas_choice::optimize::AscentOptions;
use maas_choice::sim::{simulate, ScenarioConfig};

use config::{Config, Preset};

#[derive(Parser, Debug)]
#[command(name = "maas-choice", version, about = "Route choice estimation under flow-dependent capacities")]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate a preset scenario and write its network, intervals and choices.
    Simulate,
    /// Estimate θ and the capacity coefficients from an input directory.
    FitOffline,
    /// Run the per-interval shadow-price loop over the input intervals.
    RunOnline,
    /// Turn Citi Bike trips into network, interval and observation files.
    IngestTrips,
    /// Score the online predictions and report surplus changes.
    Evaluate,
    /// Score model variants M1 to M4 against the observed choices.
    CompareModels,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let cfg = match &cli.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    match cli.command {
        Command::Simulate => cmd_simulate(&cfg, &cli.out),
        Command::FitOffline => cmd_fit_offline(&cfg, &cli.out),
        Command::RunOnline => cmd_run_online(&cfg, &cli.out),
        Command::IngestTrips => cmd_ingest(&cfg, &cli.out),
        Command::Evaluate => cmd_evaluate(&cfg, &cli.out),
        Command::CompareModels => cmd_compare(&cfg, &cli.out),
    }
}

fn cmd_simulate(cfg: &Config, out: &Path) -> Result<()> {
    let s = &cfg.scenario;
    let scenario = match s.preset {
        Preset::Parallel => {
            if s.noise_sigma != 0.0 {
                warn!("noise_sigma is ignored by the parallel preset");
            }
            ScenarioConfig::parallel(cfg.seed, s.intervals, s.demand, s.capacity)
        }
        Preset::Multimodal => ScenarioConfig::multimodal(cfg.seed, s.intervals, s.demand, s.capacity, s.noise_sigma),
    };
    let sim = simulate(&scenario)?;
    let net = &scenario.network;
    io::write_network(out, net)?;
    io::write_choice_sets(&out.join("routes.csv"), &scenario.choice_sets, net)?;
    io::write_intervals(&out.join("intervals.csv"), &sim.records, net)?;
    io::write_frame(&out.join("observations.csv"), &io::frame_from_observations(&sim.observations, net))?;
    io::write_ground_truth(&out.join("ground_truth.csv"), &sim.truth)?;
    info!("simulated {} intervals", sim.truth.len());
    Ok(())
}

struct Inputs {
    network: Network,
    choice_sets: Vec<ChoiceSet>,
    records: Vec<IntervalRecord>,
    observations: Vec<ChoiceObservation>,
}

fn load_inputs(cfg: &Config) -> Result<Inputs> {
    let dir = cfg.input_dir()?;
    let network = io::read_network(dir)?;
    let choice_sets = io::read_choice_sets(&dir.join("routes.csv"), &network)?;
    let records = io::read_intervals(&dir.join("intervals.csv"), &network, CapacityProvenance::ObservedTimeAverage)?;
    let observations = io::read_observations(&dir.join("observations.csv"), &choice_sets)?;
    if records.is_empty() {
        bail!("{} has no interval records", dir.join("intervals.csv").display());
    }
    Ok(Inputs {
        network,
        choice_sets,
        records,
        observations,
    })
}

fn ascent(tol: f64, max_iter: usize) -> AscentOptions {
    AscentOptions {
        tol,
        max_iter,
        ..AscentOptions::default()
    }
}

fn cmd_fit_offline(cfg: &Config, out: &Path) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let e = &cfg.estimation;
    let (theta, theta_report) = match e.theta {
        Some(v) => (Dispersion::uniform(&inputs.network, v), None),
        None => {
            let obs: Vec<ChoiceObservation> = inputs
                .observations
                .iter()
                .filter(|o| e.theta_last_interval.is_none_or(|last| o.interval <= last))
                .cloned()
                .collect();
            let options = ThetaOptions {
                tied: e.tied_theta,
                initial: e.theta_initial,
                theta_max: e.theta_max,
                ascent: ascent(e.tol, e.max_iter),
            };
            let (theta, report) = estimate_theta(&obs, &inputs.network, &options)?;
            for w in &report.warnings {
                warn!("{w}");
            }
            (theta, Some(report))
        }
    };
    let efficiency = if inputs.network.capacitated_links().next().is_some() {
        fit_efficiency_model(&samples_from_records(&inputs.records), &inputs.network, e.granularity)?
    } else {
        EfficiencyModel::default()
    };
    io::write_model(
        &out.join("model.json"),
        &ModelFile {
            theta,
            efficiency,
            theta_report,
        },
    )?;
    Ok(())
}

fn online_config(cfg: &Config) -> OnlineConfig {
    let o = &cfg.online;
    OnlineConfig {
        epsilon_binding: o.epsilon_binding,
        shadow: ShadowPriceOptions {
            lambda: o.lambda_reg,
            ascent: ascent(o.tol, o.max_iter),
        },
        observation_lag: o.observation_lag,
    }
}

fn online_results(cfg: &Config, inputs: &Inputs, model: &ModelFile) -> Result<Vec<IntervalResult>> {
    let mut by_t: BTreeMap<i64, Vec<ChoiceObservation>> = BTreeMap::new();
    for o in &inputs.observations {
        by_t.entry(o.interval).or_default().push(o.clone());
    }
    let stream: Vec<StreamItem> = inputs.records[1..]
        .iter()
        .map(|r| StreamItem {
            observations: by_t.remove(&r.t).unwrap_or_default(),
            record: r.clone(),
        })
        .collect();
    let offline = OfflineModel {
        theta: model.theta.clone(),
        efficiency: model.efficiency.clone(),
    };
    Ok(run_online(
        offline,
        inputs.records[0].clone(),
        stream,
        &inputs.choice_sets,
        &inputs.network,
        &online_config(cfg),
    )?)
}

fn cmd_run_online(cfg: &Config, out: &Path) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let model = io::read_model(&cfg.model_path()?)?;
    let results = online_results(cfg, &inputs, &model)?;
    io::write_online_results(out, &results, &inputs.network)?;
    Ok(())
}

fn cmd_ingest(cfg: &Config, out: &Path) -> Result<()> {
    let g = &cfg.ingest;
    let need = |p: &Option<PathBuf>, key: &str| -> Result<PathBuf> {
        p.clone().with_context(|| format!("ingest-trips needs [ingest] {key} in the config"))
    };
    let trips_path = need(&g.trips, "trips")?;
    let stations = io::read_stations(&need(&g.stations, "stations")?)?;
    let zones = io::read_zones(&need(&g.zones, "zones")?)?;
    let file = File::open(&trips_path).with_context(|| format!("opening {}", trips_path.display()))?;
    let (trips, report) = parse_trips(file, &trips_path.display().to_string(), &stations)?;
    let horizon_start = match &g.horizon_start {
        Some(s) => Some(parse_timestamp(s).with_context(|| format!("bad horizon_start {s:?}"))?),
        None => None,
    };
    let options = IngestOptions {
        interval_minutes: g.interval_minutes,
        horizon_start,
        horizon_intervals: g.horizon_intervals,
        costs: CostParams {
            walk_kmh: g.walk_kmh,
            bike_kmh: g.bike_kmh,
            max_walk_m: g.max_walk_m,
        },
        include_empty_ods: g.include_empty_ods,
        initial_inventory: BTreeMap::new(),
    };
    let result = ingest(trips, report, &stations, &zones, &options)?;
    let net = &result.study.network;
    io::write_network(out, net)?;
    io::write_choice_sets(&out.join("routes.csv"), &result.study.choice_set_list(), net)?;
    io::write_intervals(&out.join("intervals.csv"), &result.records, net)?;
    io::write_frame(&out.join("observations.csv"), &result.frame)?;
    info!(
        "kept {} of {} trips; {} observation blocks",
        result.parse_report.kept, result.parse_report.rows, result.frame_report.blocks
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluationRow {
    t: i64,
    trips: usize,
    match_score: f64,
    /// Predicted against observed route shares, all ODs of the interval.
    nrmsd: Option<f64>,
}

fn cmd_evaluate(cfg: &Config, out: &Path) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let model = io::read_model(&cfg.model_path()?)?;
    let results = online_results(cfg, &inputs, &model)?;
    let window = window(cfg);
    let mut predictions = Vec::new();
    let mut scored = Vec::new();
    let mut rows = Vec::new();
    let mut trips = 0usize;
    for r in &results {
        let mut observed: BTreeMap<_, Vec<f64>> = BTreeMap::new();
        for o in &r.realized {
            let Some(p) = r.predicted_shares.get(&o.choice_set.od) else {
                continue;
            };
            predictions.push(p.clone());
            scored.push(o.clone());
            trips += (o.weight.round() as usize).max(1);
            observed.entry(&o.choice_set.od).or_insert_with(|| vec![0.0; p.len()])[o.chosen] += o.weight;
        }
        let (mut obs_share, mut pred_share) = (Vec::new(), Vec::new());
        for (od, counts) in &observed {
            let total: f64 = counts.iter().sum();
            obs_share.extend(counts.iter().map(|c| c / total));
            pred_share.extend(r.predicted_shares[*od].iter().copied());
        }
        let score = if scored.is_empty() {
            f64::NAN
        } else {
            *match_score(&predictions, &scored, window)?.last().expect("non-empty")
        };
        rows.push(EvaluationRow {
            t: r.t,
            trips,
            match_score: score,
            nrmsd: nrmsd_with(&obs_share, &pred_share, cfg.evaluation.normalizer).ok(),
        });
    }
    io::write_rows(&out.join("evaluation.csv"), &rows)?;
    let surplus = surplus_monitor(
        &results,
        &inputs.choice_sets,
        &model.theta,
        &inputs.network,
        None,
        cfg.evaluation.flag_ratio,
    )?;
    for r in surplus.iter().filter(|r| r.flagged) {
        info!(
            "t = {}: route {}>{} of OD {} costs {:.2} against {:.2} unpriced",
            r.t, r.route.start, r.route.end, r.od, r.effective_cost, r.base_cost
        );
    }
    io::write_surplus(&out.join("surplus.csv"), &surplus)?;
    Ok(())
}

fn window(cfg: &Config) -> Window {
    match cfg.evaluation.window {
        0 => Window::Cumulative,
        n => Window::Sliding(n),
    }
}

fn cmd_compare(cfg: &Config, out: &Path) -> Result<()> {
    let inputs = load_inputs(cfg)?;
    let model = io::read_model(&cfg.model_path()?)?;
    let variants = cfg
        .evaluation
        .variants
        .iter()
        .map(|id| ModelVariant::by_id(id).with_context(|| format!("unknown model variant {id:?}")))
        .collect::<Result<Vec<_>>>()?;
    let data = ComparisonData {
        network: &inputs.network,
        records: &inputs.records,
        observations: &inputs.observations,
        constant_capacity: Some(&inputs.records[0].capacities),
        efficiency: Some(&model.efficiency),
    };
    let mut options = ComparisonOptions {
        epsilon_binding: cfg.online.epsilon_binding,
        shadow: online_config(cfg).shadow,
        rounds: cfg.evaluation.rounds,
        window: window(cfg),
        ..ComparisonOptions::default()
    };
    options.per_interval_theta.theta_max = cfg.evaluation.per_interval_theta_max;
    let reports = compare_models(&variants, &data, &options)?;
    for r in &reports {
        info!("{}: final match score {:.2}% over {} trips", r.variant.id, r.final_score, r.trips);
    }
    io::write_model_comparison(&out.join("model_comparison.csv"), &reports)?;
    Ok(())
}

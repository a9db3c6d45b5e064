use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Deserialize;

use maas_choice::capacity::Granularity;
use maas_choice::eval::Normalizer;
use maas_choice::online::ObservationLag;

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    /// Directory holding nodes.csv, links.csv, routes.csv, intervals.csv,
    /// observations.csv and model.json. Relative to the config file.
    pub input: Option<PathBuf>,
    /// Model file; defaults to `<input>/model.json`.
    pub model: Option<PathBuf>,
    pub scenario: ScenarioSection,
    pub estimation: EstimationSection,
    pub online: OnlineSection,
    pub ingest: IngestSection,
    pub evaluation: EvaluationSection,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Two nodes, two parallel paths per direction.
    #[default]
    Parallel,
    /// Drive and bike-share paths between four nodes.
    Multimodal,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSection {
    pub preset: Preset,
    pub intervals: usize,
    /// Travelers per OD per interval.
    pub demand: u32,
    /// Initial capacity of every capacitated link.
    pub capacity: f64,
    /// Standard deviation of the capacity disturbance (multimodal only).
    pub noise_sigma: f64,
}

impl Default for ScenarioSection {
    fn default() -> Self {
        Self {
            preset: Preset::Parallel,
            intervals: 100,
            demand: 50,
            capacity: 40.0,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationSection {
    pub tied_theta: bool,
    /// Skip estimation and use this θ for every mode.
    pub theta: Option<f64>,
    pub theta_initial: f64,
    pub theta_max: f64,
    /// Only observations from intervals ≤ this enter the θ fit.
    pub theta_last_interval: Option<i64>,
    pub granularity: Granularity,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for EstimationSection {
    fn default() -> Self {
        Self {
            tied_theta: false,
            theta: None,
            theta_initial: 0.1,
            theta_max: 1e3,
            theta_last_interval: None,
            granularity: Granularity::PerMode,
            tol: 1e-8,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineSection {
    pub epsilon_binding: f64,
    pub lambda_reg: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub observation_lag: ObservationLag,
}

impl Default for OnlineSection {
    fn default() -> Self {
        Self {
            epsilon_binding: 1e-6,
            lambda_reg: 1e-8,
            tol: 1e-8,
            max_iter: 10_000,
            observation_lag: ObservationLag::Current,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub trips: Option<PathBuf>,
    pub stations: Option<PathBuf>,
    pub zones: Option<PathBuf>,
    pub interval_minutes: i64,
    /// `YYYY-MM-DD HH:MM:SS`; defaults to the floor of the first trip.
    pub horizon_start: Option<String>,
    pub horizon_intervals: Option<usize>,
    pub walk_kmh: f64,
    pub bike_kmh: f64,
    pub max_walk_m: f64,
    pub include_empty_ods: bool,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self {
            trips: None,
            stations: None,
            zones: None,
            interval_minutes: 30,
            horizon_start: None,
            horizon_intervals: None,
            walk_kmh: 5.0,
            bike_kmh: 12.0,
            max_walk_m: 800.0,
            include_empty_ods: false,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationSection {
    pub variants: Vec<String>,
    /// Sliding window in trips; 0 means the cumulative running mean.
    pub window: usize,
    pub normalizer: Normalizer,
    pub flag_ratio: f64,
    pub rounds: usize,
    /// θ upper bound for the per-interval re-estimation.
    pub per_interval_theta_max: f64,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            variants: vec!["M1".into(), "M2".into(), "M3".into(), "M4".into()],
            window: 0,
            normalizer: Normalizer::Range,
            flag_ratio: 2.0,
            rounds: 2,
            per_interval_theta_max: 1.0,
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: Config = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(inner) = p {
                if inner.is_relative() {
                    *inner = base.join(&*inner);
                }
            }
        };
        rebase(&mut cfg.input);
        rebase(&mut cfg.model);
        rebase(&mut cfg.ingest.trips);
        rebase(&mut cfg.ingest.stations);
        rebase(&mut cfg.ingest.zones);
        Ok(cfg)
    }

    pub fn input_dir(&self) -> Result<&Path> {
        self.input
            .as_deref()
            .context("this command needs `input` (a directory of network and interval files) in the config")
    }

    pub fn model_path(&self) -> Result<PathBuf> {
        match &self.model {
            Some(p) => Ok(p.clone()),
            None => Ok(self.input_dir()?.join("model.json")),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg: Config = toml::from_str(
            r#"
            seed = 9
            [scenario]
            preset = "multimodal"
            intervals = 12
            [online]
            observation_lag = "lagged"
            [estimation]
            granularity = "per-link"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.scenario.preset, Preset::Multimodal);
        assert_eq!(cfg.scenario.demand, 50);
        assert_eq!(cfg.online.observation_lag, ObservationLag::Lagged);
        assert_eq!(cfg.estimation.granularity, Granularity::PerLink);
        assert_eq!(cfg.online.epsilon_binding, 1e-6);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(toml::from_str::<Config>("sede = 1").is_err());
    }
}

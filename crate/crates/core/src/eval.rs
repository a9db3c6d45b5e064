//! Fit metrics and the four-variant model comparison.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::capacity::{binding_set, forecast_capacity, CapacityVector, EfficiencyModel, IntervalRecord};
use crate::choice::{
    choice_probabilities, estimate_theta_given_prices, log_sum_exp, logsum, utilities, ChoiceObservation,
    Dispersion, ShadowPriceVector, ThetaOptions,
};
use crate::error::{Error, Result};
use crate::network::{ChoiceSet, Network, Od, RouteKey};
use crate::online::{estimate_shadow_prices, IntervalResult, ShadowPriceOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalizer {
    /// max − min of the observed series.
    #[default]
    Range,
    /// Mean of the observed series.
    Mean,
}

/// Root-mean-square deviation as a percentage of the observed range.
pub fn nrmsd(observed: &[f64], estimated: &[f64]) -> Result<f64> {
    nrmsd_with(observed, estimated, Normalizer::Range)
}

pub fn nrmsd_with(observed: &[f64], estimated: &[f64], normalizer: Normalizer) -> Result<f64> {
    if observed.len() != estimated.len() || observed.len() < 2 {
        return Err(Error::Metric(format!(
            "nrmsd needs two equal-length series of at least 2 points, got {} and {}",
            observed.len(),
            estimated.len()
        )));
    }
    let n = observed.len() as f64;
    let rmsd = (observed
        .iter()
        .zip(estimated)
        .map(|(o, e)| (o - e).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let scale = match normalizer {
        Normalizer::Range => {
            let max = observed.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = observed.iter().copied().fold(f64::INFINITY, f64::min);
            max - min
        }
        Normalizer::Mean => observed.iter().sum::<f64>() / n,
    };
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::Metric("observed series has no spread to normalize by".into()));
    }
    Ok(rmsd / scale.abs() * 100.0)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    /// Running mean over everything so far.
    #[default]
    Cumulative,
    Sliding(usize),
}

/// True when the chosen alternative attains the highest probability.
pub fn is_match(probabilities: &[f64], chosen: usize) -> bool {
    let max = probabilities.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    probabilities[chosen] >= max
}

/// Percentage of matches over the window ending at each trip. Observations
/// are expanded into `weight` (rounded, at least 1) identical trips.
pub fn match_score(predictions: &[Vec<f64>], observations: &[ChoiceObservation], window: Window) -> Result<Vec<f64>> {
    if predictions.is_empty() || predictions.len() != observations.len() {
        return Err(Error::Metric(format!(
            "match score needs aligned, non-empty inputs, got {} predictions for {} observations",
            predictions.len(),
            observations.len()
        )));
    }
    let mut flags = Vec::new();
    for (p, obs) in predictions.iter().zip(observations) {
        let hit = is_match(p, obs.chosen);
        flags.extend(std::iter::repeat_n(hit, (obs.weight.round() as usize).max(1)));
    }
    Ok(moving_average(&flags, window))
}

fn moving_average(flags: &[bool], window: Window) -> Vec<f64> {
    let mut prefix = Vec::with_capacity(flags.len() + 1);
    prefix.push(0usize);
    for &f in flags {
        prefix.push(prefix.last().unwrap() + usize::from(f));
    }
    (0..flags.len())
        .map(|i| {
            let from = match window {
                Window::Cumulative => 0,
                Window::Sliding(w) => (i + 1).saturating_sub(w.max(1)),
            };
            (prefix[i + 1] - prefix[from]) as f64 / (i + 1 - from) as f64 * 100.0
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ThetaPolicy {
    Fixed(f64),
    PerInterval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapacityPolicy {
    None,
    Constant,
    Congestible,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub id: String,
    pub theta: ThetaPolicy,
    pub capacity: CapacityPolicy,
    pub description: String,
}

impl ModelVariant {
    pub fn m1() -> Self {
        Self {
            id: "M1".into(),
            theta: ThetaPolicy::Fixed(0.1),
            capacity: CapacityPolicy::None,
            description: "MNL with constant link costs (θ = 0.1)".into(),
        }
    }

    pub fn m2() -> Self {
        Self {
            id: "M2".into(),
            theta: ThetaPolicy::Fixed(0.1),
            capacity: CapacityPolicy::Constant,
            description: "MNL with shadow prices determined whenever the shortest path is not chosen (θ = 0.1); \
                          binding sets use constant capacities"
                .into(),
        }
    }

    pub fn m3() -> Self {
        Self {
            id: "M3".into(),
            theta: ThetaPolicy::Fixed(0.1),
            capacity: CapacityPolicy::Congestible,
            description: "MNL with congestible capacity effects (θ = 0.1)".into(),
        }
    }

    pub fn m4() -> Self {
        Self {
            id: "M4".into(),
            theta: ThetaPolicy::PerInterval,
            capacity: CapacityPolicy::Congestible,
            description: "MNL with congestible capacity effects (θ varies among observations); \
                          θ re-estimated per interval"
                .into(),
        }
    }

    pub fn all() -> Vec<Self> {
        vec![Self::m1(), Self::m2(), Self::m3(), Self::m4()]
    }

    pub fn by_id(id: &str) -> Option<Self> {
        Self::all().into_iter().find(|v| v.id.eq_ignore_ascii_case(id))
    }
}

/// Inputs shared by every variant.
#[derive(Clone, Debug)]
pub struct ComparisonData<'a> {
    pub network: &'a Network,
    /// Realized records; record i is the state before interval `records[i].t + 1`.
    pub records: &'a [IntervalRecord],
    pub observations: &'a [ChoiceObservation],
    /// Fixed capacities for the constant-capacity variant.
    pub constant_capacity: Option<&'a CapacityVector>,
    pub efficiency: Option<&'a EfficiencyModel>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonOptions {
    pub epsilon_binding: f64,
    pub shadow: ShadowPriceOptions,
    /// Starting θ and bounds for the per-interval re-estimation.
    pub per_interval_theta: ThetaOptions,
    /// Alternating θ / w rounds for the per-interval variant.
    pub rounds: usize,
    pub window: Window,
}

impl Default for ComparisonOptions {
    fn default() -> Self {
        Self {
            epsilon_binding: crate::capacity::DEFAULT_BINDING_EPSILON,
            shadow: ShadowPriceOptions::default(),
            per_interval_theta: ThetaOptions {
                tied: true,
                initial: 0.1,
                theta_max: 1.0,
                ..ThetaOptions::default()
            },
            rounds: 2,
            window: Window::Cumulative,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntervalScore {
    pub t: i64,
    /// Running match score through this interval, percent.
    pub match_score: f64,
    pub loglik: f64,
    pub binding: usize,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantReport {
    pub variant: ModelVariant,
    pub intervals: Vec<IntervalScore>,
    pub final_score: f64,
    pub loglik: f64,
    pub trips: usize,
}

fn loglik_stable(obs: &ChoiceObservation, theta: &Dispersion, w: &ShadowPriceVector, network: &Network) -> Result<f64> {
    if obs.choice_set.len() < 2 {
        return Ok(0.0);
    }
    let v = utilities(&obs.choice_set, theta, w, network)?;
    Ok(obs.weight * (v[obs.chosen] - log_sum_exp(&v)))
}

/// Scores each variant on every interval that has a preceding record.
pub fn compare_models(
    variants: &[ModelVariant],
    data: &ComparisonData<'_>,
    options: &ComparisonOptions,
) -> Result<Vec<VariantReport>> {
    let mut by_t: BTreeMap<i64, Vec<ChoiceObservation>> = BTreeMap::new();
    for o in data.observations {
        by_t.entry(o.interval).or_default().push(o.clone());
    }
    let mut reports = Vec::new();
    for variant in variants {
        match variant.capacity {
            CapacityPolicy::Constant if data.constant_capacity.is_none() => {
                return Err(Error::InvalidInput(format!("{} needs constant capacities", variant.id)))
            }
            CapacityPolicy::Congestible if data.efficiency.is_none() => {
                return Err(Error::InvalidInput(format!("{} needs a fitted efficiency model", variant.id)))
            }
            _ => {}
        }
        let mut flags: Vec<bool> = Vec::new();
        let mut intervals = Vec::new();
        let mut total_ll = 0.0;
        for pair in data.records.windows(2) {
            let (prev, t) = (&pair[0], pair[0].t + 1);
            let obs = by_t.get(&t).map(Vec::as_slice).unwrap_or(&[]);
            let x_hat = prev.flows.relabel(t);
            let binding = match variant.capacity {
                CapacityPolicy::None => Default::default(),
                CapacityPolicy::Constant => {
                    binding_set(&x_hat, data.constant_capacity.expect("checked"), options.epsilon_binding)
                }
                CapacityPolicy::Congestible => {
                    let u_hat =
                        forecast_capacity(&prev.capacities, &x_hat, data.efficiency.expect("checked"), data.network)?;
                    binding_set(&x_hat, &u_hat, options.epsilon_binding)
                }
            };
            let (theta, w) = match variant.theta {
                ThetaPolicy::Fixed(v) => {
                    let theta = Dispersion::uniform(data.network, v);
                    let (w, _) = estimate_shadow_prices(t, obs, &theta, &binding, data.network, &options.shadow)?;
                    (theta, w)
                }
                ThetaPolicy::PerInterval => {
                    let mut theta = Dispersion::uniform(data.network, options.per_interval_theta.initial);
                    for _ in 0..options.rounds.max(1) {
                        let w = estimate_shadow_prices(t, obs, &theta, &binding, data.network, &options.shadow)?.0;
                        match estimate_theta_given_prices(obs, &w, data.network, &options.per_interval_theta) {
                            Ok((th, _)) => theta = th,
                            Err(Error::FlatLikelihood(_)) => break,
                            Err(e) => return Err(e),
                        }
                    }
                    let w = estimate_shadow_prices(t, obs, &theta, &binding, data.network, &options.shadow)?.0;
                    (theta, w)
                }
            };
            let mut ll = 0.0;
            for o in obs {
                let p = choice_probabilities(&o.choice_set, &theta, &w, data.network)?;
                let hit = is_match(&p, o.chosen);
                flags.extend(std::iter::repeat_n(hit, (o.weight.round() as usize).max(1)));
                ll += loglik_stable(o, &theta, &w, data.network)?;
            }
            total_ll += ll;
            let running = moving_average(&flags, options.window).last().copied().unwrap_or(f64::NAN);
            intervals.push(IntervalScore {
                t,
                match_score: running,
                loglik: ll,
                binding: binding.len(),
                theta: theta.theta.values().next().copied().unwrap_or(f64::NAN),
            });
        }
        reports.push(VariantReport {
            variant: variant.clone(),
            final_score: intervals.last().map(|i| i.match_score).unwrap_or(f64::NAN),
            loglik: total_ll,
            trips: flags.len(),
            intervals,
        });
    }
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurplusRow {
    pub t: i64,
    pub od: Od,
    pub route: RouteKey,
    pub base_cost: f64,
    pub effective_cost: f64,
    /// Change in expected surplus against w = 0, in cost units.
    pub delta_cs: f64,
    /// Effective cost at least `flag_ratio` times the base cost.
    pub flagged: bool,
}

/// Effective route costs and surplus change for each online result.
///
/// `routes` restricts the output; `None` keeps every route. ΔCS is divided
/// by the θ of mode 0.
pub fn surplus_monitor(
    results: &[IntervalResult],
    choice_sets: &[ChoiceSet],
    theta: &Dispersion,
    network: &Network,
    routes: Option<&[(Od, RouteKey)]>,
    flag_ratio: f64,
) -> Result<Vec<SurplusRow>> {
    if let Some(filter) = routes {
        for (od, key) in filter {
            let known = choice_sets.iter().any(|cs| &cs.od == od && cs.position(key).is_some());
            if !known {
                return Err(Error::InvalidInput(format!("unknown route {}→{} for OD {od}", key.start, key.end)));
            }
        }
    }
    let reference = theta.get(0)?;
    let zero = ShadowPriceVector::zero(0);
    let mut rows = Vec::new();
    for res in results {
        for cs in choice_sets {
            let delta = logsum(cs, theta, &res.w_hat, network)? - logsum(cs, theta, &zero, network)?;
            let delta_cs = if reference > 0.0 { delta / reference } else { delta };
            for route in &cs.routes {
                if let Some(filter) = routes {
                    if !filter.iter().any(|(od, key)| od == &cs.od && key == &route.key) {
                        continue;
                    }
                }
                let base_cost = route.cost(network);
                let effective_cost = base_cost + route.links.iter().map(|&l| res.w_hat.get(l)).sum::<f64>();
                rows.push(SurplusRow {
                    t: res.t,
                    od: cs.od.clone(),
                    route: route.key.clone(),
                    base_cost,
                    effective_cost,
                    delta_cs,
                    flagged: base_cost > 0.0 && effective_cost >= flag_ratio * base_cost,
                });
            }
        }
    }
    Ok(rows)
}

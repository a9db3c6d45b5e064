//! The online learning loop: at the start of each interval forecast
//! capacities from the previous interval's flows, find the binding links,
//! estimate their shadow prices from observed choices and predict shares.

use std::collections::{BTreeMap, BTreeSet};

use log::{debug, warn};
use serde::{Deserialize, Serialize};

use crate::capacity::{
    binding_set, forecast_capacity, CapacityVector, EfficiencyModel, FlowSnapshot, IntervalRecord,
    DEFAULT_BINDING_EPSILON,
};
use crate::choice::{
    choice_probabilities, route_generalized_costs, utilities, ChoiceObservation, Dispersion,
    EstimationReport, LinearMnl, ShadowPriceVector,
};
use crate::error::{Error, Result};
use crate::network::{ChoiceSet, LinkIdx, Network, Od};
use crate::optimize::{maximize, AscentOptions, Evaluation};

/// Which interval's choices enter the shadow-price likelihood at step t.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObservationLag {
    /// Choices realized during t.
    #[default]
    Current,
    /// Choices realized during t − 1.
    Lagged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShadowPriceOptions {
    /// Weight of the λ‖w‖² tie-breaker.
    pub lambda: f64,
    pub ascent: AscentOptions,
}

impl Default for ShadowPriceOptions {
    fn default() -> Self {
        Self {
            lambda: 1e-8,
            ascent: AscentOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OnlineConfig {
    pub epsilon_binding: f64,
    pub shadow: ShadowPriceOptions,
    pub observation_lag: ObservationLag,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            epsilon_binding: DEFAULT_BINDING_EPSILON,
            shadow: ShadowPriceOptions::default(),
            observation_lag: ObservationLag::Current,
        }
    }
}

/// Maximizes the choice log-likelihood over shadow prices on `binding`,
/// holding θ fixed and every other link at zero.
pub fn estimate_shadow_prices(
    interval: i64,
    observations: &[ChoiceObservation],
    theta: &Dispersion,
    binding: &BTreeSet<LinkIdx>,
    network: &Network,
    options: &ShadowPriceOptions,
) -> Result<(ShadowPriceVector, EstimationReport)> {
    let links: Vec<LinkIdx> = binding.iter().copied().collect();
    let zero = ShadowPriceVector::zero(interval);
    let mut mnl = LinearMnl::new(links.len());
    for obs in observations {
        let offsets = utilities(&obs.choice_set, theta, &zero, network)?;
        let mut design = Vec::with_capacity(offsets.len());
        for route in &obs.choice_set.routes {
            let row = links
                .iter()
                .map(|&l| {
                    let uses = route.links.iter().filter(|&&r| r == l).count() as f64;
                    Ok(-theta.get(network.link(l).mode)? * uses)
                })
                .collect::<Result<Vec<f64>>>()?;
            design.push(row);
        }
        mnl.push(obs.weight, obs.chosen, offsets, design);
    }

    let mut warnings = Vec::new();
    let mut active = Vec::new();
    for (j, &l) in links.iter().enumerate() {
        if mnl.informative(j) {
            active.push(j);
        } else {
            warnings.push(format!(
                "flat likelihood for binding link {}: no observed choice set separates it",
                network.link_id(l)
            ));
        }
    }

    let mut prices = ShadowPriceVector::zero(interval);
    for &l in &links {
        prices.prices.insert(l, 0.0);
    }
    if active.is_empty() {
        return Ok((
            prices,
            EstimationReport {
                log_likelihood: if links.is_empty() { 0.0 } else { mnl.evaluate(&vec![0.0; links.len()]).value },
                iterations: 0,
                gradient_norm: 0.0,
                converged: true,
                warnings,
            },
        ));
    }

    let n = links.len();
    let lambda = options.lambda;
    let objective = |sub: &[f64]| {
        let mut full = vec![0.0; n];
        for (k, &j) in active.iter().enumerate() {
            full[j] = sub[k];
        }
        let e = mnl.evaluate(&full);
        let value = e.value - lambda * sub.iter().map(|w| w * w).sum::<f64>();
        let gradient = active
            .iter()
            .zip(sub)
            .map(|(&j, w)| e.gradient[j] - 2.0 * lambda * w)
            .collect();
        let hessian = active
            .iter()
            .enumerate()
            .map(|(a, &i)| {
                active
                    .iter()
                    .enumerate()
                    .map(|(b, &j)| e.hessian[i][j] - if a == b { 2.0 * lambda } else { 0.0 })
                    .collect()
            })
            .collect();
        Evaluation {
            value,
            gradient,
            hessian,
        }
    };
    let k = active.len();
    let res = maximize(
        objective,
        vec![0.0; k],
        &vec![0.0; k],
        &vec![f64::INFINITY; k],
        &options.ascent,
    );
    if !res.converged {
        warn!("shadow prices for t = {interval} did not converge");
    }
    for (slot, &j) in active.iter().enumerate() {
        prices.prices.insert(links[j], res.x[slot]);
    }
    let mut full = vec![0.0; n];
    for (slot, &j) in active.iter().enumerate() {
        full[j] = res.x[slot];
    }
    Ok((
        prices,
        EstimationReport {
            log_likelihood: mnl.evaluate(&full).value,
            iterations: res.iterations,
            gradient_norm: res.projected_gradient_norm,
            converged: res.converged,
            warnings,
        },
    ))
}

/// Route probabilities of every OD under the given shadow prices.
pub fn predict_route_shares(
    choice_sets: &[ChoiceSet],
    theta: &Dispersion,
    w: &ShadowPriceVector,
    network: &Network,
) -> Result<BTreeMap<Od, Vec<f64>>> {
    choice_sets
        .iter()
        .map(|cs| Ok((cs.od.clone(), choice_probabilities(cs, theta, w, network)?)))
        .collect()
}

/// Forecast of the coming interval's flows.
pub trait FlowForecaster {
    fn forecast(&self, previous: &IntervalRecord) -> FlowSnapshot;
}

/// x̂_t = x_{t−1}.
#[derive(Clone, Copy, Debug, Default)]
pub struct Myopic;

impl FlowForecaster for Myopic {
    fn forecast(&self, previous: &IntervalRecord) -> FlowSnapshot {
        previous.flows.relabel(previous.t + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IntervalResult {
    pub t: i64,
    pub u_hat: CapacityVector,
    pub binding: BTreeSet<LinkIdx>,
    pub w_hat: ShadowPriceVector,
    pub predicted_shares: BTreeMap<Od, Vec<f64>>,
    /// Choices that entered the shadow-price likelihood.
    pub observation_source: ObservationLag,
    /// Choices realized during t, once known.
    pub realized: Vec<ChoiceObservation>,
    pub report: EstimationReport,
}

/// Offline estimates, frozen for the online phase.
#[derive(Clone, Debug, PartialEq)]
pub struct OfflineModel {
    pub theta: Dispersion,
    pub efficiency: EfficiencyModel,
}

#[derive(Clone, Debug)]
pub struct OnlineState {
    model: OfflineModel,
    previous: IntervalRecord,
    previous_observations: Vec<ChoiceObservation>,
    history: Vec<IntervalResult>,
}

impl OnlineState {
    /// Starts the loop from the realized state of the interval before the
    /// first one to be estimated.
    pub fn new(model: OfflineModel, prior: IntervalRecord, network: &Network) -> Result<Self> {
        prior.require_complete(network)?;
        model.theta.validate()?;
        Ok(Self {
            model,
            previous: prior,
            previous_observations: Vec::new(),
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &OfflineModel {
        &self.model
    }

    /// The next interval to be estimated.
    pub fn interval(&self) -> i64 {
        self.previous.t + 1
    }

    pub fn u_prev(&self) -> &CapacityVector {
        &self.previous.capacities
    }

    pub fn x_prev(&self) -> &FlowSnapshot {
        &self.previous.flows
    }

    pub fn w_hat(&self) -> Option<&ShadowPriceVector> {
        self.history.last().map(|r| &r.w_hat)
    }

    pub fn history(&self) -> &[IntervalResult] {
        &self.history
    }

    pub fn into_history(self) -> Vec<IntervalResult> {
        self.history
    }
}

/// Runs one interval of the loop and records it in the state's history.
///
/// `observations` are the choices realized during the interval being
/// estimated; `choice_sets` are the ODs whose shares are predicted (the
/// observed choice sets are used when it is empty).
pub fn online_step(
    state: &mut OnlineState,
    observations: &[ChoiceObservation],
    choice_sets: &[ChoiceSet],
    network: &Network,
    config: &OnlineConfig,
    forecaster: &dyn FlowForecaster,
) -> Result<IntervalResult> {
    let t = state.interval();
    if let Some(bad) = observations.iter().find(|o| o.interval != t) {
        return Err(Error::InvalidObservation(format!(
            "observation labelled t = {} supplied for interval {t}",
            bad.interval
        )));
    }
    let x_hat = forecaster.forecast(&state.previous);
    let u_hat = forecast_capacity(&state.previous.capacities, &x_hat, &state.model.efficiency, network)?;
    let binding = binding_set(&x_hat, &u_hat, config.epsilon_binding);

    let used: &[ChoiceObservation] = match config.observation_lag {
        ObservationLag::Current => observations,
        ObservationLag::Lagged => &state.previous_observations,
    };
    let (w_hat, report) = estimate_shadow_prices(t, used, &state.model.theta, &binding, network, &config.shadow)?;

    let predicted_shares = if choice_sets.is_empty() {
        let mut seen = BTreeMap::new();
        for obs in observations {
            seen.entry(obs.choice_set.od.clone()).or_insert_with(|| obs.choice_set.clone());
        }
        let sets: Vec<ChoiceSet> = seen.into_values().collect();
        predict_route_shares(&sets, &state.model.theta, &w_hat, network)?
    } else {
        predict_route_shares(choice_sets, &state.model.theta, &w_hat, network)?
    };
    debug!("t = {t}: {} binding links", binding.len());

    let result = IntervalResult {
        t,
        u_hat,
        binding,
        w_hat,
        predicted_shares,
        observation_source: config.observation_lag,
        realized: observations.to_vec(),
        report,
    };
    state.previous_observations = observations.to_vec();
    state.history.push(result.clone());
    Ok(result)
}

/// Records the realized flows and capacities of the interval just estimated.
pub fn observe_interval(state: &mut OnlineState, record: IntervalRecord, network: &Network) -> Result<()> {
    let expected = state.interval();
    if record.t != expected {
        return Err(Error::OutOfOrder {
            position: state.history.len(),
            expected,
            got: record.t,
        });
    }
    record.require_complete(network)?;
    state.previous = record;
    Ok(())
}

/// One element of the online stream: the choices realized during interval
/// `record.t` and the flows and capacities observed at its end.
#[derive(Clone, Debug)]
pub struct StreamItem {
    pub record: IntervalRecord,
    pub observations: Vec<ChoiceObservation>,
}

/// Folds `online_step` over an ordered stream, starting from `prior`.
pub fn run_online<I>(
    model: OfflineModel,
    prior: IntervalRecord,
    stream: I,
    choice_sets: &[ChoiceSet],
    network: &Network,
    config: &OnlineConfig,
) -> Result<Vec<IntervalResult>>
where
    I: IntoIterator<Item = StreamItem>,
{
    let mut state = OnlineState::new(model, prior, network)?;
    for (position, item) in stream.into_iter().enumerate() {
        let expected = state.interval();
        if item.record.t != expected {
            return Err(Error::OutOfOrder {
                position,
                expected,
                got: item.record.t,
            });
        }
        online_step(&mut state, &item.observations, choice_sets, network, config, &Myopic)?;
        observe_interval(&mut state, item.record, network)?;
    }
    Ok(state.into_history())
}

/// Cost-only share of each route, used where no shadow prices apply.
pub fn cost_only_shares(choice_sets: &[ChoiceSet], theta: &Dispersion, network: &Network) -> Result<BTreeMap<Od, Vec<f64>>> {
    predict_route_shares(choice_sets, theta, &ShadowPriceVector::zero(0), network)
}

/// Generalized cost of every route, for reporting.
pub fn route_costs(cs: &ChoiceSet, w: &ShadowPriceVector, network: &Network) -> Result<Vec<f64>> {
    cs.routes
        .iter()
        .map(|r| Ok(route_generalized_costs(r, w, network)?.values().sum()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capacity::{CapacityProvenance, Coefficients};
    use crate::network::{build_network, CapacityChannel, Link, Node, Route, RouteKey};

    fn two_path() -> (Network, ChoiceSet) {
        let net = build_network(
            vec![Node::new("o"), Node::new("d")],
            vec![],
            vec![
                Link::new("p1", "o", "d", 0, 30.0, CapacityChannel::Space),
                Link::new("p2", "o", "d", 0, 35.0, CapacityChannel::None),
            ],
        )
        .unwrap();
        let od = Od::new("o", "d");
        let cs = ChoiceSet::new(
            od.clone(),
            vec![
                Route::new(&net, od.clone(), RouteKey::new("1", "1"), &["p1"]).unwrap(),
                Route::new(&net, od, RouteKey::new("2", "2"), &["p2"]).unwrap(),
            ],
        )
        .unwrap();
        (net, cs)
    }

    fn split(cs: &ChoiceSet, t: i64, n1: f64, n2: f64) -> Vec<ChoiceObservation> {
        vec![
            ChoiceObservation::new(t, cs.clone(), 0, n1).unwrap(),
            ChoiceObservation::new(t, cs.clone(), 1, n2).unwrap(),
        ]
    }

    #[test]
    fn empty_binding_set_gives_zero() {
        let (net, cs) = two_path();
        let theta = Dispersion::uniform(&net, 0.0905);
        let (w, rep) = estimate_shadow_prices(
            1,
            &split(&cs, 1, 58.0, 47.0),
            &theta,
            &BTreeSet::new(),
            &net,
            &ShadowPriceOptions::default(),
        )
        .unwrap();
        assert!(w.prices.is_empty());
        assert_eq!(rep.iterations, 0);
    }

    #[test]
    fn worked_example_inversion() {
        let (net, cs) = two_path();
        let theta = Dispersion::uniform(&net, 0.0905);
        let binding = BTreeSet::from([LinkIdx(0)]);
        let opts = ShadowPriceOptions::default();
        let (w, _) = estimate_shadow_prices(1, &split(&cs, 1, 58.0, 47.0), &theta, &binding, &net, &opts).unwrap();
        assert!((w.get(LinkIdx(0)) - 2.68).abs() < 0.02, "{w:?}");
        let (w, _) = estimate_shadow_prices(1, &split(&cs, 1, 58.0, 37.0), &theta, &binding, &net, &opts).unwrap();
        assert!((w.get(LinkIdx(0)) - 0.03).abs() < 0.01, "{w:?}");
    }

    #[test]
    fn cost_only_shares_give_zero_price() {
        let (net, cs) = two_path();
        let theta = Dispersion::uniform(&net, 0.0905);
        let p = choice_probabilities(&cs, &theta, &ShadowPriceVector::zero(0), &net).unwrap();
        let obs = split(&cs, 1, 1000.0 * p[0], 1000.0 * p[1]);
        let (w, _) = estimate_shadow_prices(
            1,
            &obs,
            &theta,
            &BTreeSet::from([LinkIdx(0)]),
            &net,
            &ShadowPriceOptions::default(),
        )
        .unwrap();
        assert!(w.get(LinkIdx(0)) < 1e-6);
    }

    #[test]
    fn unseen_binding_link_is_flat() {
        let (net, cs) = two_path();
        let theta = Dispersion::uniform(&net, 0.0905);
        let (w, rep) = estimate_shadow_prices(
            1,
            &[],
            &theta,
            &BTreeSet::from([LinkIdx(0)]),
            &net,
            &ShadowPriceOptions::default(),
        )
        .unwrap();
        assert_eq!(w.get(LinkIdx(0)), 0.0);
        assert_eq!(rep.warnings.len(), 1);
        let _ = cs;
    }

    fn record(net: &Network, t: i64, x1: f64, x2: f64, u: f64) -> IntervalRecord {
        IntervalRecord {
            t,
            flows: FlowSnapshot::from_pairs(t, net, &[("p1", x1), ("p2", x2)]).unwrap(),
            capacities: CapacityVector::from_pairs(t, CapacityProvenance::ObservedIntervalEnd, net, &[("p1", u)])
                .unwrap(),
        }
    }

    fn model(net: &Network) -> OfflineModel {
        OfflineModel {
            theta: Dispersion::uniform(net, 0.0905),
            efficiency: EfficiencyModel::default().with_mode(0, Coefficients::new(0.0, 0.0, 0.0, 0.0)),
        }
    }

    #[test]
    fn step_with_binding_link() {
        let (net, cs) = two_path();
        let mut state = OnlineState::new(model(&net), record(&net, 0, 58.0, 47.0, 58.0), &net).unwrap();
        let res = online_step(
            &mut state,
            &split(&cs, 1, 58.0, 47.0),
            std::slice::from_ref(&cs),
            &net,
            &OnlineConfig::default(),
            &Myopic,
        )
        .unwrap();
        assert_eq!(res.t, 1);
        assert_eq!(res.binding, BTreeSet::from([LinkIdx(0)]));
        assert!((res.w_hat.get(LinkIdx(0)) - 2.68).abs() < 0.02);
        assert!((res.predicted_shares[&cs.od][0] - 0.55).abs() < 0.005);
    }

    #[test]
    fn step_without_binding_matches_cost_only() {
        let (net, cs) = two_path();
        let m = model(&net);
        let mut state = OnlineState::new(m.clone(), record(&net, 0, 10.0, 47.0, 58.0), &net).unwrap();
        let res = online_step(&mut state, &split(&cs, 1, 58.0, 47.0), &[], &net, &OnlineConfig::default(), &Myopic)
            .unwrap();
        assert!(res.binding.is_empty());
        let base = cost_only_shares(std::slice::from_ref(&cs), &m.theta, &net).unwrap();
        assert_eq!(res.predicted_shares, base);
    }

    #[test]
    fn stream_ordering_and_missing_capacity() {
        let (net, cs) = two_path();
        let item = |t: i64| StreamItem {
            record: record(&net, t, 50.0, 50.0, 80.0),
            observations: split(&cs, t, 50.0, 50.0),
        };
        let cfg = OnlineConfig::default();
        let prior = record(&net, 0, 0.0, 0.0, 80.0);
        let out = run_online(model(&net), prior.clone(), vec![], &[], &net, &cfg).unwrap();
        assert!(out.is_empty());
        let out = run_online(model(&net), prior.clone(), vec![item(1), item(2)], &[], &net, &cfg).unwrap();
        assert_eq!(out.len(), 2);

        let err = run_online(model(&net), prior.clone(), vec![item(1), item(3)], &[], &net, &cfg).unwrap_err();
        assert!(matches!(err, Error::OutOfOrder { position: 1, expected: 2, got: 3 }));

        let mut broken = item(2);
        broken.record.capacities.capacities.clear();
        let err = run_online(model(&net), prior, vec![item(1), broken, item(3)], &[], &net, &cfg).unwrap_err();
        assert!(matches!(err, Error::MissingObservedCapacity { t: 2, .. }), "{err:?}");
    }

    #[test]
    fn lagged_mode_uses_previous_choices() {
        let (net, cs) = two_path();
        let cfg = OnlineConfig {
            observation_lag: ObservationLag::Lagged,
            ..OnlineConfig::default()
        };
        let prior = record(&net, 0, 58.0, 47.0, 58.0);
        let stream = vec![
            StreamItem {
                record: record(&net, 1, 58.0, 47.0, 58.0),
                observations: split(&cs, 1, 58.0, 47.0),
            },
            StreamItem {
                record: record(&net, 2, 58.0, 37.0, 58.0),
                observations: split(&cs, 2, 58.0, 37.0),
            },
        ];
        let out = run_online(model(&net), prior, stream, &[], &net, &cfg).unwrap();
        // No earlier choices at the first step.
        assert_eq!(out[0].w_hat.get(LinkIdx(0)), 0.0);
        assert!((out[1].w_hat.get(LinkIdx(0)) - 2.68).abs() < 0.02);
        assert_eq!(out[1].observation_source, ObservationLag::Lagged);
    }
}

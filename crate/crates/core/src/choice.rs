//! Multinomial logit route choice with capacity shadow prices.
//!
//! The representative utility of route k is
//! `V_k = −Σ_m θ_m Σ_{a ∈ A_km} (c_a + w_a)`, so the dispersion θ_m scales
//! both link costs and shadow prices of mode m.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{ChoiceSet, LinkIdx, ModeIdx, Network, Route};
use crate::optimize::{maximize, AscentOptions, Evaluation};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub theta: BTreeMap<ModeIdx, f64>,
}

impl Dispersion {
    /// The same θ for every mode of the network.
    pub fn uniform(network: &Network, value: f64) -> Self {
        Self {
            theta: network.modes().iter().map(|m| (m.index, value)).collect(),
        }
    }

    pub fn get(&self, mode: ModeIdx) -> Result<f64> {
        self.theta.get(&mode).copied().ok_or(Error::MissingTheta(mode))
    }

    pub fn validate(&self) -> Result<()> {
        match self.theta.iter().find(|(_, &v)| !(v >= 0.0) || !v.is_finite()) {
            Some((m, v)) => Err(Error::InvalidInput(format!("θ for mode {m} must be ≥ 0, got {v}"))),
            None => Ok(()),
        }
    }
}

/// Shadow prices per link for one interval; links absent price at 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ShadowPriceVector {
    pub interval: i64,
    pub prices: BTreeMap<LinkIdx, f64>,
}

impl ShadowPriceVector {
    pub fn zero(interval: i64) -> Self {
        Self {
            interval,
            prices: BTreeMap::new(),
        }
    }

    pub fn get(&self, link: LinkIdx) -> f64 {
        self.prices.get(&link).copied().unwrap_or(0.0)
    }

    pub fn with(mut self, link: LinkIdx, price: f64) -> Self {
        self.prices.insert(link, price);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChoiceObservation {
    pub interval: i64,
    pub choice_set: ChoiceSet,
    /// Index into `choice_set.routes`.
    pub chosen: usize,
    /// Number of identical trips represented.
    pub weight: f64,
}

impl ChoiceObservation {
    pub fn new(interval: i64, choice_set: ChoiceSet, chosen: usize, weight: f64) -> Result<Self> {
        if chosen >= choice_set.routes.len() {
            return Err(Error::InvalidObservation(format!(
                "chosen index {chosen} out of range for {} routes of OD {}",
                choice_set.routes.len(),
                choice_set.od
            )));
        }
        if !(weight > 0.0) || !weight.is_finite() {
            return Err(Error::InvalidObservation(format!("weight must be positive, got {weight}")));
        }
        Ok(Self {
            interval,
            choice_set,
            chosen,
            weight,
        })
    }
}

/// Per-mode generalized cost Σ_{a ∈ A_km} (c_a + w_a) of a route.
pub fn route_generalized_costs(
    route: &Route,
    w: &ShadowPriceVector,
    network: &Network,
) -> Result<BTreeMap<ModeIdx, f64>> {
    let mut out = BTreeMap::new();
    for (&mode, links) in &route.mode_partition {
        let mut sum = 0.0;
        for &l in links {
            if !network.contains(l) {
                return Err(Error::UnknownLink(format!("#{}", l.0)));
            }
            sum += network.link(l).cost + w.get(l);
        }
        out.insert(mode, sum);
    }
    Ok(out)
}

pub fn representative_utility(
    route: &Route,
    theta: &Dispersion,
    w: &ShadowPriceVector,
    network: &Network,
) -> Result<f64> {
    let costs = route_generalized_costs(route, w, network)?;
    let mut v = 0.0;
    for (mode, cost) in costs {
        v -= theta.get(mode)? * cost;
    }
    Ok(v)
}

pub fn utilities(
    choice_set: &ChoiceSet,
    theta: &Dispersion,
    w: &ShadowPriceVector,
    network: &Network,
) -> Result<Vec<f64>> {
    choice_set
        .routes
        .iter()
        .map(|r| representative_utility(r, theta, w, network))
        .collect()
}

/// ln Σ exp(v), stabilized by the maximum.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn choice_probabilities(
    choice_set: &ChoiceSet,
    theta: &Dispersion,
    w: &ShadowPriceVector,
    network: &Network,
) -> Result<Vec<f64>> {
    if choice_set.routes.is_empty() {
        return Err(Error::EmptyChoiceSet {
            origin: choice_set.od.origin.clone(),
            destination: choice_set.od.destination.clone(),
        });
    }
    Ok(softmax(&utilities(choice_set, theta, w, network)?))
}

/// Weighted Σ ln P(chosen). Singleton choice sets contribute nothing.
pub fn log_likelihood(
    observations: &[ChoiceObservation],
    theta: &Dispersion,
    w: &ShadowPriceVector,
    network: &Network,
) -> Result<f64> {
    let mut ll = 0.0;
    for (i, obs) in observations.iter().enumerate() {
        if obs.choice_set.routes.len() < 2 {
            continue;
        }
        let v = utilities(&obs.choice_set, theta, w, network)?;
        let log_p = v[obs.chosen] - log_sum_exp(&v);
        if !log_p.is_finite() || log_p.exp() == 0.0 {
            return Err(Error::ProbabilityUnderflow {
                index: i,
                t: obs.interval,
            });
        }
        ll += obs.weight * log_p;
    }
    Ok(ll)
}

/// ∂ log-likelihood / ∂θ_m for every mode in `theta`.
pub fn grad_theta(
    observations: &[ChoiceObservation],
    theta: &Dispersion,
    w: &ShadowPriceVector,
    network: &Network,
) -> Result<BTreeMap<ModeIdx, f64>> {
    let mut grad: BTreeMap<ModeIdx, f64> = theta.theta.keys().map(|&m| (m, 0.0)).collect();
    for obs in observations.iter().filter(|o| o.choice_set.routes.len() > 1) {
        let p = choice_probabilities(&obs.choice_set, theta, w, network)?;
        let costs = obs
            .choice_set
            .routes
            .iter()
            .map(|r| route_generalized_costs(r, w, network))
            .collect::<Result<Vec<_>>>()?;
        for (&mode, g) in grad.iter_mut() {
            let cost = |k: usize| costs[k].get(&mode).copied().unwrap_or(0.0);
            let expected: f64 = p.iter().enumerate().map(|(k, pk)| pk * cost(k)).sum();
            *g += obs.weight * (expected - cost(obs.chosen));
        }
    }
    Ok(grad)
}

/// ∂ log-likelihood / ∂w_a for the links in `binding` only.
pub fn grad_w(
    observations: &[ChoiceObservation],
    theta: &Dispersion,
    w: &ShadowPriceVector,
    network: &Network,
    binding: &BTreeSet<LinkIdx>,
) -> Result<BTreeMap<LinkIdx, f64>> {
    let mut grad: BTreeMap<LinkIdx, f64> = binding.iter().map(|&l| (l, 0.0)).collect();
    for obs in observations.iter().filter(|o| o.choice_set.routes.len() > 1) {
        let p = choice_probabilities(&obs.choice_set, theta, w, network)?;
        for (&link, g) in grad.iter_mut() {
            let th = theta.get(network.link(link).mode)?;
            let count = |r: &Route| r.links.iter().filter(|&&l| l == link).count() as f64;
            let expected: f64 = obs
                .choice_set
                .routes
                .iter()
                .zip(&p)
                .map(|(r, pk)| pk * count(r))
                .sum();
            *g += obs.weight * th * (expected - count(&obs.choice_set.routes[obs.chosen]));
        }
    }
    Ok(grad)
}

/// Expected maximum utility ln Σ exp(V) of a choice set.
pub fn logsum(
    choice_set: &ChoiceSet,
    theta: &Dispersion,
    w: &ShadowPriceVector,
    network: &Network,
) -> Result<f64> {
    if choice_set.routes.is_empty() {
        return Err(Error::EmptyChoiceSet {
            origin: choice_set.od.origin.clone(),
            destination: choice_set.od.destination.clone(),
        });
    }
    Ok(log_sum_exp(&utilities(choice_set, theta, w, network)?))
}

/// Change in consumer surplus from `w_from` to `w_to`, in utility units,
/// or in cost units when divided by `reference_theta`.
pub fn logsum_consumer_surplus(
    choice_set: &ChoiceSet,
    theta: &Dispersion,
    w_from: &ShadowPriceVector,
    w_to: &ShadowPriceVector,
    network: &Network,
    reference_theta: Option<f64>,
) -> Result<f64> {
    let delta = logsum(choice_set, theta, w_to, network)? - logsum(choice_set, theta, w_from, network)?;
    Ok(match reference_theta {
        Some(t) if t > 0.0 => delta / t,
        _ => delta,
    })
}

/// An MNL whose utilities are affine in a parameter vector:
/// `V_k = offset_k + Σ_p design[k][p] · β_p`.
#[derive(Clone, Debug, Default)]
pub(crate) struct LinearMnl {
    observations: Vec<LinearObservation>,
    dim: usize,
}

#[derive(Clone, Debug)]
struct LinearObservation {
    weight: f64,
    chosen: usize,
    offsets: Vec<f64>,
    design: Vec<Vec<f64>>,
}

impl LinearMnl {
    pub(crate) fn new(dim: usize) -> Self {
        Self {
            observations: Vec::new(),
            dim,
        }
    }

    pub(crate) fn push(&mut self, weight: f64, chosen: usize, offsets: Vec<f64>, design: Vec<Vec<f64>>) {
        if offsets.len() > 1 {
            self.observations.push(LinearObservation {
                weight,
                chosen,
                offsets,
                design,
            });
        }
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    /// Whether any observation's utilities depend on parameter `p`
    /// differently across alternatives.
    pub(crate) fn informative(&self, p: usize) -> bool {
        self.observations.iter().any(|o| {
            let first = o.design[0][p];
            o.design.iter().any(|row| row[p] != first)
        })
    }

    pub(crate) fn evaluate(&self, beta: &[f64]) -> Evaluation {
        let d = self.dim;
        let mut value = 0.0;
        let mut gradient = vec![0.0; d];
        let mut hessian = vec![vec![0.0; d]; d];
        let mut mean = vec![0.0; d];
        for obs in &self.observations {
            let v: Vec<f64> = obs
                .offsets
                .iter()
                .zip(&obs.design)
                .map(|(o, row)| o + row.iter().zip(beta).map(|(x, b)| x * b).sum::<f64>())
                .collect();
            let lse = log_sum_exp(&v);
            let p: Vec<f64> = v.iter().map(|x| (x - lse).exp()).collect();
            value += obs.weight * (v[obs.chosen] - lse);

            mean.iter_mut().for_each(|m| *m = 0.0);
            for (pk, row) in p.iter().zip(&obs.design) {
                for (m, x) in mean.iter_mut().zip(row) {
                    *m += pk * x;
                }
            }
            for (g, (x, m)) in gradient.iter_mut().zip(obs.design[obs.chosen].iter().zip(&mean)) {
                *g += obs.weight * (x - m);
            }
            for (pk, row) in p.iter().zip(&obs.design) {
                for i in 0..d {
                    let di = row[i] - mean[i];
                    if di == 0.0 {
                        continue;
                    }
                    for j in 0..d {
                        hessian[i][j] -= obs.weight * pk * di * (row[j] - mean[j]);
                    }
                }
            }
        }
        Evaluation {
            value,
            gradient,
            hessian,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub log_likelihood: f64,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub converged: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThetaOptions {
    /// One θ shared by all modes.
    pub tied: bool,
    pub initial: f64,
    pub theta_max: f64,
    pub ascent: AscentOptions,
}

impl Default for ThetaOptions {
    fn default() -> Self {
        Self {
            tied: false,
            initial: 0.1,
            theta_max: 1e3,
            ascent: AscentOptions::default(),
        }
    }
}

/// Maximum-likelihood dispersion from uncongested observations (w ≡ 0).
pub fn estimate_theta(
    observations: &[ChoiceObservation],
    network: &Network,
    options: &ThetaOptions,
) -> Result<(Dispersion, EstimationReport)> {
    estimate_theta_given_prices(observations, &ShadowPriceVector::zero(0), network, options)
}

/// Maximum-likelihood dispersion with shadow prices held fixed.
pub fn estimate_theta_given_prices(
    observations: &[ChoiceObservation],
    w: &ShadowPriceVector,
    network: &Network,
    options: &ThetaOptions,
) -> Result<(Dispersion, EstimationReport)> {
    let modes: Vec<ModeIdx> = if options.tied {
        vec![0]
    } else {
        network.modes().iter().map(|m| m.index).collect()
    };
    let dim = modes.len();
    let mut mnl = LinearMnl::new(dim);
    for obs in observations {
        let mut design = Vec::with_capacity(obs.choice_set.routes.len());
        for route in &obs.choice_set.routes {
            let costs = route_generalized_costs(route, w, network)?;
            let row = if options.tied {
                vec![-costs.values().sum::<f64>()]
            } else {
                modes
                    .iter()
                    .map(|m| -costs.get(m).copied().unwrap_or(0.0))
                    .collect()
            };
            design.push(row);
        }
        let n = design.len();
        mnl.push(obs.weight, obs.chosen, vec![0.0; n], design);
    }
    if mnl.is_empty() {
        return Err(Error::FlatLikelihood(
            "every observation has a singleton choice set".into(),
        ));
    }

    let lower = vec![0.0; dim];
    let upper = vec![options.theta_max; dim];
    let mut res = maximize(
        |b| mnl.evaluate(b),
        vec![options.initial; dim],
        &lower,
        &upper,
        &options.ascent,
    );
    // Under separation the gradient vanishes numerically long before the
    // supremum; probe the upper bound of each coordinate.
    for i in 0..dim {
        let mut probe = res.x.clone();
        probe[i] = options.theta_max;
        let value = mnl.evaluate(&probe).value;
        if value > res.value {
            res = maximize(|b| mnl.evaluate(b), probe, &lower, &upper, &options.ascent);
        }
    }

    let mut warnings = Vec::new();
    for (i, &value) in res.x.iter().enumerate() {
        if value >= options.theta_max {
            let msg = format!(
                "θ{} reached the cap {}; the data are perfectly separated",
                if options.tied { String::new() } else { format!(" for mode {}", modes[i]) },
                options.theta_max
            );
            warn!("{msg}");
            warnings.push(msg);
        }
        if !options.tied && !mnl.informative(i) {
            warnings.push(format!("θ for mode {} is not identified by the data", modes[i]));
        }
    }
    if !res.converged {
        warn!("θ estimation did not converge in {} iterations", res.iterations);
    }

    let theta = if options.tied {
        Dispersion::uniform(network, res.x[0])
    } else {
        Dispersion {
            theta: modes.iter().copied().zip(res.x.iter().copied()).collect(),
        }
    };
    Ok((
        theta,
        EstimationReport {
            log_likelihood: res.value,
            iterations: res.iterations,
            gradient_norm: res.projected_gradient_norm,
            converged: res.converged,
            warnings,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_network, CapacityChannel, Link, Node, Od, RouteKey};
    use crate::presets;

    /// Two parallel single-link routes with the given costs.
    fn two_routes(c1: f64, c2: f64) -> (Network, ChoiceSet) {
        let net = build_network(
            vec![Node::new("o"), Node::new("d")],
            vec![],
            vec![
                Link::new("r1", "o", "d", 0, c1, CapacityChannel::Space),
                Link::new("r2", "o", "d", 0, c2, CapacityChannel::None),
            ],
        )
        .unwrap();
        let od = Od::new("o", "d");
        let cs = ChoiceSet::new(
            od.clone(),
            vec![
                Route::new(&net, od.clone(), RouteKey::new("1", "1"), &["r1"]).unwrap(),
                Route::new(&net, od, RouteKey::new("2", "2"), &["r2"]).unwrap(),
            ],
        )
        .unwrap();
        (net, cs)
    }

    #[test]
    fn utility_with_shadow_price() {
        let (net, cs) = two_routes(30.0, 35.0);
        let theta = Dispersion::uniform(&net, 0.0905);
        let w = ShadowPriceVector::zero(0).with(LinkIdx(0), 2.68);
        let v = representative_utility(&cs.routes[0], &theta, &w, &net).unwrap();
        assert!((v - (-0.0905 * 32.68)).abs() < 1e-12);
        assert!((v + 2.9575).abs() < 1e-4);
        let v2 = representative_utility(&cs.routes[1], &theta, &ShadowPriceVector::zero(0), &net).unwrap();
        assert!((v2 + 3.1675).abs() < 1e-12);
        let zero = Dispersion::uniform(&net, 0.0);
        assert_eq!(representative_utility(&cs.routes[0], &zero, &w, &net).unwrap(), 0.0);
    }

    #[test]
    fn worked_example_probabilities() {
        let (net, cs) = two_routes(30.0, 35.0);
        let theta = Dispersion::uniform(&net, 0.0905);
        let w = ShadowPriceVector::zero(0).with(LinkIdx(0), 2.68);
        let p = choice_probabilities(&cs, &theta, &w, &net).unwrap();
        assert!((p[0] - 0.55).abs() < 0.005, "{p:?}");
        let w = ShadowPriceVector::zero(0).with(LinkIdx(0), 0.03);
        let p = choice_probabilities(&cs, &theta, &w, &net).unwrap();
        assert!((p[0] - 0.61).abs() < 0.005, "{p:?}");
    }

    #[test]
    fn identical_routes_split_evenly() {
        let (net, cs) = two_routes(12.0, 12.0);
        let p = choice_probabilities(&cs, &Dispersion::uniform(&net, 3.0), &ShadowPriceVector::zero(0), &net)
            .unwrap();
        assert_eq!(p, vec![0.5, 0.5]);
    }

    #[test]
    fn loglik_weights() {
        let (net, cs) = two_routes(12.0, 12.0);
        let theta = Dispersion::uniform(&net, 1.0);
        let w = ShadowPriceVector::zero(0);
        let one = ChoiceObservation::new(0, cs.clone(), 0, 1.0).unwrap();
        let three = ChoiceObservation::new(0, cs, 0, 3.0).unwrap();
        let ll1 = log_likelihood(&[one], &theta, &w, &net).unwrap();
        assert!((ll1 - 0.5f64.ln()).abs() < 1e-15);
        let ll3 = log_likelihood(&[three], &theta, &w, &net).unwrap();
        assert!((ll3 - 3.0 * 0.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn loglik_underflow_is_reported() {
        let (net, cs) = two_routes(0.0, 1000.0);
        let obs = ChoiceObservation::new(4, cs, 1, 1.0).unwrap();
        let err = log_likelihood(&[obs], &Dispersion::uniform(&net, 10.0), &ShadowPriceVector::zero(0), &net)
            .unwrap_err();
        assert!(matches!(err, Error::ProbabilityUnderflow { index: 0, t: 4 }));
    }

    #[test]
    fn observation_validation() {
        let (_, cs) = two_routes(1.0, 2.0);
        assert!(ChoiceObservation::new(0, cs.clone(), 2, 1.0).is_err());
        assert!(ChoiceObservation::new(0, cs, 0, 0.0).is_err());
    }

    #[test]
    fn symmetric_gradient_is_zero() {
        let (net, cs) = two_routes(20.0, 20.0);
        let obs = vec![
            ChoiceObservation::new(0, cs.clone(), 0, 1.0).unwrap(),
            ChoiceObservation::new(0, cs, 1, 1.0).unwrap(),
        ];
        for th in [0.0, 0.05, 1.0] {
            let g = grad_theta(&obs, &Dispersion::uniform(&net, th), &ShadowPriceVector::zero(0), &net).unwrap();
            assert!(g.values().all(|v| v.abs() < 1e-12));
        }
    }

    #[test]
    fn grad_w_only_on_binding_links() {
        let (net, cs) = two_routes(30.0, 35.0);
        let obs = vec![ChoiceObservation::new(0, cs, 1, 2.0).unwrap()];
        let binding = BTreeSet::from([LinkIdx(0)]);
        let g = grad_w(&obs, &Dispersion::uniform(&net, 0.1), &ShadowPriceVector::zero(0), &net, &binding)
            .unwrap();
        assert_eq!(g.keys().copied().collect::<Vec<_>>(), vec![LinkIdx(0)]);
        assert!(g[&LinkIdx(0)] > 0.0);
    }

    #[test]
    fn single_route_logsum() {
        let (net, cs) = two_routes(30.0, 35.0);
        let single = ChoiceSet::new(cs.od.clone(), vec![cs.routes[0].clone()]).unwrap();
        let theta = Dispersion::uniform(&net, 0.1);
        let ls = logsum(&single, &theta, &ShadowPriceVector::zero(0), &net).unwrap();
        assert!((ls + 3.0).abs() < 1e-12);
    }

    #[test]
    fn surplus_change_worked_example() {
        let (net, cs) = two_routes(30.0, 35.0);
        let theta = Dispersion::uniform(&net, 0.0905);
        let high = ShadowPriceVector::zero(0).with(LinkIdx(0), 2.68);
        let low = ShadowPriceVector::zero(0).with(LinkIdx(0), 0.03);
        let d = logsum_consumer_surplus(&cs, &theta, &high, &low, &net, None).unwrap();
        // Hand evaluation: ln(e^{-2.957540} + e^{-3.1675}) − ln(e^{-2.717715} + e^{-3.1675}).
        let hand = ((-2.95754f64).exp() + (-3.1675f64).exp()).ln();
        let hand = ((-2.717715f64).exp() + (-3.1675f64).exp()).ln() - hand;
        assert!(d > 0.0);
        assert!((d - hand).abs() < 1e-9, "{d} vs {hand}");
    }

    #[test]
    fn singleton_only_data_is_flat() {
        let net = presets::parallel_network();
        let od = Od::new("1", "2");
        let cs = ChoiceSet::new(
            od.clone(),
            vec![Route::new(&net, od, RouteKey::new("a", "a"), &["a"]).unwrap()],
        )
        .unwrap();
        let obs = vec![ChoiceObservation::new(0, cs, 0, 5.0).unwrap()];
        assert!(matches!(
            estimate_theta(&obs, &net, &ThetaOptions::default()),
            Err(Error::FlatLikelihood(_))
        ));
    }

    #[test]
    fn perfect_separation_hits_cap() {
        let (net, cs) = two_routes(30.0, 35.0);
        let obs = vec![ChoiceObservation::new(0, cs, 0, 10.0).unwrap()];
        let opts = ThetaOptions {
            tied: true,
            ..ThetaOptions::default()
        };
        let (theta, report) = estimate_theta(&obs, &net, &opts).unwrap();
        assert_eq!(theta.get(0).unwrap(), 1e3);
        assert!(!report.warnings.is_empty());
    }
}

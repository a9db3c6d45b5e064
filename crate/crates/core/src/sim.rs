//! Synthetic choice and capacity data.
//!
//! Each interval, every unit of demand is one traveler. Travelers arrive in
//! random order and rank routes by Gumbel-perturbed cost utilities. A
//! traveler takes the highest-ranked route that keeps every capacitated link
//! within its deterministic end-of-interval capacity, or is dropped. After the
//! interval each capacity receives one Gaussian disturbance, censored so the
//! realized capacity never falls below the realized flow.

use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gumbel, Normal};

use crate::capacity::{
    capacity_change, flow_aggregates, CapacityProvenance, CapacityVector, Coefficients, EfficiencyModel,
    FlowSnapshot, IntervalRecord,
};
use crate::choice::{utilities, ChoiceObservation, Dispersion, ShadowPriceVector};
use crate::error::{Error, Result};
use crate::network::{ChoiceSet, LinkIdx, Network, Od};
use crate::presets;

/// Capacity given to every link in an uncapacitated scenario.
pub const UNCAPACITATED: f64 = 1e9;

#[derive(Clone, Debug, PartialEq)]
pub enum Demand {
    /// The same number of travelers every interval.
    Constant(BTreeMap<Od, u32>),
    /// Travelers per interval, indexed from interval 1.
    Series(BTreeMap<Od, Vec<u32>>),
}

impl Demand {
    pub fn at(&self, od: &Od, t: i64) -> u32 {
        match self {
            Demand::Constant(m) => m.get(od).copied().unwrap_or(0),
            Demand::Series(m) => m
                .get(od)
                .and_then(|v| v.get((t - 1) as usize))
                .copied()
                .unwrap_or(0),
        }
    }

    pub fn ods(&self) -> BTreeSet<Od> {
        match self {
            Demand::Constant(m) => m.keys().cloned().collect(),
            Demand::Series(m) => m.keys().cloned().collect(),
        }
    }

    pub fn uniform(ods: impl IntoIterator<Item = Od>, value: u32) -> Self {
        Demand::Constant(ods.into_iter().map(|od| (od, value)).collect())
    }
}

#[derive(Clone, Debug)]
pub struct ScenarioConfig {
    pub network: Network,
    pub choice_sets: Vec<ChoiceSet>,
    pub theta_true: Dispersion,
    pub beta_true: EfficiencyModel,
    pub demand: Demand,
    pub u_initial: CapacityVector,
    pub noise_sigma: BTreeMap<LinkIdx, f64>,
    pub seed: u64,
    pub intervals: usize,
}

impl ScenarioConfig {
    /// The two-node closed network with one OD per direction.
    pub fn parallel(seed: u64, intervals: usize, demand: u32, capacity: f64) -> Self {
        let network = presets::parallel_network();
        let choice_sets = presets::parallel_choice_sets(&network);
        Self {
            theta_true: presets::verification_dispersion(&network),
            beta_true: presets::parallel_efficiency(),
            demand: Demand::uniform(choice_sets.iter().map(|cs| cs.od.clone()), demand),
            u_initial: presets::uniform_capacity(&network, 0, capacity),
            noise_sigma: BTreeMap::new(),
            choice_sets,
            network,
            seed,
            intervals,
        }
    }

    /// The drive/bike network with its per-link ground-truth coefficients.
    pub fn multimodal(seed: u64, intervals: usize, demand: u32, capacity: f64, sigma: f64) -> Self {
        let network = presets::multimodal_network();
        let choice_sets = presets::multimodal_choice_sets(&network);
        let noise_sigma = network.capacitated_links().map(|l| (l, sigma)).collect();
        Self {
            theta_true: presets::verification_dispersion(&network),
            beta_true: presets::multimodal_efficiency(),
            demand: Demand::uniform(choice_sets.iter().map(|cs| cs.od.clone()), demand),
            u_initial: presets::uniform_capacity(&network, 0, capacity),
            noise_sigma,
            choice_sets,
            network,
            seed,
            intervals,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.intervals == 0 {
            return Err(Error::InvalidScenario("at least one interval is required".into()));
        }
        self.theta_true.validate()?;
        let covered: BTreeSet<Od> = self.choice_sets.iter().map(|cs| cs.od.clone()).collect();
        let ods = self.demand.ods();
        if ods.is_empty() {
            return Err(Error::InvalidScenario("no demand".into()));
        }
        for od in &ods {
            if !covered.contains(od) {
                return Err(Error::InvalidScenario(format!("demand for OD {od} has no choice set")));
            }
            for t in 1..=self.intervals as i64 {
                if self.demand.at(od, t) == 0 {
                    return Err(Error::InvalidScenario(format!(
                        "demand for OD {od} must be positive, got 0 at t = {t}"
                    )));
                }
            }
        }
        for l in self.network.capacitated_links() {
            if self.u_initial.get(l).is_none() {
                return Err(Error::MissingCapacity(self.network.link_id(l).to_string()));
            }
            self.beta_true.coefficients_for(&self.network, l)?;
        }
        for (&l, &s) in &self.noise_sigma {
            if !(s >= 0.0) || !s.is_finite() {
                return Err(Error::InvalidScenario(format!(
                    "noise scale for link {} must be ≥ 0, got {s}",
                    self.network.link_id(l)
                )));
            }
        }
        Ok(())
    }
}

/// A copy of `base` with its demand replaced.
pub fn demand_shift_scenario(base: &ScenarioConfig, new_demand: Demand) -> Result<ScenarioConfig> {
    if new_demand.ods() != base.demand.ods() {
        return Err(Error::InvalidScenario("shifted demand must cover the same ODs".into()));
    }
    Ok(ScenarioConfig {
        demand: new_demand,
        ..base.clone()
    })
}

/// What the simulator knows but an estimator would not.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalTruth {
    pub t: i64,
    pub demand: BTreeMap<Od, u32>,
    pub served: BTreeMap<Od, u32>,
    pub dropped: BTreeMap<Od, u32>,
    /// Travelers who took a route other than their first preference.
    pub diverted: u32,
    /// Capacities before the disturbance.
    pub u_deterministic: BTreeMap<LinkIdx, f64>,
    /// Links whose realized flow reached the realized capacity.
    pub binding: BTreeSet<LinkIdx>,
    /// Counts of travelers per route index.
    pub route_flows: BTreeMap<Od, Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimulationOutput {
    /// Realized state for t = 0 (initial capacities, no flow) through T.
    pub records: Vec<IntervalRecord>,
    pub observations: Vec<ChoiceObservation>,
    pub truth: Vec<IntervalTruth>,
    /// Cost-only route probabilities under the true θ.
    pub cost_only_shares: BTreeMap<Od, Vec<f64>>,
}

impl SimulationOutput {
    pub fn observations_at(&self, t: i64) -> Vec<ChoiceObservation> {
        self.observations.iter().filter(|o| o.interval == t).cloned().collect()
    }
}

struct CapacityModel {
    links: Vec<LinkIdx>,
    beta: BTreeMap<LinkIdx, Coefficients>,
    /// Capacitated links whose capacity reacts to flow on each link.
    dependents: Vec<BTreeSet<LinkIdx>>,
}

impl CapacityModel {
    fn new(network: &Network, beta_true: &EfficiencyModel) -> Result<Self> {
        let links: Vec<LinkIdx> = network.capacitated_links().collect();
        let mut dependents = vec![BTreeSet::new(); network.link_count()];
        let mut beta = BTreeMap::new();
        for &a in &links {
            beta.insert(a, beta_true.coefficients_for(network, a)?);
            let inc = network.incidence(a);
            dependents[a.0].insert(a);
            for set in [&inc.inbound_tail, &inc.outbound_tail, &inc.inbound_head, &inc.outbound_head] {
                for &b in set {
                    dependents[b.0].insert(a);
                }
            }
        }
        Ok(Self {
            links,
            beta,
            dependents,
        })
    }

    fn deterministic(&self, network: &Network, link: LinkIdx, u_prev: &CapacityVector, flows: &FlowSnapshot) -> f64 {
        let prev = u_prev.get(link).unwrap_or(0.0);
        prev + capacity_change(&self.beta[&link], &flow_aggregates(network, link, flows))
    }
}

/// Runs the scenario and returns every interval's realized data.
pub fn simulate(config: &ScenarioConfig) -> Result<SimulationOutput> {
    config.validate()?;
    let network = &config.network;
    let model = CapacityModel::new(network, &config.beta_true)?;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");

    let sets: Vec<&ChoiceSet> = config
        .demand
        .ods()
        .iter()
        .map(|od| config.choice_sets.iter().find(|cs| &cs.od == od).expect("validated"))
        .collect();
    let zero_w = ShadowPriceVector::zero(0);
    let base_utilities = sets
        .iter()
        .map(|cs| utilities(cs, &config.theta_true, &zero_w, network))
        .collect::<Result<Vec<_>>>()?;
    let cost_only_shares = sets
        .iter()
        .zip(&base_utilities)
        .map(|(cs, v)| (cs.od.clone(), crate::choice::softmax(v)))
        .collect();
    // Capacitated links to check when a route is loaded.
    let affected: Vec<Vec<Vec<LinkIdx>>> = sets
        .iter()
        .map(|cs| {
            cs.routes
                .iter()
                .map(|r| {
                    let mut s = BTreeSet::new();
                    for &l in &r.links {
                        s.extend(model.dependents[l.0].iter().copied());
                    }
                    s.into_iter().collect()
                })
                .collect()
        })
        .collect();

    let mut u_prev = config.u_initial.clone();
    u_prev.interval = 0;
    u_prev.provenance = CapacityProvenance::ObservedIntervalEnd;
    let mut records = vec![IntervalRecord {
        t: 0,
        flows: FlowSnapshot::zeros(0, network),
        capacities: u_prev.clone(),
    }];
    let mut observations = Vec::new();
    let mut truth = Vec::new();

    for t in 1..=config.intervals as i64 {
        let mut travelers = Vec::new();
        let mut demand = BTreeMap::new();
        for (i, cs) in sets.iter().enumerate() {
            let d = config.demand.at(&cs.od, t);
            demand.insert(cs.od.clone(), d);
            travelers.extend(std::iter::repeat_n(i, d as usize));
        }
        travelers.shuffle(&mut rng);

        let mut flows = FlowSnapshot::zeros(t, network);
        let mut counts: Vec<Vec<u32>> = sets.iter().map(|cs| vec![0; cs.routes.len()]).collect();
        let mut dropped: Vec<u32> = vec![0; sets.len()];
        let mut diverted = 0;
        for &i in &travelers {
            let mut ranked: Vec<(f64, usize)> = base_utilities[i]
                .iter()
                .enumerate()
                .map(|(k, v)| (v + gumbel.sample(&mut rng), k))
                .collect();
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut admitted = None;
            for (rank, &(_, k)) in ranked.iter().enumerate() {
                let route = &sets[i].routes[k];
                for &l in &route.links {
                    flows.flows[l.0] += 1.0;
                }
                let feasible = affected[i][k]
                    .iter()
                    .all(|&a| flows.get(a) <= model.deterministic(network, a, &u_prev, &flows));
                if feasible {
                    admitted = Some((rank, k));
                    break;
                }
                for &l in &route.links {
                    flows.flows[l.0] -= 1.0;
                }
            }
            match admitted {
                Some((rank, k)) => {
                    counts[i][k] += 1;
                    if rank > 0 {
                        diverted += 1;
                    }
                }
                None => dropped[i] += 1,
            }
        }

        let mut u_det = BTreeMap::new();
        let mut u_next = CapacityVector::new(t, CapacityProvenance::ObservedIntervalEnd);
        let mut binding = BTreeSet::new();
        for &a in &model.links {
            let det = model.deterministic(network, a, &u_prev, &flows);
            let sigma = config.noise_sigma.get(&a).copied().unwrap_or(0.0);
            let gamma = if sigma > 0.0 {
                Normal::new(0.0, sigma).expect("validated sigma").sample(&mut rng)
            } else {
                0.0
            };
            let x = flows.get(a);
            let u = if det + gamma < x { x } else { det + gamma };
            if x >= u {
                binding.insert(a);
            }
            u_det.insert(a, det);
            u_next.capacities.insert(a, u);
        }

        let mut served = BTreeMap::new();
        let mut dropped_map = BTreeMap::new();
        let mut route_flows = BTreeMap::new();
        for (i, cs) in sets.iter().enumerate() {
            for (k, &n) in counts[i].iter().enumerate() {
                if n > 0 {
                    observations.push(ChoiceObservation::new(t, (*cs).clone(), k, n as f64)?);
                }
            }
            served.insert(cs.od.clone(), counts[i].iter().sum());
            dropped_map.insert(cs.od.clone(), dropped[i]);
            route_flows.insert(cs.od.clone(), counts[i].clone());
            if dropped[i] > 0 {
                warn!("t = {t}: {} of {} travelers for OD {} found no feasible route", dropped[i], demand[&cs.od], cs.od);
            }
        }
        truth.push(IntervalTruth {
            t,
            demand,
            served,
            dropped: dropped_map,
            diverted,
            u_deterministic: u_det,
            binding,
            route_flows,
        });
        records.push(IntervalRecord {
            t,
            flows,
            capacities: u_next.clone(),
        });
        u_prev = u_next;
    }
    info!(
        "simulated {} intervals, {} observation groups",
        config.intervals,
        observations.len()
    );
    Ok(SimulationOutput {
        records,
        observations,
        truth,
        cost_only_shares,
    })
}

/// Samples `n` independent cost-only choices for one choice set.
pub fn sample_choices<R: Rng>(
    choice_set: &ChoiceSet,
    theta: &Dispersion,
    network: &Network,
    n: usize,
    interval: i64,
    rng: &mut R,
) -> Result<Vec<ChoiceObservation>> {
    let v = utilities(choice_set, theta, &ShadowPriceVector::zero(interval), network)?;
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    let mut counts = vec![0u32; v.len()];
    for _ in 0..n {
        let best = v
            .iter()
            .map(|x| x + gumbel.sample(rng))
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(k, _)| k)
            .expect("non-empty choice set");
        counts[best] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .filter(|(_, c)| *c > 0)
        .map(|(k, c)| ChoiceObservation::new(interval, choice_set.clone(), k, c as f64))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capacity::forecast_unclamped;

    #[test]
    fn zero_noise_follows_recursion() {
        let cfg = ScenarioConfig::multimodal(3, 30, 100, 2000.0, 0.0);
        let out = simulate(&cfg).unwrap();
        for w in out.records.windows(2) {
            let det = forecast_unclamped(&w[0].capacities, &w[1].flows, &cfg.beta_true, &cfg.network).unwrap();
            for (l, u) in det {
                assert_eq!(w[1].capacities.get(l).unwrap(), u);
            }
        }
    }

    #[test]
    fn reproducible_and_seed_sensitive() {
        let cfg = ScenarioConfig::multimodal(11, 20, 100, 60.0, 2.0);
        let a = simulate(&cfg).unwrap();
        let b = simulate(&cfg).unwrap();
        assert_eq!(a, b);
        let c = simulate(&ScenarioConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn records_are_feasible_and_conserve_demand() {
        let cfg = ScenarioConfig::multimodal(5, 60, 100, 40.0, 3.0);
        let out = simulate(&cfg).unwrap();
        assert_eq!(out.records.len(), 61);
        for r in &out.records {
            for (l, u) in &r.capacities.capacities {
                assert!(r.flows.get(*l) <= *u, "t = {} link {}", r.t, cfg.network.link_id(*l));
            }
        }
        for tr in &out.truth {
            for (od, d) in &tr.demand {
                assert_eq!(tr.served[od] + tr.dropped[od], *d);
                assert_eq!(tr.route_flows[od].iter().sum::<u32>(), tr.served[od]);
            }
        }
        assert!(out.truth.iter().any(|t| !t.binding.is_empty()));
    }

    #[test]
    fn uncapacitated_share_matches_logit() {
        let cfg = ScenarioConfig::parallel(7, 100, 100, UNCAPACITATED);
        let out = simulate(&cfg).unwrap();
        let od = Od::new("1", "2");
        let first: u32 = out.truth.iter().map(|t| t.route_flows[&od][0]).sum();
        let share = first as f64 / 10_000.0;
        let p = 1.0 / (1.0 + (-0.0905f64 * 5.0).exp());
        assert!((p - 0.6112).abs() < 1e-4);
        // Binomial standard error is about 0.0049.
        assert!((share - p).abs() < 0.015, "{share}");
        assert!(out.truth.iter().all(|t| t.diverted == 0 && t.binding.is_empty()));
    }

    #[test]
    fn invalid_demand_is_rejected() {
        let cfg = ScenarioConfig::parallel(1, 5, 100, UNCAPACITATED);
        let same = demand_shift_scenario(&cfg, cfg.demand.clone()).unwrap();
        assert_eq!(same.demand, cfg.demand);
        let zero = demand_shift_scenario(&cfg, Demand::uniform(cfg.demand.ods(), 0)).unwrap();
        assert!(matches!(simulate(&zero), Err(Error::InvalidScenario(_))));
        let other = Demand::uniform([Od::new("1", "9")], 5);
        assert!(demand_shift_scenario(&cfg, other).is_err());
    }

    #[test]
    fn exhausted_capacity_drops_travelers() {
        let mut cfg = ScenarioConfig::parallel(2, 1, 50, 0.0);
        cfg.beta_true = EfficiencyModel::default()
            .with_mode(1, Coefficients::new(0.0, 0.0, 0.0, 0.0))
            .with_mode(2, Coefficients::new(0.0, 0.0, 0.0, 0.0));
        let out = simulate(&cfg).unwrap();
        assert!(out.observations.is_empty());
        assert!(out.truth[0].dropped.values().all(|&d| d == 50));
    }
}

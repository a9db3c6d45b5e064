//! Congestible capacities: the linear system-efficiency model that maps
//! inbound and outbound link flows to capacity changes, its OLS fit, and
//! per-interval forecasting.
//!
//! For a capacitated link `a` the point forecast is
//!
//! ```text
//! û_a = u_a,prev + β_IT·ΣI_T(a) − β_OT·ΣO_T(a) − β_IH·ΣI_H(a) + β_OH·ΣO_H(a)
//! ```
//!
//! clamped at zero. The O_T and I_H aggregates include `a`'s own flow.

use std::collections::{BTreeMap, BTreeSet};

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{LinkIdx, ModeIdx, Network};
use crate::ols::{ols, OlsFit};

/// Default tolerance for [`binding_set`], in capacity units.
pub const DEFAULT_BINDING_EPSILON: f64 = 1e-6;

/// Minimum number of intervals required by [`fit_efficiency`].
pub const MIN_FIT_INTERVALS: usize = 5;

/// Link flows for one interval, dense over the network's links.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSnapshot {
    pub interval: i64,
    pub flows: Vec<f64>,
}

impl FlowSnapshot {
    pub fn zeros(interval: i64, network: &Network) -> Self {
        Self {
            interval,
            flows: vec![0.0; network.link_count()],
        }
    }

    pub fn from_pairs(interval: i64, network: &Network, pairs: &[(&str, f64)]) -> Result<Self> {
        let mut snapshot = Self::zeros(interval, network);
        for &(id, flow) in pairs {
            let idx = network.require_link(id)?;
            if !(flow >= 0.0) {
                return Err(Error::InvalidInput(format!("negative flow {flow} on link {id}")));
            }
            snapshot.flows[idx.0] = flow;
        }
        Ok(snapshot)
    }

    pub fn get(&self, link: LinkIdx) -> f64 {
        self.flows.get(link.0).copied().unwrap_or(0.0)
    }

    /// Copy of this snapshot relabelled to another interval.
    pub fn relabel(&self, interval: i64) -> Self {
        Self {
            interval,
            flows: self.flows.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityProvenance {
    ObservedTimeAverage,
    ObservedIntervalEnd,
    Forecast,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapacityVector {
    pub interval: i64,
    pub capacities: BTreeMap<LinkIdx, f64>,
    pub provenance: CapacityProvenance,
}

impl CapacityVector {
    pub fn new(interval: i64, provenance: CapacityProvenance) -> Self {
        Self {
            interval,
            capacities: BTreeMap::new(),
            provenance,
        }
    }

    pub fn from_pairs(
        interval: i64,
        provenance: CapacityProvenance,
        network: &Network,
        pairs: &[(&str, f64)],
    ) -> Result<Self> {
        let mut v = Self::new(interval, provenance);
        for &(id, cap) in pairs {
            let idx = network.require_link(id)?;
            if !network.link(idx).capacity_channel.is_capacitated() {
                return Err(Error::InvalidInput(format!("link {id} carries no capacity")));
            }
            if !(cap >= 0.0) {
                return Err(Error::InvalidInput(format!("negative capacity {cap} on link {id}")));
            }
            v.capacities.insert(idx, cap);
        }
        Ok(v)
    }

    pub fn get(&self, link: LinkIdx) -> Option<f64> {
        self.capacities.get(&link).copied()
    }
}

/// Observed flows and post-interval capacities for one interval.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalRecord {
    pub t: i64,
    pub flows: FlowSnapshot,
    pub capacities: CapacityVector,
}

impl IntervalRecord {
    /// Checks that every capacitated link has an observed capacity.
    pub fn require_complete(&self, network: &Network) -> Result<()> {
        for link in network.capacitated_links() {
            if !self.capacities.capacities.contains_key(&link) {
                return Err(Error::MissingObservedCapacity {
                    link: network.link_id(link).to_string(),
                    t: self.t,
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    InboundTail,
    OutboundTail,
    InboundHead,
    OutboundHead,
}

impl Term {
    pub const ALL: [Term; 4] = [
        Term::InboundTail,
        Term::OutboundTail,
        Term::InboundHead,
        Term::OutboundHead,
    ];

    /// Sign with which the term enters the capacity update.
    pub fn sign(self) -> f64 {
        match self {
            Term::InboundTail | Term::OutboundHead => 1.0,
            Term::OutboundTail | Term::InboundHead => -1.0,
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Term::InboundTail => "IT",
            Term::OutboundTail => "OT",
            Term::InboundHead => "IH",
            Term::OutboundHead => "OH",
        }
    }

    fn position(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub inbound_tail: f64,
    pub outbound_tail: f64,
    pub inbound_head: f64,
    pub outbound_head: f64,
}

impl Coefficients {
    pub fn new(it: f64, ot: f64, ih: f64, oh: f64) -> Self {
        Self {
            inbound_tail: it,
            outbound_tail: ot,
            inbound_head: ih,
            outbound_head: oh,
        }
    }

    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::InboundTail => self.inbound_tail,
            Term::OutboundTail => self.outbound_tail,
            Term::InboundHead => self.inbound_head,
            Term::OutboundHead => self.outbound_head,
        }
    }

    pub fn set(&mut self, term: Term, value: f64) {
        match term {
            Term::InboundTail => self.inbound_tail = value,
            Term::OutboundTail => self.outbound_tail = value,
            Term::InboundHead => self.inbound_head = value,
            Term::OutboundHead => self.outbound_head = value,
        }
    }

    pub fn all_equal(value: f64) -> Self {
        Self::new(value, value, value, value)
    }
}

/// What a coefficient group applies to.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Mode(ModeIdx),
    Link(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TermStatus {
    Estimated {
        estimate: f64,
        std_error: f64,
        t_stat: f64,
        /// `None` when the fit has no residual degrees of freedom.
        p_value: Option<f64>,
    },
    /// The aggregate equals another term's aggregate on every row; the
    /// combined effect is carried by that term.
    Aliased { with: Term },
    /// The aggregate is zero on every row.
    Empty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermEstimate {
    pub term: Term,
    #[serde(flatten)]
    pub status: TermStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub observations: usize,
    pub residual_df: usize,
    pub rss: f64,
    pub r_squared: Option<f64>,
    pub terms: Vec<TermEstimate>,
    pub warnings: Vec<String>,
}

impl FitDiagnostics {
    pub fn term(&self, term: Term) -> &TermEstimate {
        self.terms.iter().find(|t| t.term == term).expect("all four terms recorded")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientGroup {
    pub scope: Scope,
    pub beta: Coefficients,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitDiagnostics>,
}

/// β coefficients per mode (or per link) and per-link disturbance scales σ.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyModel {
    pub groups: Vec<CoefficientGroup>,
    /// Residual standard deviation per link id.
    pub sigma: BTreeMap<String, f64>,
}

impl EfficiencyModel {
    pub fn with_mode(mut self, mode: ModeIdx, beta: Coefficients) -> Self {
        self.set(Scope::Mode(mode), beta);
        self
    }

    pub fn with_link(mut self, link: impl Into<String>, beta: Coefficients) -> Self {
        self.set(Scope::Link(link.into()), beta);
        self
    }

    pub fn set(&mut self, scope: Scope, beta: Coefficients) {
        match self.groups.iter_mut().find(|g| g.scope == scope) {
            Some(g) => {
                g.beta = beta;
                g.fit = None;
            }
            None => self.groups.push(CoefficientGroup { scope, beta, fit: None }),
        }
    }

    pub fn group(&self, scope: &Scope) -> Option<&CoefficientGroup> {
        self.groups.iter().find(|g| &g.scope == scope)
    }

    /// Coefficients governing `link`: a link-scoped group wins over the mode group.
    pub fn coefficients_for(&self, network: &Network, link: LinkIdx) -> Result<Coefficients> {
        let l = network.link(link);
        self.group(&Scope::Link(l.id.clone()))
            .or_else(|| self.group(&Scope::Mode(l.mode)))
            .map(|g| g.beta)
            .ok_or_else(|| Error::MissingBeta {
                link: l.id.clone(),
                mode: l.mode,
            })
    }

    /// Merges the groups and σ of `other` into `self`, replacing same-scope groups.
    pub fn merge(&mut self, other: EfficiencyModel) {
        for g in other.groups {
            match self.groups.iter_mut().find(|h| h.scope == g.scope) {
                Some(h) => *h = g,
                None => self.groups.push(g),
            }
        }
        self.sigma.extend(other.sigma);
        self.groups.sort_by(|a, b| a.scope.cmp(&b.scope));
    }
}

/// The four flow aggregates `[IT, OT, IH, OH]` for `link`, in that order.
pub fn flow_aggregates(network: &Network, link: LinkIdx, flows: &FlowSnapshot) -> [f64; 4] {
    let inc = network.incidence(link);
    let sum = |set: &[LinkIdx]| set.iter().map(|&l| flows.get(l)).sum::<f64>();
    let own = flows.get(link);
    [
        sum(&inc.inbound_tail),
        own + sum(&inc.outbound_tail),
        own + sum(&inc.inbound_head),
        sum(&inc.outbound_head),
    ]
}

/// Deterministic capacity change implied by `beta` and the aggregates.
pub fn capacity_change(beta: &Coefficients, agg: &[f64; 4]) -> f64 {
    Term::ALL
        .iter()
        .map(|&t| t.sign() * beta.get(t) * agg[t.position()])
        .sum()
}

/// Forecast before the nonnegativity clamp, for every capacitated link.
pub fn forecast_unclamped(
    u_prev: &CapacityVector,
    x_hat: &FlowSnapshot,
    model: &EfficiencyModel,
    network: &Network,
) -> Result<BTreeMap<LinkIdx, f64>> {
    let mut out = BTreeMap::new();
    for link in network.capacitated_links() {
        let prev = u_prev
            .get(link)
            .ok_or_else(|| Error::MissingCapacity(network.link_id(link).to_string()))?;
        let beta = model.coefficients_for(network, link)?;
        let agg = flow_aggregates(network, link, x_hat);
        out.insert(link, prev + capacity_change(&beta, &agg));
    }
    Ok(out)
}

/// Point forecast û for the interval after `u_prev`, clamped at zero.
pub fn forecast_capacity(
    u_prev: &CapacityVector,
    x_hat: &FlowSnapshot,
    model: &EfficiencyModel,
    network: &Network,
) -> Result<CapacityVector> {
    let raw = forecast_unclamped(u_prev, x_hat, model, network)?;
    Ok(CapacityVector {
        interval: u_prev.interval + 1,
        capacities: raw.into_iter().map(|(l, u)| (l, u.max(0.0))).collect(),
        provenance: CapacityProvenance::Forecast,
    })
}

/// Links whose flow reaches the forecast capacity within `epsilon`.
/// Links where the clamp left û below x̂ are binding as well.
pub fn binding_set(x_hat: &FlowSnapshot, u_hat: &CapacityVector, epsilon: f64) -> BTreeSet<LinkIdx> {
    u_hat
        .capacities
        .iter()
        .filter(|(&l, &u)| x_hat.get(l) >= u - epsilon)
        .map(|(&l, _)| l)
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Granularity {
    /// One set of four β shared by all capacitated links of a mode.
    #[default]
    PerMode,
    /// Separate β for every capacitated link.
    PerLink,
}

/// One interval's transition: prior capacities, flows, observed capacities.
#[derive(Clone, Debug)]
pub struct CapacitySample {
    pub u_prev: CapacityVector,
    pub flows: FlowSnapshot,
    pub u_observed: CapacityVector,
}

/// Pairs consecutive records into transitions `(u_{t-1}, x_t, u_t)`.
pub fn samples_from_records(records: &[IntervalRecord]) -> Vec<CapacitySample> {
    records
        .windows(2)
        .map(|w| CapacitySample {
            u_prev: w[0].capacities.clone(),
            flows: w[1].flows.clone(),
            u_observed: w[1].capacities.clone(),
        })
        .collect()
}

/// Stacked regression data for a set of links.
#[derive(Clone, Debug)]
pub struct RegressionDesign {
    /// Unsigned flow aggregates, indexed by [`Term`] position.
    pub aggregates: [Vec<f64>; 4],
    /// Capacity change u_t − u_{t−1}.
    pub response: Vec<f64>,
    pub row_links: Vec<LinkIdx>,
}

pub fn regression_design(
    samples: &[CapacitySample],
    links: &[LinkIdx],
    network: &Network,
) -> Result<RegressionDesign> {
    let mut design = RegressionDesign {
        aggregates: Default::default(),
        response: Vec::new(),
        row_links: Vec::new(),
    };
    for &link in links {
        for s in samples {
            let missing = || Error::MissingObservedCapacity {
                link: network.link_id(link).to_string(),
                t: s.flows.interval,
            };
            let prev = s.u_prev.get(link).ok_or_else(missing)?;
            let obs = s.u_observed.get(link).ok_or_else(missing)?;
            let agg = flow_aggregates(network, link, &s.flows);
            for (col, v) in design.aggregates.iter_mut().zip(agg) {
                col.push(v);
            }
            design.response.push(obs - prev);
            design.row_links.push(link);
        }
    }
    Ok(design)
}

fn columns_equal(a: &[f64], b: &[f64]) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= 1e-9 * (1.0 + x.abs().max(y.abs())))
}

/// Assigns each term to a regressor: empty, aliased with an earlier term,
/// or its own column.
fn classify_terms(aggregates: &[Vec<f64>; 4]) -> [Option<Term>; 4] {
    // None = empty, Some(t) = represented by t (t == self for representatives).
    let mut rep: [Option<Term>; 4] = [None; 4];
    for (j, &term) in Term::ALL.iter().enumerate() {
        if aggregates[j].iter().all(|&v| v == 0.0) {
            continue;
        }
        rep[j] = Some(
            (0..j)
                .filter(|&i| rep[i] == Some(Term::ALL[i]))
                .find(|&i| columns_equal(&aggregates[i], &aggregates[j]))
                .map(|i| Term::ALL[i])
                .unwrap_or(term),
        );
    }
    rep
}

#[derive(Clone, Debug)]
pub struct GroupFit {
    pub group: CoefficientGroup,
    pub design: RegressionDesign,
    pub ols: OlsFit,
    /// Regressor order used in `ols`.
    pub regressors: Vec<Term>,
}

fn scope_label(scope: &Scope) -> String {
    match scope {
        Scope::Mode(m) => format!("mode {m}"),
        Scope::Link(id) => format!("link {id}"),
    }
}

fn fit_group(
    scope: Scope,
    links: &[LinkIdx],
    samples: &[CapacitySample],
    network: &Network,
) -> Result<GroupFit> {
    let design = regression_design(samples, links, network)?;
    let rep = classify_terms(&design.aggregates);
    let regressors: Vec<Term> = Term::ALL
        .iter()
        .enumerate()
        .filter(|&(j, &t)| rep[j] == Some(t))
        .map(|(_, &t)| t)
        .collect();
    if regressors.is_empty() {
        return Err(Error::RankDeficient {
            column: format!("{}: all flow aggregates are zero", scope_label(&scope)),
        });
    }
    let columns: Vec<Vec<f64>> = regressors
        .iter()
        .map(|&t| design.aggregates[t.position()].iter().map(|v| t.sign() * v).collect())
        .collect();
    let names: Vec<String> = regressors
        .iter()
        .map(|t| format!("{} / {}", scope_label(&scope), t.short()))
        .collect();
    let fit = ols(&columns, &names, &design.response)?;

    let mut beta = Coefficients::default();
    let mut terms = Vec::with_capacity(4);
    let mut warnings = Vec::new();
    for (j, &term) in Term::ALL.iter().enumerate() {
        let status = match rep[j] {
            None => TermStatus::Empty,
            Some(r) if r != term => TermStatus::Aliased { with: r },
            Some(_) => {
                let k = regressors.iter().position(|&t| t == term).unwrap();
                let estimate = fit.coefficients[k];
                beta.set(term, estimate);
                if !(-1.0..=1.0).contains(&estimate) {
                    let msg = format!(
                        "{} {} coefficient {estimate:.4} lies outside [-1, 1]",
                        scope_label(&scope),
                        term.short()
                    );
                    warn!("{msg}");
                    warnings.push(msg);
                }
                TermStatus::Estimated {
                    estimate,
                    std_error: fit.std_errors[k],
                    t_stat: fit.t_stats[k],
                    p_value: fit.p_values[k].is_finite().then_some(fit.p_values[k]),
                }
            }
        };
        terms.push(TermEstimate { term, status });
    }

    let group = CoefficientGroup {
        scope,
        beta,
        fit: Some(FitDiagnostics {
            observations: design.response.len(),
            residual_df: fit.residual_df,
            rss: fit.rss,
            r_squared: fit.r_squared.is_finite().then_some(fit.r_squared),
            terms,
            warnings,
        }),
    };
    Ok(GroupFit {
        group,
        design,
        ols: fit,
        regressors,
    })
}

/// Per-link residual standard deviation. With shared coefficients the
/// residual degrees of freedom are prorated across the group's links.
fn link_sigmas(fit: &GroupFit, network: &Network) -> BTreeMap<String, f64> {
    let n = fit.design.response.len() as f64;
    let p = fit.regressors.len() as f64;
    let inflate = if n > p { n / (n - p) } else { 0.0 };
    let mut acc: BTreeMap<LinkIdx, (f64, usize)> = BTreeMap::new();
    for (&l, &e) in fit.design.row_links.iter().zip(&fit.ols.residuals) {
        let entry = acc.entry(l).or_default();
        entry.0 += e * e;
        entry.1 += 1;
    }
    acc.into_iter()
        .map(|(l, (rss, count))| {
            let sigma = if count > 0 {
                (rss / count as f64 * inflate).sqrt()
            } else {
                0.0
            };
            (network.link_id(l).to_string(), sigma)
        })
        .collect()
}

/// Fits the efficiency coefficients for one mode by OLS on Δu.
pub fn fit_efficiency(
    samples: &[CapacitySample],
    mode: ModeIdx,
    network: &Network,
    granularity: Granularity,
) -> Result<(EfficiencyModel, Vec<GroupFit>)> {
    if samples.len() < MIN_FIT_INTERVALS {
        return Err(Error::TooFewObservations {
            needed: MIN_FIT_INTERVALS,
            got: samples.len(),
        });
    }
    let links = network.capacitated_links_of_mode(mode);
    if links.is_empty() {
        return Err(Error::InvalidInput(format!("mode {mode} has no capacitated links")));
    }
    let fits = match granularity {
        Granularity::PerMode => vec![fit_group(Scope::Mode(mode), &links, samples, network)?],
        Granularity::PerLink => links
            .iter()
            .map(|&l| fit_group(Scope::Link(network.link_id(l).to_string()), &[l], samples, network))
            .collect::<Result<Vec<_>>>()?,
    };
    let mut model = EfficiencyModel::default();
    for f in &fits {
        model.sigma.extend(link_sigmas(f, network));
        model.groups.push(f.group.clone());
    }
    Ok((model, fits))
}

/// Fits every mode that owns a capacitated link.
pub fn fit_efficiency_model(
    samples: &[CapacitySample],
    network: &Network,
    granularity: Granularity,
) -> Result<EfficiencyModel> {
    let modes: BTreeSet<ModeIdx> = network
        .capacitated_links()
        .map(|l| network.link(l).mode)
        .collect();
    let mut model = EfficiencyModel::default();
    for mode in modes {
        let (m, _) = fit_efficiency(samples, mode, network, granularity)?;
        model.merge(m);
    }
    Ok(model)
}

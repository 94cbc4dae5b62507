//! Experiment drivers and their CSV exports: loss planes through three
//! inner-loop models, momentum-share traces, steps-per-domain sweeps,
//! ablation grids, the method benchmark and quadratic fixed-point tables.
//!
//! Independent runs and grid cells are evaluated on the rayon pool; results
//! are always collected in index order so outputs do not depend on
//! scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::domains::{DomainDataset, SamplerState, SuiteConfig};
use crate::export::{fmt_g17, CsvText};
use crate::metalearn::{
    train, Algorithm, InnerOptimizer, MetaConfig, OuterUpdate, RunResult, Sampling, WeightScheme,
};
use crate::nn::NetworkSpec;
use crate::optim::{AdamConfig, AdamState, MomentumLedger};
use crate::quadratic::{
    centroid_distance, fixed_point, random_rotation, regular_simplex, rotate_points,
    FixedPointOptions, QuadraticTask,
};
use crate::{Error, GradVector, ParamVector, Result};

/// Sample mean and standard deviation (`n - 1` denominator, 0 for one value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self {
                mean: f64::NAN,
                sd: f64::NAN,
            };
        }
        let mean = values.iter().sum::<f64>() / n;
        let sd = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

fn g(x: f64) -> String {
    fmt_g17(x)
}

/// Short label for a weight scheme, e.g. `arithmetic(1)`.
pub fn scheme_label(scheme: &WeightScheme) -> String {
    match scheme {
        WeightScheme::Constant(e) => format!("constant({})", g(*e)),
        WeightScheme::Arithmetic(e) => format!("arithmetic({})", g(*e)),
        WeightScheme::Explicit(w) => {
            let parts: Vec<String> = w.iter().map(|v| g(*v)).collect();
            format!("explicit({})", parts.join(";"))
        }
    }
}

// ---------------------------------------------------------------------------
// Loss planes

/// Orthonormal 2-D frame through three models.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlaneBasis {
    pub origin: ParamVector,
    pub u: ParamVector,
    pub v: ParamVector,
    /// Plane coordinates of the three anchors (the first is the origin).
    pub anchors: [(f64, f64); 3],
}

impl PlaneBasis {
    pub fn point(&self, a: f64, b: f64) -> ParamVector {
        let mut p = self.origin.clone();
        p.axpy(a, &self.u);
        p.axpy(b, &self.v);
        p
    }
}

/// Gram-Schmidt frame: origin at `theta_a`, `u` toward `theta_b`, `v` toward
/// the part of `theta_c` orthogonal to `u`.
pub fn plane_basis(theta_a: &ParamVector, theta_b: &ParamVector, theta_c: &ParamVector) -> Result<PlaneBasis> {
    theta_a.check_len(theta_b, "plane anchors")?;
    theta_a.check_len(theta_c, "plane anchors")?;
    let db = theta_b.sub(theta_a);
    let nb = db.norm();
    if nb < 1e-10 {
        return Err(Error::Collinear(nb));
    }
    let u = db.scaled(1.0 / nb);
    let dc = theta_c.sub(theta_a);
    let mut w = dc.clone();
    // two passes keep u.v at rounding level even for nearly collinear input
    for _ in 0..2 {
        let proj = w.dot(&u);
        w.axpy(-proj, &u);
    }
    let nw = w.norm();
    if nw < 1e-10 {
        return Err(Error::Collinear(nw));
    }
    let v = w.scaled(1.0 / nw);
    let anchors = [(0.0, 0.0), (nb, 0.0), (dc.dot(&u), dc.dot(&v))];
    Ok(PlaneBasis {
        origin: theta_a.clone(),
        u,
        v,
        anchors,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneRanges {
    pub a: [f64; 2],
    pub b: [f64; 2],
}

impl PlaneRanges {
    /// Anchor bounding box widened by `expansion` of its extent on each side.
    pub fn around_anchors(basis: &PlaneBasis, expansion: f64) -> Self {
        let span = |f: fn(&(f64, f64)) -> f64| {
            let lo = basis.anchors.iter().map(f).fold(f64::INFINITY, f64::min);
            let hi = basis.anchors.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
            let pad = expansion * (hi - lo);
            [lo - pad, hi + pad]
        };
        Self {
            a: span(|p| p.0),
            b: span(|p| p.1),
        }
    }
}

/// `resolution` evenly spaced nodes over `[lo, hi]`, merged with `extra`
/// coordinates so that those land exactly on grid lines.
pub fn axis_nodes(range: [f64; 2], resolution: usize, extra: &[f64]) -> Vec<f64> {
    let [lo, hi] = range;
    let mut nodes: Vec<f64> = (0..resolution)
        .map(|i| lo + (hi - lo) * i as f64 / (resolution - 1) as f64)
        .chain(extra.iter().copied())
        .collect();
    nodes.sort_by(f64::total_cmp);
    nodes.dedup();
    nodes
}

/// Loss values per domain over a rectangular grid in plane coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossGrid {
    pub a_values: Vec<f64>,
    pub b_values: Vec<f64>,
    pub ranges: PlaneRanges,
    pub resolution: usize,
    /// `values[d][ia * b_values.len() + ib]`.
    pub values: Vec<Vec<f64>>,
}

impl LossGrid {
    pub fn value(&self, domain: usize, ia: usize, ib: usize) -> f64 {
        self.values[domain][ia * self.b_values.len() + ib]
    }

    /// Grid indices of a coordinate pair that lies exactly on grid lines.
    pub fn cell_of(&self, a: f64, b: f64) -> Option<(usize, usize)> {
        let ia = self.a_values.iter().position(|&x| x == a)?;
        let ib = self.b_values.iter().position(|&x| x == b)?;
        Some((ia, ib))
    }

    /// `a,b,loss_domain0,...`, with `a` varying slowest.
    pub fn to_csv(&self) -> CsvText {
        let mut header = vec!["a".to_owned(), "b".to_owned()];
        header.extend((0..self.values.len()).map(|d| format!("loss_domain{d}")));
        let mut csv = CsvText::with_header(&header);
        for (ia, a) in self.a_values.iter().enumerate() {
            for (ib, b) in self.b_values.iter().enumerate() {
                let mut row = vec![g(*a), g(*b)];
                row.extend((0..self.values.len()).map(|d| g(self.value(d, ia, ib))));
                csv.row(row);
            }
        }
        csv
    }
}

/// Evaluates every loss at `origin + a u + b v` over the grid. The anchors'
/// coordinates are always grid nodes, so their cells hold the anchor losses.
pub fn eval_plane<F>(basis: &PlaneBasis, losses: &[F], ranges: PlaneRanges, resolution: usize) -> Result<LossGrid>
where
    F: Fn(&ParamVector) -> Result<f64> + Sync,
{
    if resolution < 2 {
        return Err(Error::InvalidConfig(format!(
            "plane resolution must be >= 2, got {resolution}"
        )));
    }
    if !(ranges.a[0] < ranges.a[1] && ranges.b[0] < ranges.b[1]) {
        return Err(Error::InvalidConfig(format!("empty plane ranges {ranges:?}")));
    }
    let a_values = axis_nodes(ranges.a, resolution, &basis.anchors.map(|p| p.0));
    let b_values = axis_nodes(ranges.b, resolution, &basis.anchors.map(|p| p.1));
    let cells: Vec<(f64, f64)> = a_values
        .iter()
        .flat_map(|&a| b_values.iter().map(move |&b| (a, b)))
        .collect();
    let per_cell: Vec<Vec<f64>> = cells
        .par_iter()
        .map(|&(a, b)| {
            let p = basis.point(a, b);
            losses.iter().map(|f| f(&p)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut values = vec![Vec::with_capacity(cells.len()); losses.len()];
    for (cell, row) in per_cell.into_iter().enumerate() {
        for (d, v) in row.into_iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Degenerate(format!(
                    "non-finite loss for domain {d} at grid cell {cell}"
                )));
            }
            values[d].push(v);
        }
    }
    Ok(LossGrid {
        a_values,
        b_values,
        ranges,
        resolution,
        values,
    })
}

fn default_anchor_steps() -> usize {
    30
}
fn default_resolution() -> usize {
    41
}
fn default_expansion() -> f64 {
    0.3
}

/// Loss-plane experiment: briefly pretrain on pooled sources, then take
/// `anchor_steps` SGD steps on each source in turn; the last three of the
/// resulting snapshots span the plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlaneConfig {
    pub network: NetworkSpec,
    pub suite: SuiteConfig,
    pub seed: u64,
    pub inner_lr: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    #[serde(default = "default_anchor_steps")]
    pub anchor_steps: usize,
    #[serde(default = "default_resolution")]
    pub resolution: usize,
    #[serde(default = "default_expansion")]
    pub expansion: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PlaneOutput {
    pub basis: PlaneBasis,
    pub grid: LossGrid,
    pub anchors: Vec<ParamVector>,
    /// Direct loss of each anchor per evaluated domain.
    pub anchor_losses: Vec<Vec<f64>>,
    /// Domain ids in column order.
    pub domain_ids: Vec<usize>,
}

/// Evaluation set of each domain: source validation splits (training split
/// when empty) followed by full target domains.
fn plane_domains(suite: &crate::domains::DomainSuite) -> Vec<&DomainDataset> {
    suite
        .val
        .iter()
        .zip(&suite.train)
        .map(|(v, t)| v.as_ref().unwrap_or(t))
        .chain(&suite.targets)
        .collect()
}

pub fn run_plane(config: &PlaneConfig) -> Result<PlaneOutput> {
    config.network.validate()?;
    let suite = config.suite.build()?;
    if suite.num_sources() < 2 {
        return Err(Error::InvalidConfig("a loss plane needs at least two sources".into()));
    }
    let spec = &config.network;
    let sgd = crate::optim::SgdConfig::new(config.inner_lr)?;
    let mut sampler = SamplerState::new(crate::domains::derive_seed(config.seed, 2));
    let mut theta = spec.init_params(config.seed);
    for _ in 0..config.pretrain_steps {
        let (batch, _) = sampler.sample_mixture(&suite.train, config.batch_size * suite.num_sources())?;
        theta = crate::optim::sgd_step(&theta, &spec.backward(&theta, &batch)?, &sgd);
    }
    let mut snapshots = vec![theta.clone()];
    for train in &suite.train {
        for _ in 0..config.anchor_steps {
            let batch = sampler.sample_batch(train, config.batch_size)?;
            theta = crate::optim::sgd_step(&theta, &spec.backward(&theta, &batch)?, &sgd);
        }
        snapshots.push(theta.clone());
    }
    let anchors = snapshots[snapshots.len() - 3..].to_vec();
    let basis = plane_basis(&anchors[0], &anchors[1], &anchors[2])?;
    let ranges = PlaneRanges::around_anchors(&basis, config.expansion);

    let domains = plane_domains(&suite);
    let batches: Vec<_> = domains.iter().map(|d| d.full_batch()).collect();
    let losses: Vec<_> = batches
        .iter()
        .map(|b| move |p: &ParamVector| spec.forward_loss(p, b))
        .collect();
    let grid = eval_plane(&basis, &losses, ranges, config.resolution)?;
    let anchor_losses = anchors
        .iter()
        .map(|a| losses.iter().map(|f| f(a)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    Ok(PlaneOutput {
        basis,
        grid,
        anchors,
        anchor_losses,
        domain_ids: domains.iter().map(|d| d.domain_id).collect(),
    })
}

// ---------------------------------------------------------------------------
// Momentum-share traces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TraceSource {
    /// Domain `d` always contributes the unit vector `e_d`.
    Unit { n_domains: usize },
    /// Adam training of a network on round-robin per-domain minibatches.
    Network {
        network: NetworkSpec,
        suite: SuiteConfig,
        batch_size: usize,
        learning_rate: f64,
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamTraceConfig {
    pub steps: usize,
    pub beta1: f64,
    pub source: TraceSource,
}

impl Default for AdamTraceConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            beta1: 0.9,
            source: TraceSource::Unit { n_domains: 3 },
        }
    }
}

/// Per-step momentum shares; `rows[t][i]` is the share of the i-th domain
/// after step `t + 1`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdamTrace {
    pub domain_ids: Vec<usize>,
    pub rows: Vec<Vec<f64>>,
}

impl AdamTrace {
    /// `step,domain_0,...,domain_{n-1}`.
    pub fn to_csv(&self) -> CsvText {
        let mut header = vec!["step".to_owned()];
        header.extend((0..self.domain_ids.len()).map(|i| format!("domain_{i}")));
        let mut csv = CsvText::with_header(&header);
        for (t, row) in self.rows.iter().enumerate() {
            let mut fields = vec![(t + 1).to_string()];
            fields.extend(row.iter().map(|v| g(*v)));
            csv.row(fields);
        }
        csv
    }

    /// Largest pairwise share difference at each step.
    pub fn max_gaps(&self) -> Vec<f64> {
        self.rows
            .iter()
            .map(|r| {
                let hi = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lo = r.iter().copied().fold(f64::INFINITY, f64::min);
                hi - lo
            })
            .collect()
    }
}

/// Updates domains round-robin (`step t` uses domain `(t - 1) mod n`) and
/// records the ledger's shares after every step.
pub fn run_adamtrace(config: &AdamTraceConfig) -> Result<AdamTrace> {
    if config.steps == 0 {
        return Err(Error::InvalidConfig("steps must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&config.beta1) {
        return Err(Error::InvalidConfig(format!(
            "beta1 must lie in [0, 1), got {}",
            config.beta1
        )));
    }
    let mut rows = Vec::with_capacity(config.steps);
    match &config.source {
        TraceSource::Unit { n_domains } => {
            let n = *n_domains;
            if n == 0 {
                return Err(Error::InvalidConfig("n_domains must be >= 1".into()));
            }
            let mut ledger = MomentumLedger::new(0..n, n);
            for t in 0..config.steps {
                let d = t % n;
                let mut grad = GradVector::zeros(n);
                grad[d] = 1.0;
                ledger.update(&grad, d, config.beta1)?;
                rows.push(ledger.fractions()?.into_values().collect());
            }
            Ok(AdamTrace {
                domain_ids: (0..n).collect(),
                rows,
            })
        }
        TraceSource::Network {
            network,
            suite,
            batch_size,
            learning_rate,
            seed,
        } => {
            let suite = suite.build()?;
            let ids: Vec<usize> = suite.train.iter().map(|d| d.domain_id).collect();
            let mut theta = network.init_params(*seed);
            let mut adam = AdamState::new(
                AdamConfig {
                    learning_rate: *learning_rate,
                    beta1: config.beta1,
                    ..AdamConfig::default()
                },
                theta.len(),
            )?;
            let mut ledger = MomentumLedger::new(ids.iter().copied(), theta.len());
            let mut sampler = SamplerState::new(crate::domains::derive_seed(*seed, 2));
            for t in 0..config.steps {
                let i = t % ids.len();
                let batch = sampler.sample_batch(&suite.train[i], *batch_size)?;
                let grad = network.backward(&theta, &batch)?;
                ledger.update(&grad, ids[i], config.beta1)?;
                theta = adam.step(&theta, &grad)?;
                let fr = ledger.fractions()?;
                rows.push(ids.iter().map(|d| fr[d]).collect());
            }
            Ok(AdamTrace {
                domain_ids: ids,
                rows,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Training grids

/// Weighting rule family, resolved against the number of sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeChoice {
    Fish,
    Arith,
}

impl SchemeChoice {
    /// Normalized weights sum to one; scaled weights sum to `n / 2`
    /// (arithmetic with `eps = 1`, constant `1/2`).
    pub fn resolve(self, n: usize, scaled: bool) -> WeightScheme {
        match (self, scaled) {
            (SchemeChoice::Fish, false) => WeightScheme::fish(n),
            (SchemeChoice::Fish, true) => WeightScheme::Constant(0.5),
            (SchemeChoice::Arith, false) => WeightScheme::arithmetic_normalized(n),
            (SchemeChoice::Arith, true) => WeightScheme::arithmetic_scaled(),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            SchemeChoice::Fish => "fish",
            SchemeChoice::Arith => "arith",
        }
    }
}

fn run_all(jobs: &[MetaConfig], suite: &crate::domains::DomainSuite) -> Result<Vec<RunResult>> {
    jobs.par_iter().map(|cfg| train(cfg, suite)).collect()
}

fn nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(Error::InvalidConfig(format!("{what} must not be empty")));
    }
    Ok(())
}

fn default_schemes() -> Vec<SchemeChoice> {
    vec![SchemeChoice::Fish, SchemeChoice::Arith]
}

/// Steps-per-domain sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: MetaConfig,
    pub suite: SuiteConfig,
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    #[serde(default = "default_schemes")]
    pub schemes: Vec<SchemeChoice>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub scheme: SchemeChoice,
    pub k: usize,
    pub target_acc: MeanSd,
    pub seeds: usize,
}

pub fn sweep_steps(config: &SweepConfig) -> Result<Vec<SweepRow>> {
    nonempty(&config.k_values, "k_values")?;
    nonempty(&config.seeds, "seeds")?;
    nonempty(&config.schemes, "schemes")?;
    let suite = config.suite.build()?;
    let n = suite.num_sources();
    let mut cells = Vec::new();
    let mut jobs = Vec::new();
    for &scheme in &config.schemes {
        for &k in &config.k_values {
            cells.push((scheme, k));
            for &seed in &config.seeds {
                let mut cfg = config.base.clone();
                cfg.algorithm = Algorithm::Meta;
                cfg.scheme = scheme.resolve(n, false);
                cfg.k = k;
                cfg.seed = seed;
                jobs.push(cfg);
            }
        }
    }
    let runs = run_all(&jobs, &suite)?;
    Ok(cells
        .into_iter()
        .zip(runs.chunks(config.seeds.len()))
        .map(|((scheme, k), chunk)| {
            let accs: Vec<f64> = chunk.iter().map(|r| r.selected.target_acc).collect();
            SweepRow {
                scheme,
                k,
                target_acc: MeanSd::of(&accs),
                seeds: chunk.len(),
            }
        })
        .collect())
}

/// `scheme,k,target_acc_mean,target_acc_sd,n_seeds`.
pub fn sweep_csv(rows: &[SweepRow]) -> CsvText {
    let mut csv = CsvText::with_header(&["scheme", "k", "target_acc_mean", "target_acc_sd", "n_seeds"]);
    for r in rows {
        csv.row([
            r.scheme.label().to_owned(),
            r.k.to_string(),
            g(r.target_acc.mean),
            g(r.target_acc.sd),
            r.seeds.to_string(),
        ]);
    }
    csv
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterChoice {
    Direct,
    Adam,
}

impl OuterChoice {
    pub fn label(self) -> &'static str {
        match self {
            OuterChoice::Direct => "direct",
            OuterChoice::Adam => "adam",
        }
    }
}

fn default_axis_scheme() -> Vec<SchemeChoice> {
    vec![SchemeChoice::Arith]
}
fn default_axis_false() -> Vec<bool> {
    vec![false]
}
fn default_axis_true() -> Vec<bool> {
    vec![true]
}
fn default_axis_outer() -> Vec<OuterChoice> {
    vec![OuterChoice::Adam]
}

/// Values taken by each ablation axis; omitted axes are singletons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationAxes {
    #[serde(default = "default_axis_scheme")]
    pub scheme: Vec<SchemeChoice>,
    #[serde(default = "default_axis_false")]
    pub scaled: Vec<bool>,
    #[serde(default = "default_axis_outer")]
    pub outer: Vec<OuterChoice>,
    #[serde(default = "default_axis_false")]
    pub momentum_in_inner: Vec<bool>,
    #[serde(default = "default_axis_true")]
    pub domain_specific_sampling: Vec<bool>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self {
            scheme: default_axis_scheme(),
            scaled: default_axis_false(),
            outer: default_axis_outer(),
            momentum_in_inner: default_axis_false(),
            domain_specific_sampling: default_axis_true(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    pub base: MetaConfig,
    pub suite: SuiteConfig,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub axes: AblationAxes,
    /// Outer optimizer for `outer = adam` cells.
    #[serde(default)]
    pub outer_adam: AdamConfig,
    /// Inner optimizer for `momentum_in_inner = true` cells.
    #[serde(default)]
    pub inner_adam: AdamConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub scheme: SchemeChoice,
    pub scaled: bool,
    pub outer: OuterChoice,
    pub momentum_in_inner: bool,
    pub domain_specific_sampling: bool,
    pub val_acc: MeanSd,
    pub target_acc: MeanSd,
}

pub fn ablation_grid(config: &AblationConfig) -> Result<Vec<AblationRow>> {
    let ax = &config.axes;
    nonempty(&config.seeds, "seeds")?;
    nonempty(&ax.scheme, "axes.scheme")?;
    nonempty(&ax.scaled, "axes.scaled")?;
    nonempty(&ax.outer, "axes.outer")?;
    nonempty(&ax.momentum_in_inner, "axes.momentum_in_inner")?;
    nonempty(&ax.domain_specific_sampling, "axes.domain_specific_sampling")?;
    let suite = config.suite.build()?;
    let n = suite.num_sources();
    let mut cells = Vec::new();
    let mut jobs = Vec::new();
    for &scheme in &ax.scheme {
        for &scaled in &ax.scaled {
            for &outer in &ax.outer {
                for &momentum in &ax.momentum_in_inner {
                    for &specific in &ax.domain_specific_sampling {
                        cells.push((scheme, scaled, outer, momentum, specific));
                        for &seed in &config.seeds {
                            let mut cfg = config.base.clone();
                            cfg.algorithm = Algorithm::Meta;
                            cfg.scheme = scheme.resolve(n, scaled);
                            cfg.outer = match outer {
                                OuterChoice::Direct => OuterUpdate::Direct,
                                OuterChoice::Adam => OuterUpdate::Adam(config.outer_adam),
                            };
                            cfg.inner_optimizer = if momentum {
                                InnerOptimizer::Adam(config.inner_adam)
                            } else {
                                InnerOptimizer::Sgd
                            };
                            cfg.sampling = if specific {
                                Sampling::PerDomain
                            } else {
                                Sampling::Uniform
                            };
                            cfg.seed = seed;
                            jobs.push(cfg);
                        }
                    }
                }
            }
        }
    }
    let runs = run_all(&jobs, &suite)?;
    Ok(cells
        .into_iter()
        .zip(runs.chunks(config.seeds.len()))
        .map(|((scheme, scaled, outer, momentum_in_inner, domain_specific_sampling), chunk)| {
            let val: Vec<f64> = chunk.iter().map(|r| r.selected.val_acc).collect();
            let target: Vec<f64> = chunk.iter().map(|r| r.selected.target_acc).collect();
            AblationRow {
                scheme,
                scaled,
                outer,
                momentum_in_inner,
                domain_specific_sampling,
                val_acc: MeanSd::of(&val),
                target_acc: MeanSd::of(&target),
            }
        })
        .collect())
}

/// `scheme,scaled,outer,momentum_in_inner,domain_specific_sampling,
/// val_acc_mean,val_acc_sd,target_acc_mean,target_acc_sd`.
pub fn ablation_csv(rows: &[AblationRow]) -> CsvText {
    let mut csv = CsvText::with_header(&[
        "scheme",
        "scaled",
        "outer",
        "momentum_in_inner",
        "domain_specific_sampling",
        "val_acc_mean",
        "val_acc_sd",
        "target_acc_mean",
        "target_acc_sd",
    ]);
    for r in rows {
        csv.row([
            r.scheme.label().to_owned(),
            r.scaled.to_string(),
            r.outer.label().to_owned(),
            r.momentum_in_inner.to_string(),
            r.domain_specific_sampling.to_string(),
            g(r.val_acc.mean),
            g(r.val_acc.sd),
            g(r.target_acc.mean),
            g(r.target_acc.sd),
        ]);
    }
    csv
}

// ---------------------------------------------------------------------------
// Method benchmark

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    Fish,
    Arith,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::Fish => "Fish",
            Method::Arith => "Arith",
        }
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Erm, Method::Fish, Method::Arith]
}

/// ERM/Fish/Arith comparison over seeds. When `base.swa` is set, every
/// method gets an extra `+SWA` row evaluated on its tail average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchConfig {
    pub base: MetaConfig,
    pub suite: SuiteConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRun {
    pub method: String,
    pub seed: u64,
    pub val_acc: f64,
    pub target_accs: Vec<f64>,
    pub selected_iter: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub method: String,
    pub val_acc: MeanSd,
    /// One entry per target domain, in `BenchReport::target_ids` order.
    pub targets: Vec<MeanSd>,
    /// Mean over target domains, then over seeds.
    pub target_avg: MeanSd,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub target_ids: Vec<usize>,
    pub rows: Vec<BenchRow>,
    pub runs: Vec<BenchRun>,
}

impl BenchReport {
    pub fn row(&self, method: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    /// `method,val_acc_mean,val_acc_sd,domain<id>_mean,domain<id>_sd,...,
    /// avg_mean,avg_sd`.
    pub fn to_csv(&self) -> CsvText {
        let mut header = vec!["method".to_owned(), "val_acc_mean".into(), "val_acc_sd".into()];
        for id in &self.target_ids {
            header.push(format!("domain{id}_mean"));
            header.push(format!("domain{id}_sd"));
        }
        header.push("avg_mean".into());
        header.push("avg_sd".into());
        let mut csv = CsvText::with_header(&header);
        for r in &self.rows {
            let mut fields = vec![r.method.clone(), g(r.val_acc.mean), g(r.val_acc.sd)];
            for t in &r.targets {
                fields.push(g(t.mean));
                fields.push(g(t.sd));
            }
            fields.push(g(r.target_avg.mean));
            fields.push(g(r.target_avg.sd));
            csv.row(fields);
        }
        csv
    }
}

fn per_target_accs(spec: &NetworkSpec, params: &ParamVector, targets: &[DomainDataset]) -> Result<Vec<f64>> {
    targets
        .iter()
        .map(|t| spec.accuracy(params, &t.full_batch()))
        .collect()
}

fn summarize(method: String, runs: &[BenchRun]) -> BenchRow {
    let n_targets = runs.first().map_or(0, |r| r.target_accs.len());
    let val: Vec<f64> = runs.iter().map(|r| r.val_acc).collect();
    let targets = (0..n_targets)
        .map(|i| MeanSd::of(&runs.iter().map(|r| r.target_accs[i]).collect::<Vec<_>>()))
        .collect();
    let avg: Vec<f64> = runs
        .iter()
        .map(|r| r.target_accs.iter().sum::<f64>() / r.target_accs.len() as f64)
        .collect();
    BenchRow {
        method,
        val_acc: MeanSd::of(&val),
        targets,
        target_avg: MeanSd::of(&avg),
    }
}

pub fn run_bench(config: &BenchConfig) -> Result<BenchReport> {
    nonempty(&config.seeds, "seeds")?;
    nonempty(&config.methods, "methods")?;
    let suite = config.suite.build()?;
    if suite.targets.is_empty() || !suite.is_classification() {
        return Err(Error::InvalidConfig(
            "the benchmark needs a classification suite with target domains".into(),
        ));
    }
    let n = suite.num_sources();
    let mut jobs = Vec::new();
    for &method in &config.methods {
        for &seed in &config.seeds {
            let mut cfg = config.base.clone();
            cfg.seed = seed;
            match method {
                Method::Erm => cfg.algorithm = Algorithm::Erm,
                Method::Fish => {
                    cfg.algorithm = Algorithm::Meta;
                    cfg.scheme = WeightScheme::fish(n);
                }
                Method::Arith => {
                    cfg.algorithm = Algorithm::Meta;
                    cfg.scheme = WeightScheme::arithmetic_normalized(n);
                }
            }
            if matches!(cfg.outer, OuterUpdate::Average) && method == Method::Fish {
                cfg.outer = OuterUpdate::Direct;
            }
            jobs.push(cfg);
        }
    }
    let results = run_all(&jobs, &suite)?;
    let spec = &config.base.network;

    let mut rows = Vec::new();
    let mut all_runs = Vec::new();
    for (mi, &method) in config.methods.iter().enumerate() {
        let chunk = &results[mi * config.seeds.len()..(mi + 1) * config.seeds.len()];
        let mut plain = Vec::new();
        let mut swa = Vec::new();
        for (r, &seed) in chunk.iter().zip(&config.seeds) {
            plain.push(BenchRun {
                method: method.label().to_owned(),
                seed,
                val_acc: r.selected.val_acc,
                target_accs: per_target_accs(spec, &r.selected_params, &suite.targets)?,
                selected_iter: Some(r.selected_iter),
            });
            if let (Some(p), Some(eval)) = (&r.swa_params, &r.swa) {
                swa.push(BenchRun {
                    method: format!("{}+SWA", method.label()),
                    seed,
                    val_acc: eval.val_acc,
                    target_accs: per_target_accs(spec, p, &suite.targets)?,
                    selected_iter: None,
                });
            }
        }
        rows.push(summarize(method.label().to_owned(), &plain));
        all_runs.extend(plain);
        if !swa.is_empty() {
            rows.push(summarize(format!("{}+SWA", method.label()), &swa));
            all_runs.extend(swa);
        }
    }
    Ok(BenchReport {
        target_ids: suite.targets.iter().map(|t| t.domain_id).collect(),
        rows,
        runs: all_runs,
    })
}

// ---------------------------------------------------------------------------
// Quadratic fixed points

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuadTaskSpec {
    /// Point optima given explicitly.
    Points { points: Vec<Vec<f64>> },
    /// Vertices of a regular simplex in `R^n`, optionally randomly rotated.
    Simplex {
        n: usize,
        #[serde(default)]
        rotation_seed: Option<u64>,
    },
}

impl QuadTaskSpec {
    pub fn build(&self) -> Result<QuadraticTask> {
        match self {
            QuadTaskSpec::Points { points } => QuadraticTask::from_points(points.clone()),
            QuadTaskSpec::Simplex { n, rotation_seed } => {
                if *n < 2 {
                    return Err(Error::InvalidConfig("a simplex task needs n >= 2".into()));
                }
                let mut pts = regular_simplex(*n);
                if let Some(seed) = rotation_seed {
                    use rand::SeedableRng;
                    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(*seed);
                    pts = rotate_points(&pts, &random_rotation(*n, &mut rng));
                }
                QuadraticTask::from_points(pts)
            }
        }
    }
}

fn default_fp_tol() -> f64 {
    FixedPointOptions::default().tol
}
fn default_fp_iters() -> usize {
    FixedPointOptions::default().max_iters
}

/// Fixed points of each scheme on each task, with domains visited in index
/// order and iteration started from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub tasks: Vec<QuadTaskSpec>,
    pub schemes: Vec<WeightScheme>,
    pub lrs: Vec<f64>,
    #[serde(default = "default_fp_tol")]
    pub tol: f64,
    #[serde(default = "default_fp_iters")]
    pub max_iters: usize,
}

impl Default for QuadraticConfig {
    /// Optima at +1 and -1 on the line; arithmetic (`eps = 1`) against full
    /// interpolation to the last inner model.
    fn default() -> Self {
        Self {
            tasks: vec![QuadTaskSpec::Points {
                points: vec![vec![1.0], vec![-1.0]],
            }],
            schemes: vec![WeightScheme::Arithmetic(1.0), WeightScheme::Constant(1.0)],
            lrs: vec![0.5, 1.0],
            tol: default_fp_tol(),
            max_iters: default_fp_iters(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QuadraticRow {
    pub task: usize,
    pub scheme: String,
    pub lr: f64,
    pub n: usize,
    pub fixed_point: ParamVector,
    pub centroid_dist: f64,
    pub spread: f64,
    pub iters_to_converge: usize,
}

pub fn run_quadratic(config: &QuadraticConfig) -> Result<Vec<QuadraticRow>> {
    nonempty(&config.tasks, "tasks")?;
    nonempty(&config.schemes, "schemes")?;
    nonempty(&config.lrs, "lrs")?;
    let options = FixedPointOptions {
        tol: config.tol,
        max_iters: config.max_iters,
    };
    let mut rows = Vec::new();
    for (ti, spec) in config.tasks.iter().enumerate() {
        let task = spec.build()?;
        let order: Vec<usize> = (0..task.n()).collect();
        let start = ParamVector::zeros(task.dim);
        for scheme in &config.schemes {
            for &lr in &config.lrs {
                let fp = fixed_point(&task, scheme, lr, &order, &start, options)?;
                let report = centroid_distance(&fp.theta, &task)?;
                rows.push(QuadraticRow {
                    task: ti,
                    scheme: scheme_label(scheme),
                    lr,
                    n: task.n(),
                    fixed_point: fp.theta,
                    centroid_dist: report.distance,
                    spread: report.spread,
                    iters_to_converge: fp.iterations,
                });
            }
        }
    }
    Ok(rows)
}

/// `scheme,lr,n,centroid_dist,spread,iters_to_converge`.
pub fn quadratic_csv(rows: &[QuadraticRow]) -> CsvText {
    let mut csv =
        CsvText::with_header(&["scheme", "lr", "n", "centroid_dist", "spread", "iters_to_converge"]);
    for r in rows {
        csv.row([
            r.scheme.clone(),
            g(r.lr),
            r.n.to_string(),
            g(r.centroid_dist),
            g(r.spread),
            r.iters_to_converge.to_string(),
        ]);
    }
    csv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::new(v.to_vec())
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.sd - 1.0).abs() < 1e-15);
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
    }

    #[test]
    fn unit_basis_plane() {
        let b = plane_basis(&pv(&[0.0, 0.0]), &pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap();
        assert_eq!(b.u, pv(&[1.0, 0.0]));
        assert_eq!(b.v, pv(&[0.0, 1.0]));
        assert_eq!(b.anchors, [(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)]);
        let collinear = plane_basis(&pv(&[1.0, 1.0]), &pv(&[2.0, 3.0]), &pv(&[3.0, 5.0]));
        assert!(matches!(collinear, Err(Error::Collinear(_))));
        let same = plane_basis(&pv(&[1.0, 1.0]), &pv(&[1.0, 1.0]), &pv(&[3.0, 5.0]));
        assert!(same.is_err());
    }

    #[test]
    fn quadratic_plane_is_parabolic_along_axes() {
        let b = plane_basis(&pv(&[0.5, -1.0, 2.0]), &pv(&[1.0, 0.0, 2.0]), &pv(&[0.0, 1.0, 1.0]))
            .unwrap();
        let f = |p: &ParamVector| Ok(p.iter().map(|x| 0.7 * x * x - x).sum::<f64>());
        let ranges = PlaneRanges {
            a: [-1.0, 1.0],
            b: [-1.0, 1.0],
        };
        let grid = eval_plane(&b, &[f], ranges, 11).unwrap();
        for (i, &(a, bb)) in b.anchors.iter().enumerate() {
            let (ia, ib) = grid.cell_of(a, bb).unwrap();
            let direct = f(&b.point(a, bb)).unwrap();
            assert!((grid.value(0, ia, ib) - direct).abs() <= 1e-12, "anchor {i}");
        }
        // uniform spacing: evaluate on a pure uniform grid without extras
        let h = 0.1;
        let vals: Vec<f64> = (0..11)
            .map(|i| f(&b.point(-0.5 + h * i as f64, 0.3)).unwrap())
            .collect();
        let second: Vec<f64> = vals.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).collect();
        for s in &second {
            assert!((s - second[0]).abs() <= 1e-8);
        }
        let csv = grid.to_csv().into_string();
        assert!(csv.starts_with("a,b,loss_domain0\n"));
        assert_eq!(csv.lines().count(), 1 + grid.a_values.len() * grid.b_values.len());
    }

    #[test]
    fn resolution_floor() {
        let b = plane_basis(&pv(&[0.0, 0.0]), &pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap();
        let f = |_: &ParamVector| Ok(0.0);
        let r = PlaneRanges::around_anchors(&b, 0.3);
        assert_eq!(r.a, [-0.3, 1.3]);
        assert!(eval_plane(&b, &[f], r, 1).is_err());
    }

    #[test]
    fn unit_adamtrace_matches_geometric_shares() {
        let trace = run_adamtrace(&AdamTraceConfig::default()).unwrap();
        assert_eq!(trace.rows.len(), 50);
        let mut last = trace.rows[49].clone();
        last.sort_by(|a, b| b.total_cmp(a));
        for (got, want) in last.iter().zip([0.369, 0.332, 0.299]) {
            assert!((got - want).abs() < 0.02, "{got} vs {want}");
        }
        let gaps = trace.max_gaps();
        assert!(gaps[49] < 0.08);
        assert!(gaps[..5].iter().sum::<f64>() > gaps[45..].iter().sum::<f64>());
        assert!(trace.to_csv().as_str().starts_with("step,domain_0,domain_1,domain_2\n"));
    }

    #[test]
    fn default_quadratic_rows() {
        let rows = run_quadratic(&QuadraticConfig::default()).unwrap();
        assert_eq!(rows.len(), 4);
        let find = |s: &str, lr: f64| rows.iter().find(|r| r.scheme == s && r.lr == lr).unwrap();
        assert!((find("arithmetic(1)", 0.5).fixed_point[0] - 0.2).abs() < 1e-10);
        assert!((find("constant(1)", 0.5).fixed_point[0] + 1.0 / 3.0).abs() < 1e-10);
        assert!(find("arithmetic(1)", 1.0).fixed_point[0].abs() < 1e-12);
        assert!((find("constant(1)", 1.0).fixed_point[0] + 1.0).abs() < 1e-12);
        let csv = quadratic_csv(&rows).into_string();
        assert!(csv.starts_with("scheme,lr,n,centroid_dist,spread,iters_to_converge\n"));
    }

    #[test]
    fn scheme_choices_resolve() {
        assert_eq!(SchemeChoice::Arith.resolve(3, false), WeightScheme::Arithmetic(3.0));
        assert_eq!(SchemeChoice::Arith.resolve(3, true), WeightScheme::Arithmetic(1.0));
        assert_eq!(SchemeChoice::Fish.resolve(4, false), WeightScheme::Constant(0.25));
        assert_eq!(scheme_label(&WeightScheme::Explicit(vec![0.5, 1.0])), "explicit(0.5;1)");
    }
}

//! Inner/outer meta-learning engine.
//!
//! One meta-iteration starts from the base parameters `theta_1 = Θ`, visits
//! every source domain once (in shuffled or fixed order), and performs `k`
//! momentum-free SGD steps on fresh batches of that domain. The displacement
//! produced while visiting the i-th domain is recorded as
//! `g_i = theta_i - theta_{i+1}`. The outer update then moves Θ by the
//! weighted sum `sum_i w_i g_i`, where the weights come from a
//! [`WeightScheme`]:
//!
//! - constant `eps`: every displacement weighs `eps` (interpolation toward the
//!   last inner model),
//! - arithmetic `eps`: `w_i = (n + 1 - i) / (n + eps)`, which equals averaging
//!   `eps` copies of Θ with all intermediate models `theta_2..theta_{n+1}`.
//!
//! The weighted sum can be applied directly, via its averaging form, or fed to
//! Adam as a pseudo-gradient.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domains::{derive_seed, DomainSuite, SamplerState};
use crate::export::{fmt_g17, CsvText};
use crate::nn::{Batch, NetworkSpec};
use crate::optim::{AdamConfig, AdamState, Optimizer, SgdConfig};
use crate::{Error, GradVector, ParamVector, Result};

/// Rule producing the outer-loop coefficient of each inner displacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Constant(f64),
    Arithmetic(f64),
    Explicit(Vec<f64>),
}

impl WeightScheme {
    /// Constant weights summing to one.
    pub fn fish(n: usize) -> Self {
        WeightScheme::Constant(1.0 / n as f64)
    }

    /// Arithmetic weights summing to one: `eps = n (n - 1) / 2`.
    pub fn arithmetic_normalized(n: usize) -> Self {
        WeightScheme::Arithmetic((n * n.saturating_sub(1)) as f64 / 2.0)
    }

    /// Arithmetic weights with `eps = 1`; for three domains they sum to 1.5.
    pub fn arithmetic_scaled() -> Self {
        WeightScheme::Arithmetic(1.0)
    }

    pub fn weights(&self, n: usize) -> Result<Vec<f64>> {
        weights(self, n)
    }
}

/// Per-displacement coefficients for an inner loop of `n` steps.
pub fn weights(scheme: &WeightScheme, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidConfig("weights need n >= 1".into()));
    }
    match scheme {
        WeightScheme::Constant(eps) => {
            if !(*eps > 0.0) || !eps.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "constant weight must be positive, got {eps}"
                )));
            }
            Ok(vec![*eps; n])
        }
        WeightScheme::Arithmetic(eps) => {
            let denom = n as f64 + eps;
            if !(denom > 0.0) || !eps.is_finite() {
                return Err(Error::InvalidConfig(format!(
                    "arithmetic weights need n + eps > 0, got n = {n}, eps = {eps}"
                )));
            }
            Ok((1..=n).map(|i| (n + 1 - i) as f64 / denom).collect())
        }
        WeightScheme::Explicit(w) => {
            if w.len() != n {
                return Err(Error::InvalidConfig(format!(
                    "explicit scheme has {} weights, inner loop has {n} steps",
                    w.len()
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("explicit weights must be finite".into()));
            }
            Ok(w.clone())
        }
    }
}

/// Full record of one inner loop.
#[derive(Debug, Clone, PartialEq)]
pub struct InnerTrace {
    /// `theta_1 ..= theta_{n+1}`.
    pub thetas: Vec<ParamVector>,
    /// `g_i = theta_i - theta_{i+1}`.
    pub grads: Vec<GradVector>,
    /// Loss of the first minibatch seen for each domain.
    pub losses: Vec<f64>,
    pub domain_order: Vec<usize>,
    pub k: usize,
}

impl InnerTrace {
    /// Builds a trace from its parameter snapshots, deriving the displacements.
    pub fn from_thetas(
        thetas: Vec<ParamVector>,
        losses: Vec<f64>,
        domain_order: Vec<usize>,
        k: usize,
    ) -> Result<Self> {
        if thetas.len() < 2 {
            return Err(Error::Shape("a trace needs at least two snapshots".into()));
        }
        let n = thetas.len() - 1;
        if losses.len() != n || domain_order.len() != n {
            return Err(Error::Shape(format!(
                "trace with {n} steps has {} losses and {} domains",
                losses.len(),
                domain_order.len()
            )));
        }
        for t in &thetas[1..] {
            thetas[0].check_len(t, "trace snapshots")?;
        }
        let grads = thetas.windows(2).map(|w| w[0].sub(&w[1])).collect();
        Ok(Self {
            thetas,
            grads,
            losses,
            domain_order,
            k,
        })
    }

    pub fn n(&self) -> usize {
        self.grads.len()
    }

    pub fn initial(&self) -> &ParamVector {
        &self.thetas[0]
    }

    pub fn last(&self) -> &ParamVector {
        self.thetas.last().expect("non-empty trace")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerOptimizer {
    /// Momentum-free SGD at the inner learning rate.
    #[default]
    Sgd,
    /// Adam, re-initialised at the start of every inner loop.
    Adam(AdamConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Each inner step sees batches of the domain it is assigned to.
    #[default]
    PerDomain,
    /// Each inner step sees a batch pooled uniformly over all sources.
    Uniform,
}

/// Inner-loop settings shared by every meta-iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerSettings {
    pub k: usize,
    pub inner_lr: f64,
    pub batch_size: usize,
    pub optimizer: InnerOptimizer,
    pub sampling: Sampling,
}

impl InnerSettings {
    pub fn sgd(k: usize, inner_lr: f64, batch_size: usize) -> Self {
        Self {
            k,
            inner_lr,
            batch_size,
            optimizer: InnerOptimizer::Sgd,
            sampling: Sampling::PerDomain,
        }
    }
}

fn check_permutation(order: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &d in order {
        if d >= n || std::mem::replace(&mut seen[d], true) {
            return Err(Error::InvalidConfig(format!(
                "domain order {order:?} is not a permutation of 0..{n}"
            )));
        }
    }
    if order.len() != n {
        return Err(Error::InvalidConfig(format!(
            "domain order {order:?} is not a permutation of 0..{n}"
        )));
    }
    Ok(())
}

/// Runs one inner loop from `theta`, visiting source domains in `order`
/// (indices into `suite.train`).
pub fn inner_loop(
    spec: &NetworkSpec,
    suite: &DomainSuite,
    theta: &ParamVector,
    order: &[usize],
    settings: &InnerSettings,
    sampler: &mut SamplerState,
) -> Result<InnerTrace> {
    if suite.train.is_empty() {
        return Err(Error::InvalidConfig("inner loop over zero source domains".into()));
    }
    check_permutation(order, suite.train.len())?;
    if settings.k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    let mut optimizer = match settings.optimizer {
        InnerOptimizer::Sgd => Optimizer::Sgd(SgdConfig::new(settings.inner_lr)?),
        InnerOptimizer::Adam(cfg) => Optimizer::Adam(AdamState::new(cfg, theta.len())?),
    };

    let mut thetas = Vec::with_capacity(order.len() + 1);
    let mut losses = Vec::with_capacity(order.len());
    thetas.push(theta.clone());
    let mut current = theta.clone();
    for &d in order {
        let mut first_loss = None;
        for _ in 0..settings.k {
            let batch = match settings.sampling {
                Sampling::PerDomain => sampler.sample_batch(&suite.train[d], settings.batch_size)?,
                Sampling::Uniform => sampler.sample_mixture(&suite.train, settings.batch_size)?.0,
            };
            let (loss, grad) = spec.loss_and_grad(&current, &batch)?;
            first_loss.get_or_insert(loss);
            current = optimizer.step(&current, &grad)?;
        }
        losses.push(first_loss.expect("k >= 1"));
        thetas.push(current.clone());
    }
    InnerTrace::from_thetas(thetas, losses, order.to_vec(), settings.k)
}

/// `sum_i w_i g_i` for the trace's displacements.
pub fn meta_gradient(trace: &InnerTrace, scheme: &WeightScheme) -> Result<GradVector> {
    let w = weights(scheme, trace.n())?;
    let mut acc = GradVector::zeros(trace.initial().len());
    for (wi, g) in w.iter().zip(&trace.grads) {
        acc.axpy(*wi, g);
    }
    Ok(acc)
}

/// Gradient-form outer update `Θ - sum_i w_i g_i`.
pub fn outer_update_gradform(
    theta: &ParamVector,
    trace: &InnerTrace,
    scheme: &WeightScheme,
) -> Result<ParamVector> {
    theta.check_len(trace.initial(), "outer update")?;
    let meta = meta_gradient(trace, scheme)?;
    Ok(theta.sub(&meta))
}

/// Averaging-form outer update
/// `(eps * theta_1 + sum_i theta_{i+1}) / (n + eps)`, with `theta_1 = Θ`.
pub fn outer_update_avgform(theta: &ParamVector, trace: &InnerTrace, eps: f64) -> Result<ParamVector> {
    theta.check_len(trace.initial(), "outer update")?;
    let n = trace.n() as f64;
    if !(n + eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "averaging form needs n + eps > 0, got n = {n}, eps = {eps}"
        )));
    }
    let mut acc = theta.scaled(eps);
    for t in &trace.thetas[1..] {
        acc.axpy(1.0, t);
    }
    acc.scale(1.0 / (n + eps));
    Ok(acc)
}

/// One optimizer step on a batch pooled uniformly across the source domains.
/// Returns the new parameters and the batch loss.
pub fn erm_step(
    spec: &NetworkSpec,
    theta: &ParamVector,
    suite: &DomainSuite,
    batch_size: usize,
    optimizer: &mut Optimizer,
    sampler: &mut SamplerState,
) -> Result<(ParamVector, f64)> {
    let (batch, _) = sampler.sample_mixture(&suite.train, batch_size)?;
    let (loss, grad) = spec.loss_and_grad(theta, &batch)?;
    Ok((optimizer.step(theta, &grad)?, loss))
}

/// Running mean over accepted checkpoints: `(count * avg + Θ) / (count + 1)`.
pub fn swa_accumulate(avg: &ParamVector, count: usize, theta: &ParamVector) -> (ParamVector, usize) {
    if count == 0 {
        return (theta.clone(), 1);
    }
    let c = count as f64;
    let mut next = avg.scaled(c);
    next.axpy(1.0, theta);
    next.scale(1.0 / (c + 1.0));
    (next, count + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    Meta,
    Erm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OuterUpdate {
    /// `Θ <- Θ - sum_i w_i g_i`.
    Direct,
    /// Averaging form of the arithmetic update; requires an arithmetic scheme.
    Average,
    /// Adam fed with `sum_i w_i g_i` as its gradient.
    Adam(AdamConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwaConfig {
    pub burn_in_fraction: f64,
}

impl Default for SwaConfig {
    fn default() -> Self {
        Self {
            burn_in_fraction: 0.5,
        }
    }
}

/// Full training-run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetaConfig {
    pub network: NetworkSpec,
    #[serde(default)]
    pub algorithm: Algorithm,
    pub scheme: WeightScheme,
    pub k: usize,
    pub inner_lr: f64,
    pub outer: OuterUpdate,
    pub iterations: usize,
    pub batch_size: usize,
    pub shuffle_domains: bool,
    pub seed: u64,
    #[serde(default)]
    pub swa: Option<SwaConfig>,
    #[serde(default)]
    pub inner_optimizer: InnerOptimizer,
    #[serde(default)]
    pub sampling: Sampling,
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.iterations == 0 {
            return Err(Error::InvalidConfig("iterations must be >= 1".into()));
        }
        if !(self.inner_lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "inner_lr must be positive, got {}",
                self.inner_lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if let Some(swa) = &self.swa {
            if !(0.0..1.0).contains(&swa.burn_in_fraction) {
                return Err(Error::InvalidConfig(format!(
                    "swa burn_in_fraction must lie in [0, 1), got {}",
                    swa.burn_in_fraction
                )));
            }
        }
        match self.outer {
            OuterUpdate::Average if !matches!(self.scheme, WeightScheme::Arithmetic(_)) => {
                Err(Error::InvalidConfig(
                    "the averaging outer update needs an arithmetic scheme".into(),
                ))
            }
            OuterUpdate::Adam(cfg) => cfg.validate(),
            _ => Ok(()),
        }
    }

    fn inner_settings(&self) -> InnerSettings {
        InnerSettings {
            k: self.k,
            inner_lr: self.inner_lr,
            batch_size: self.batch_size,
            optimizer: self.inner_optimizer,
            sampling: self.sampling,
        }
    }
}

/// Order in which the inner loop visits the `n` sources.
pub fn domain_order(rng: &mut ChaCha8Rng, n: usize, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        order.shuffle(rng);
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iter: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub target_acc: f64,
}

/// Accuracy of one parameter vector on the pooled source-validation and
/// target sets. `NaN` where the set is empty or the task is regression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub val_acc: f64,
    pub target_acc: f64,
}

pub fn evaluate(spec: &NetworkSpec, params: &ParamVector, suite: &DomainSuite) -> Result<Evaluation> {
    let acc = |batch: Option<Batch>| -> Result<f64> {
        match batch {
            Some(b) if suite.is_classification() => spec.accuracy(params, &b),
            _ => Ok(f64::NAN),
        }
    };
    Ok(Evaluation {
        val_acc: acc(suite.val_batch())?,
        target_acc: acc(suite.target_batch())?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub final_params: ParamVector,
    pub swa_params: Option<ParamVector>,
    pub metrics: Vec<IterationMetrics>,
    /// Checkpoint with the highest source-validation accuracy (earliest on
    /// ties); the final iteration when accuracy is undefined.
    pub selected_iter: usize,
    pub selected_params: ParamVector,
    pub selected: Evaluation,
    pub swa: Option<Evaluation>,
    pub wall_clock_secs: f64,
    pub config: MetaConfig,
}

impl RunResult {
    /// `iter,train_loss,val_acc,target_acc`.
    pub fn metrics_csv(&self) -> CsvText {
        let mut csv = CsvText::with_header(&["iter", "train_loss", "val_acc", "target_acc"]);
        for m in &self.metrics {
            csv.row([
                m.iter.to_string(),
                fmt_g17(m.train_loss),
                fmt_g17(m.val_acc),
                fmt_g17(m.target_acc),
            ]);
        }
        csv
    }
}

/// Runs `config.iterations` meta-iterations (or ERM steps) on `suite`.
///
/// Randomness is split into independent seeded streams for initialisation,
/// domain order and batch sampling, so a run is a pure function of
/// `(config, suite)` apart from the recorded wall-clock time.
pub fn train(config: &MetaConfig, suite: &DomainSuite) -> Result<RunResult> {
    config.validate()?;
    let start = Instant::now();
    let spec = &config.network;
    let mut theta = spec.init_params(config.seed);
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut sampler = SamplerState::new(derive_seed(config.seed, 2));
    let n = suite.num_sources();
    let inner = config.inner_settings();

    let mut outer_adam = match config.outer {
        OuterUpdate::Adam(cfg) => Some(AdamState::new(cfg, theta.len())?),
        OuterUpdate::Direct | OuterUpdate::Average => None,
    };
    let mut erm_optimizer = match config.outer {
        OuterUpdate::Adam(cfg) => Optimizer::Adam(AdamState::new(cfg, theta.len())?),
        _ => Optimizer::Sgd(SgdConfig::new(config.inner_lr)?),
    };

    let burn_in = config
        .swa
        .map(|s| (s.burn_in_fraction * config.iterations as f64).floor() as usize);
    let mut swa_avg: Option<(ParamVector, usize)> = None;

    let mut metrics = Vec::with_capacity(config.iterations);
    let mut best: Option<(usize, Evaluation, ParamVector)> = None;

    for iter in 1..=config.iterations {
        let train_loss = match config.algorithm {
            Algorithm::Meta => {
                let order = domain_order(&mut order_rng, n, config.shuffle_domains);
                let trace = inner_loop(spec, suite, &theta, &order, &inner, &mut sampler)?;
                theta = match (&config.outer, &mut outer_adam) {
                    (OuterUpdate::Direct, _) => outer_update_gradform(&theta, &trace, &config.scheme)?,
                    (OuterUpdate::Average, _) => {
                        let WeightScheme::Arithmetic(eps) = config.scheme else {
                            unreachable!("validated")
                        };
                        outer_update_avgform(&theta, &trace, eps)?
                    }
                    (OuterUpdate::Adam(_), Some(adam)) => {
                        adam.step(&theta, &meta_gradient(&trace, &config.scheme)?)?
                    }
                    (OuterUpdate::Adam(_), None) => unreachable!("state created above"),
                };
                trace.losses.iter().sum::<f64>() / trace.n() as f64
            }
            Algorithm::Erm => {
                let (next, loss) = erm_step(
                    spec,
                    &theta,
                    suite,
                    config.batch_size * n,
                    &mut erm_optimizer,
                    &mut sampler,
                )?;
                theta = next;
                loss
            }
        };
        if !theta.is_finite() {
            return Err(Error::Degenerate(format!(
                "parameters became non-finite at iteration {iter}"
            )));
        }

        if burn_in.is_some_and(|b| iter > b) {
            let (avg, count) = match swa_avg.take() {
                Some((avg, count)) => swa_accumulate(&avg, count, &theta),
                None => swa_accumulate(&theta, 0, &theta),
            };
            swa_avg = Some((avg, count));
        }

        let eval = evaluate(spec, &theta, suite)?;
        if best.as_ref().is_none_or(|(_, b, _)| eval.val_acc.is_nan() || eval.val_acc > b.val_acc) {
            best = Some((iter, eval, theta.clone()));
        }
        metrics.push(IterationMetrics {
            iter,
            train_loss,
            val_acc: eval.val_acc,
            target_acc: eval.target_acc,
        });
    }

    let (selected_iter, selected, selected_params) = best.expect("iterations >= 1");
    let swa_params = swa_avg.map(|(avg, _)| avg);
    let swa = swa_params
        .as_ref()
        .map(|p| evaluate(spec, p, suite))
        .transpose()?;
    Ok(RunResult {
        final_params: theta,
        swa_params,
        metrics,
        selected_iter,
        selected_params,
        selected,
        swa,
        wall_clock_secs: start.elapsed().as_secs_f64(),
        config: config.clone(),
    })
}

/// A smooth full-batch loss, as used by the Taylor-expansion check.
pub trait Objective {
    fn loss(&self, params: &ParamVector) -> f64;
    fn grad(&self, params: &ParamVector) -> GradVector;
}

/// Full-batch loss of one domain under a fixed network.
pub struct FullBatchObjective<'a> {
    pub spec: &'a NetworkSpec,
    pub batch: Batch,
}

impl Objective for FullBatchObjective<'_> {
    fn loss(&self, params: &ParamVector) -> f64 {
        self.spec
            .forward_loss(params, &self.batch)
            .expect("objective shapes validated at construction")
    }

    fn grad(&self, params: &ParamVector) -> GradVector {
        self.spec
            .backward(params, &self.batch)
            .expect("objective shapes validated at construction")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaylorResidual {
    /// `L_k(theta_k) - [L_k(theta_1) - alpha * dot_sum]`.
    pub residual: f64,
    /// `sum_{i<k} grad L_i(theta_1) . grad L_k(theta_1)`.
    pub dot_sum: f64,
    pub loss_at_theta_k: f64,
    pub theta_k: ParamVector,
}

/// First-order expansion check over arbitrary objectives taken in order:
/// runs `target_step - 1` SGD steps (step i on objective i) and compares the
/// loss of objective `target_step` at the reached point with its linear
/// prediction from `theta_1`.
pub fn taylor_residual_with<O: Objective>(
    theta: &ParamVector,
    objectives: &[O],
    alpha: f64,
    target_step: usize,
) -> Result<TaylorResidual> {
    if target_step == 0 || target_step > objectives.len() {
        return Err(Error::InvalidConfig(format!(
            "target step {target_step} outside 1..={}",
            objectives.len()
        )));
    }
    if !(alpha >= 0.0) {
        return Err(Error::InvalidConfig(format!("alpha must be >= 0, got {alpha}")));
    }
    let target = &objectives[target_step - 1];
    let target_grad = target.grad(theta);
    let mut dot_sum = 0.0;
    let mut current = theta.clone();
    for obj in &objectives[..target_step - 1] {
        dot_sum += obj.grad(theta).dot(&target_grad);
        current.axpy(-alpha, &obj.grad(&current));
    }
    let loss_at_theta_k = target.loss(&current);
    let predicted = target.loss(theta) - alpha * dot_sum;
    Ok(TaylorResidual {
        residual: loss_at_theta_k - predicted,
        dot_sum,
        loss_at_theta_k,
        theta_k: current,
    })
}

/// [`taylor_residual_with`] on the full training split of each source domain,
/// visited in `order`. Requires a smooth activation.
pub fn taylor_residual(
    spec: &NetworkSpec,
    theta: &ParamVector,
    suite: &DomainSuite,
    order: &[usize],
    alpha: f64,
    target_step: usize,
) -> Result<TaylorResidual> {
    if !spec.activation.is_smooth() {
        return Err(Error::InvalidConfig(
            "the Taylor check needs a smooth activation (tanh)".into(),
        ));
    }
    check_permutation(order, suite.train.len())?;
    let objectives = order
        .iter()
        .map(|&d| {
            let batch = suite.train[d].full_batch();
            spec.forward_loss(theta, &batch)?;
            Ok(FullBatchObjective { spec, batch })
        })
        .collect::<Result<Vec<_>>>()?;
    taylor_residual_with(theta, &objectives, alpha, target_step)
}

/// Largest absolute difference between the output of the averaged model and
/// the average of the models' outputs, over all samples and outputs.
pub fn ensemble_gap(spec: &NetworkSpec, models: &[ParamVector], inputs: &[Vec<f64>]) -> Result<f64> {
    if models.len() < 2 {
        return Err(Error::InvalidConfig("ensemble gap needs at least two models".into()));
    }
    let avg_model = ParamVector::mean(models)?;
    let avg_out = spec.outputs(&avg_model, inputs)?;
    let mut mean_out = vec![vec![0.0; spec.output_dim()]; inputs.len()];
    for m in models {
        for (acc, out) in mean_out.iter_mut().zip(spec.outputs(m, inputs)?) {
            for (a, o) in acc.iter_mut().zip(out) {
                *a += o / models.len() as f64;
            }
        }
    }
    Ok(avg_out
        .iter()
        .flatten()
        .zip(mean_out.iter().flatten())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::SuiteConfig;
    use crate::nn::{Activation, LossKind};

    fn approx_eq(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn published_weight_sets() {
        let w = weights(&WeightScheme::Arithmetic(3.0), 3).unwrap();
        assert!(approx_eq(&w, &[1.0 / 2.0, 1.0 / 3.0, 1.0 / 6.0], 1e-15));
        let w = weights(&WeightScheme::Arithmetic(10.0), 5).unwrap();
        let want = [1.0 / 3.0, 4.0 / 15.0, 1.0 / 5.0, 2.0 / 15.0, 1.0 / 15.0];
        assert!(approx_eq(&w, &want, 1e-15));
        let w = weights(&WeightScheme::Arithmetic(1.0), 3).unwrap();
        assert!(approx_eq(&w, &[0.75, 0.5, 0.25], 1e-15));
        let w = weights(&WeightScheme::Constant(1.0 / 3.0), 3).unwrap();
        assert!(approx_eq(&w, &[1.0 / 3.0; 3], 1e-15));
        let w = weights(&WeightScheme::Arithmetic(7.5), 1).unwrap();
        assert_eq!(w, vec![1.0 / 8.5]);
    }

    #[test]
    fn normalized_preset_sums_to_one() {
        for n in 1..10 {
            let w = WeightScheme::arithmetic_normalized(n).weights(n).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14, "n={n}");
            assert!(w.windows(2).all(|p| p[0] > p[1]));
        }
    }

    #[test]
    fn weight_errors() {
        assert!(weights(&WeightScheme::Explicit(vec![1.0, 2.0]), 3).is_err());
        assert!(weights(&WeightScheme::Arithmetic(-3.0), 3).is_err());
        assert!(weights(&WeightScheme::Constant(0.0), 3).is_err());
        assert!(weights(&WeightScheme::Constant(1.0), 0).is_err());
    }

    fn toy() -> (NetworkSpec, DomainSuite) {
        let spec =
            NetworkSpec::new(vec![2, 6, 2], Activation::Tanh, LossKind::SoftmaxCrossEntropy)
                .unwrap();
        let suite = SuiteConfig::RotatedMoons {
            source_angles: vec![0.0, 30.0, 60.0],
            target_angles: vec![90.0],
            n_per_domain: 60,
            noise_sd: 0.1,
            val_fraction: 0.2,
            seed: 3,
        }
        .build()
        .unwrap();
        (spec, suite)
    }

    #[test]
    fn inner_loop_telescopes() {
        let (spec, suite) = toy();
        let theta = spec.init_params(1);
        let mut sampler = SamplerState::new(0);
        let trace = inner_loop(
            &spec,
            &suite,
            &theta,
            &[2, 0, 1],
            &InnerSettings::sgd(1, 0.1, 8),
            &mut sampler,
        )
        .unwrap();
        assert_eq!(trace.thetas.len(), 4);
        assert_eq!(trace.grads.len(), 3);
        let mut sum = GradVector::zeros(theta.len());
        for (i, g) in trace.grads.iter().enumerate() {
            assert!(trace.thetas[i].sub(g).max_abs_diff(&trace.thetas[i + 1]) <= 1e-12);
            sum.axpy(1.0, g);
        }
        assert!(theta.sub(&sum).max_abs_diff(trace.last()) <= 1e-12);
        assert!(inner_loop(
            &spec,
            &suite,
            &theta,
            &[0, 0, 1],
            &InnerSettings::sgd(1, 0.1, 8),
            &mut sampler
        )
        .is_err());
    }

    #[test]
    fn constant_unit_weights_move_to_last_model() {
        let thetas = vec![
            ParamVector::new(vec![1.0, 2.0]),
            ParamVector::new(vec![0.5, 1.0]),
            ParamVector::new(vec![-0.25, 3.0]),
        ];
        let trace = InnerTrace::from_thetas(thetas, vec![0.0; 2], vec![0, 1], 1).unwrap();
        let out = outer_update_gradform(trace.initial(), &trace, &WeightScheme::Constant(1.0)).unwrap();
        assert!(out.max_abs_diff(trace.last()) <= 1e-15);
        let zero = outer_update_gradform(
            trace.initial(),
            &trace,
            &WeightScheme::Explicit(vec![0.0, 0.0]),
        )
        .unwrap();
        assert_eq!(&zero, trace.initial());
        let avg = outer_update_avgform(trace.initial(), &trace, 0.0).unwrap();
        assert!(approx_eq(avg.as_slice(), &[0.125, 2.0], 1e-15));
        assert!(outer_update_avgform(trace.initial(), &trace, -2.0).is_err());
    }

    #[test]
    fn zero_displacement_trace_is_a_fixed_point() {
        let t = ParamVector::new(vec![0.3, -0.1]);
        let trace =
            InnerTrace::from_thetas(vec![t.clone(); 4], vec![0.0; 3], vec![0, 1, 2], 1).unwrap();
        for eps in [0.0, 1.0, 3.0] {
            assert!(outer_update_avgform(&t, &trace, eps).unwrap().max_abs_diff(&t) <= 1e-15);
        }
    }

    #[test]
    fn swa_running_mean() {
        let a = ParamVector::new(vec![1.0, 3.0]);
        let b = ParamVector::new(vec![2.0, -1.0]);
        let (avg, c) = swa_accumulate(&ParamVector::zeros(2), 0, &a);
        assert_eq!((avg.clone(), c), (a.clone(), 1));
        let (avg, c) = swa_accumulate(&avg, c, &b);
        assert_eq!(c, 2);
        assert!(avg.max_abs_diff(&a.add(&b).scaled(0.5)) <= 1e-15);
        let mut acc = (ParamVector::zeros(2), 0);
        for _ in 0..7 {
            acc = swa_accumulate(&acc.0, acc.1, &b);
        }
        assert_eq!(acc.0, b);
    }

    #[test]
    fn erm_with_one_source_equals_an_inner_step() {
        let (spec, full) = toy();
        let suite = DomainSuite::new(vec![full.sources[0].clone()], vec![], 0.2, 3).unwrap();
        let theta = spec.init_params(4);
        let mut s1 = SamplerState::new(9);
        let mut s2 = SamplerState::new(9);
        let mut opt = Optimizer::Sgd(SgdConfig::new(0.1).unwrap());
        let (erm, _) = erm_step(&spec, &theta, &suite, 16, &mut opt, &mut s1).unwrap();
        let trace = inner_loop(&spec, &suite, &theta, &[0], &InnerSettings::sgd(1, 0.1, 16), &mut s2)
            .unwrap();
        assert!(erm.max_abs_diff(trace.last()) <= 1e-15);
    }

    #[test]
    fn taylor_hand_case() {
        struct Quad(f64);
        impl Objective for Quad {
            fn loss(&self, p: &ParamVector) -> f64 {
                0.5 * (p[0] - self.0).powi(2)
            }
            fn grad(&self, p: &ParamVector) -> GradVector {
                ParamVector::new(vec![p[0] - self.0])
            }
        }
        let objs = [Quad(1.0), Quad(-1.0)];
        let theta = ParamVector::zeros(1);
        let r = taylor_residual_with(&theta, &objs, 0.1, 2).unwrap();
        assert!((r.loss_at_theta_k - 0.605).abs() < 1e-15);
        assert!((r.residual - 0.005).abs() < 1e-12);
        assert_eq!(r.dot_sum, -1.0);
        let r0 = taylor_residual_with(&theta, &objs, 0.0, 2).unwrap();
        assert_eq!(r0.residual, 0.0);
        assert_eq!(r0.theta_k, theta);
    }

    #[test]
    fn taylor_rejects_relu() {
        let (_, suite) = toy();
        let spec = NetworkSpec::new(vec![2, 4, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy)
            .unwrap();
        let theta = spec.init_params(0);
        assert!(taylor_residual(&spec, &theta, &suite, &[0, 1, 2], 0.1, 2).is_err());
    }

    #[test]
    fn ensemble_gap_basics() {
        let (spec, suite) = toy();
        let inputs = suite.sources[0].inputs[..10].to_vec();
        let m = spec.init_params(0);
        assert_eq!(ensemble_gap(&spec, &[m.clone(), m.clone()], &inputs).unwrap(), 0.0);
        assert!(ensemble_gap(&spec, std::slice::from_ref(&m), &inputs).is_err());
        assert!(ensemble_gap(&spec, &[m, ParamVector::zeros(3)], &inputs).is_err());
    }

    fn base_config() -> MetaConfig {
        let (spec, _) = toy();
        MetaConfig {
            network: spec,
            algorithm: Algorithm::Meta,
            scheme: WeightScheme::Constant(1.0),
            k: 1,
            inner_lr: 0.1,
            outer: OuterUpdate::Direct,
            iterations: 1,
            batch_size: 8,
            shuffle_domains: true,
            seed: 5,
            swa: None,
            inner_optimizer: InnerOptimizer::Sgd,
            sampling: Sampling::PerDomain,
        }
    }

    #[test]
    fn single_iteration_with_unit_constant_matches_trace() {
        let (_, suite) = toy();
        let cfg = base_config();
        let run = train(&cfg, &suite).unwrap();
        // replay the same streams by hand
        let theta = cfg.network.init_params(cfg.seed);
        let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 1));
        let mut sampler = SamplerState::new(derive_seed(cfg.seed, 2));
        let order = domain_order(&mut order_rng, 3, true);
        let trace = inner_loop(
            &cfg.network,
            &suite,
            &theta,
            &order,
            &InnerSettings::sgd(1, 0.1, 8),
            &mut sampler,
        )
        .unwrap();
        assert!(run.final_params.max_abs_diff(trace.last()) <= 1e-15);
        assert_eq!(run.metrics.len(), 1);
        let csv = run.metrics_csv().into_string();
        assert!(csv.starts_with("iter,train_loss,val_acc,target_acc\n1,"));

        let mut bad = cfg.clone();
        bad.iterations = 0;
        assert!(train(&bad, &suite).is_err());
        let mut bad = cfg;
        bad.outer = OuterUpdate::Average;
        assert!(train(&bad, &suite).is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let (_, suite) = toy();
        let mut cfg = base_config();
        cfg.iterations = 15;
        cfg.scheme = WeightScheme::arithmetic_normalized(3);
        cfg.outer = OuterUpdate::Adam(AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        });
        cfg.swa = Some(SwaConfig::default());
        let a = train(&cfg, &suite).unwrap();
        let b = train(&cfg, &suite).unwrap();
        assert_eq!(a.final_params, b.final_params);
        assert_eq!(a.swa_params, b.swa_params);
        assert_eq!(a.metrics, b.metrics);
        assert!(a.swa_params.is_some());
    }

    #[test]
    fn erm_and_uniform_sampling_paths_run() {
        let (_, suite) = toy();
        let mut cfg = base_config();
        cfg.iterations = 5;
        cfg.algorithm = Algorithm::Erm;
        assert_eq!(train(&cfg, &suite).unwrap().metrics.len(), 5);
        cfg.algorithm = Algorithm::Meta;
        cfg.sampling = Sampling::Uniform;
        cfg.inner_optimizer = InnerOptimizer::Adam(AdamConfig {
            learning_rate: 0.01,
            ..AdamConfig::default()
        });
        assert_eq!(train(&cfg, &suite).unwrap().metrics.len(), 5);
    }

    #[test]
    fn config_parsing_is_strict() {
        let cfg = base_config();
        let json = serde_json::to_value(&cfg).unwrap();
        let back: MetaConfig = serde_json::from_value(json.clone()).unwrap();
        assert_eq!(back, cfg);
        let mut extra = json;
        extra["learning_rate_typo"] = serde_json::json!(1.0);
        assert!(serde_json::from_value::<MetaConfig>(extra).is_err());
    }
}

//! Self-checks runnable from the command line: each suite draws random
//! instances from a fixed seed and checks one numerical identity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::metalearn::{
    outer_update_avgform, outer_update_gradform, taylor_residual_with, weights, FullBatchObjective,
    InnerTrace, WeightScheme,
};
use crate::nn::{finite_diff_grad, grad_mismatch, Activation, Batch, LossKind, NetworkSpec, Targets};
use crate::optim::{AdamConfig, AdamState, MomentumLedger};
use crate::quadratic::{fixed_point_with_weights, FixedPointOptions, QuadraticTask};
use crate::{Error, ParamVector, Result};

pub const SUITES: [&str; 5] = ["identity", "taylor", "centroid", "ledger", "gradcheck"];

/// Weight rule under test; swapped out to check that the suites notice bugs.
pub type WeightFn = fn(&WeightScheme, usize) -> Result<Vec<f64>>;

#[derive(Debug, Clone, Copy)]
pub struct VerifyOptions {
    pub seed: u64,
    pub weight_fn: WeightFn,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            weight_fn: weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub name: String,
    pub checks: usize,
    pub failures: Vec<String>,
}

impl SuiteReport {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_owned(),
            checks: 0,
            failures: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, msg: impl FnOnce() -> String) {
        self.checks += 1;
        if !ok {
            self.failures.push(msg());
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Runs the named suite.
pub fn run_suite(name: &str, options: &VerifyOptions) -> Result<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    match name {
        "identity" => identity_suite(&mut rng, options.weight_fn),
        "taylor" => taylor_suite(&mut rng),
        "centroid" => centroid_suite(&mut rng, options.weight_fn),
        "ledger" => ledger_suite(&mut rng),
        "gradcheck" => gradcheck_suite(&mut rng),
        other => Err(Error::InvalidConfig(format!(
            "unknown suite `{other}`; expected one of {}",
            SUITES.join(", ")
        ))),
    }
}

pub fn run_all(options: &VerifyOptions) -> Result<Vec<SuiteReport>> {
    SUITES.iter().map(|s| run_suite(s, options)).collect()
}

fn gaussian_vec(rng: &mut ChaCha8Rng, len: usize, scale: f64) -> ParamVector {
    ParamVector::new((0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
}

/// Random network, parameters and batch.
pub fn random_instance(rng: &mut ChaCha8Rng, activation: Activation) -> (NetworkSpec, ParamVector, Batch) {
    let input = rng.random_range(1..=4);
    let hidden = rng.random_range(0..=2);
    let mut layers = vec![input];
    layers.extend((0..hidden).map(|_| rng.random_range(2..=8)));
    let output = rng.random_range(1..=3);
    layers.push(output);
    let loss = if output >= 2 && rng.random_bool(0.5) {
        LossKind::SoftmaxCrossEntropy
    } else {
        LossKind::SquaredError
    };
    let spec = NetworkSpec::new(layers, activation, loss).expect("valid random layers");
    let params = gaussian_vec(rng, spec.param_count(), 0.7);
    let n = rng.random_range(1..=8);
    let batch = random_batch(rng, &spec, n);
    (spec, params, batch)
}

pub fn random_batch(rng: &mut ChaCha8Rng, spec: &NetworkSpec, n: usize) -> Batch {
    let inputs: Vec<Vec<f64>> = (0..n)
        .map(|_| gaussian_vec(rng, spec.input_dim(), 1.0).into_inner())
        .collect();
    let targets = match spec.loss {
        LossKind::SoftmaxCrossEntropy => {
            Targets::Classes((0..n).map(|_| rng.random_range(0..spec.output_dim())).collect())
        }
        LossKind::SquaredError => Targets::Values(
            (0..n)
                .map(|_| gaussian_vec(rng, spec.output_dim(), 1.0).into_inner())
                .collect(),
        ),
    };
    Batch::new(inputs, targets, 0).expect("consistent random batch")
}

fn identity_suite(rng: &mut ChaCha8Rng, weight_fn: WeightFn) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("identity");
    for t in 0..100 {
        let n = [2, 3, 5][t % 3];
        let len = rng.random_range(1..=500);
        let thetas: Vec<ParamVector> = (0..=n).map(|_| gaussian_vec(rng, len, 1.0)).collect();
        let trace = InnerTrace::from_thetas(thetas, vec![0.0; n], (0..n).collect(), 1)?;
        for eps in [0.5, 1.0, 3.0, 10.0] {
            let w = weight_fn(&WeightScheme::Arithmetic(eps), n)?;
            let grad =
                outer_update_gradform(trace.initial(), &trace, &WeightScheme::Explicit(w))?;
            let avg = outer_update_avgform(trace.initial(), &trace, eps)?;
            let diff = grad.max_abs_diff(&avg);
            report.check(diff <= 1e-12, || {
                format!("trace {t} (n={n}, eps={eps}): gradient and averaging forms differ by {diff:e}")
            });
        }
    }
    Ok(report)
}

fn taylor_suite(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("taylor");
    struct Quad(f64);
    impl crate::metalearn::Objective for Quad {
        fn loss(&self, p: &ParamVector) -> f64 {
            0.5 * (p[0] - self.0).powi(2)
        }
        fn grad(&self, p: &ParamVector) -> ParamVector {
            ParamVector::new(vec![p[0] - self.0])
        }
    }
    let hand = taylor_residual_with(&ParamVector::zeros(1), &[Quad(1.0), Quad(-1.0)], 0.1, 2)?;
    report.check((hand.residual - 0.005).abs() <= 1e-12, || {
        format!("1-D quadratic residual {} != 0.005", hand.residual)
    });

    for t in 0..20 {
        let spec = NetworkSpec::new(
            vec![3, rng.random_range(3..=8), 2],
            Activation::Tanh,
            LossKind::SoftmaxCrossEntropy,
        )?;
        // Initialisation-scale weights. The check targets the second domain:
        // for later targets the alpha^2 coefficient is sign-indefinite and can
        // vanish, which hides the order behind the alpha^3 term.
        let theta = gaussian_vec(rng, spec.param_count(), 0.5);
        let objectives: Vec<FullBatchObjective> = (0..2)
            .map(|_| FullBatchObjective {
                spec: &spec,
                batch: random_batch(rng, &spec, 32),
            })
            .collect();
        for alpha in [0.1, 0.05] {
            let full = taylor_residual_with(&theta, &objectives, alpha, 2)?.residual;
            let half = taylor_residual_with(&theta, &objectives, alpha / 2.0, 2)?.residual;
            let ratio = full / half;
            report.check((3.5..=4.5).contains(&ratio), || {
                format!("instance {t}, alpha {alpha}: residual ratio {ratio} outside [3.5, 4.5]")
            });
        }
    }
    Ok(report)
}

fn centroid_suite(rng: &mut ChaCha8Rng, weight_fn: WeightFn) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("centroid");
    let options = FixedPointOptions {
        tol: 1e-15,
        max_iters: 100_000,
    };
    for t in 0..50 {
        let n = [2, 3, 5][t % 3];
        let dim = rng.random_range(1..=4);
        let points: Vec<Vec<f64>> = (0..n).map(|_| gaussian_vec(rng, dim, 1.0).into_inner()).collect();
        let task = QuadraticTask::from_points(points.clone())?;
        let eps = rng.random_range(0.1..5.0);
        let order: Vec<usize> = (0..n).collect();
        let w = weight_fn(&WeightScheme::Arithmetic(eps), n)?;
        let start = ParamVector::zeros(dim);
        let centroid = ParamVector::mean(&points.iter().cloned().map(ParamVector::new).collect::<Vec<_>>())?;
        match fixed_point_with_weights(&task, &w, 1.0, &order, &start, options) {
            Ok(fp) => {
                let diff = fp.theta.max_abs_diff(&centroid);
                report.check(diff <= 1e-12, || {
                    format!("task {t} (n={n}, eps={eps:.3}): fixed point is {diff:e} from the centroid")
                });
            }
            Err(e) => report.check(false, || format!("task {t}: {e}")),
        }
        let fish = fixed_point_with_weights(&task, &vec![1.0; n], 1.0, &order, &start, options)?;
        let diff = fish.theta.max_abs_diff(&ParamVector::new(points[n - 1].clone()));
        report.check(diff <= 1e-12, || {
            format!("task {t}: full interpolation fixed point is {diff:e} from the last optimum")
        });
    }

    let line = QuadraticTask::from_points(vec![vec![1.0], vec![-1.0]])?;
    let w = weight_fn(&WeightScheme::Arithmetic(1.0), 2)?;
    let fp = fixed_point_with_weights(&line, &w, 0.5, &[0, 1], &ParamVector::zeros(1), FixedPointOptions::default());
    let value = fp.map(|f| f.theta[0]).unwrap_or(f64::NAN);
    report.check((value - 0.2).abs() <= 1e-10, || {
        format!("optima +1/-1 at lr 0.5: fixed point {value} != 0.2")
    });
    Ok(report)
}

fn ledger_suite(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("ledger");
    for t in 0..20 {
        let len = rng.random_range(1..=20);
        let n_domains = rng.random_range(1..=5);
        let beta1 = rng.random_range(0.0..0.99);
        let cfg = AdamConfig {
            beta1,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(cfg, len)?;
        let mut ledger = MomentumLedger::new(0..n_domains, len);
        let mut params = ParamVector::zeros(len);
        for _ in 0..200 {
            let g = gaussian_vec(rng, len, 1.0);
            let d = rng.random_range(0..n_domains);
            ledger.update(&g, d, beta1)?;
            params = adam.step(&params, &g)?;
        }
        let total = ParamVector::new(ledger.total());
        let diff = total.max_abs_diff(&ParamVector::new(adam.m.clone()));
        report.check(diff <= 1e-10, || {
            format!("stream {t}: ledger sum differs from the first moment by {diff:e}")
        });
        let sum: f64 = ledger.fractions()?.values().sum();
        report.check((sum - 1.0).abs() <= 1e-12, || {
            format!("stream {t}: fractions sum to {sum}")
        });
    }
    Ok(report)
}

fn gradcheck_suite(rng: &mut ChaCha8Rng) -> Result<SuiteReport> {
    let mut report = SuiteReport::new("gradcheck");
    for t in 0..100 {
        let (spec, params, batch) = random_instance(rng, Activation::Tanh);
        let analytic = spec.backward(&params, &batch)?;
        let numeric = finite_diff_grad(&spec, &params, &batch, 1e-5)?;
        let bad = grad_mismatch(&analytic, &numeric, 1e-5, 1e-8);
        report.check(bad.is_none(), || {
            let (i, rel) = bad.expect("mismatch");
            format!("instance {t} {:?}: coordinate {i} relative error {rel:e}", spec.layer_sizes)
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_suites_pass() {
        for r in run_all(&VerifyOptions::default()).unwrap() {
            assert!(r.passed(), "{}: {:?}", r.name, r.failures);
            assert!(r.checks > 0);
        }
    }

    #[test]
    fn off_by_one_weights_break_the_centroid_suite() {
        fn shifted(scheme: &WeightScheme, n: usize) -> Result<Vec<f64>> {
            let WeightScheme::Arithmetic(eps) = scheme else {
                return weights(scheme, n);
            };
            Ok((1..=n).map(|i| (n - i) as f64 / (n as f64 + eps)).collect())
        }
        let opts = VerifyOptions {
            weight_fn: shifted,
            ..VerifyOptions::default()
        };
        assert!(!run_suite("centroid", &opts).unwrap().passed());
    }

    #[test]
    fn unknown_suite_rejected() {
        assert!(run_suite("nope", &VerifyOptions::default()).is_err());
    }
}

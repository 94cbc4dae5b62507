//! Closed-form testbed with affine optimal sets.
//!
//! Each domain's loss is half the squared distance to an affine manifold `W`,
//! so an SGD step with rate `lr` lands exactly on
//! `(1 - lr) theta + lr P_W(theta)`. That makes the interpolation weight of
//! every inner step known, and the fixed point of a whole meta-iteration can
//! be compared against the centroid of the domain optima.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::metalearn::{weights, WeightScheme};
use crate::{Error, ParamVector, Result};

/// Relative singular-value floor below which a constraint matrix counts as
/// rank deficient.
const RANK_TOL: f64 = 1e-12;

/// Optimal set of one domain.
#[derive(Debug, Clone, PartialEq)]
pub enum AffineManifold {
    Point(ParamVector),
    /// `{x : A x = b}`; `gram_inv` caches `(A A^T)^-1`.
    Subspace {
        a: DMatrix<f64>,
        b: DVector<f64>,
        gram_inv: DMatrix<f64>,
    },
}

impl AffineManifold {
    pub fn point(phi: Vec<f64>) -> Self {
        AffineManifold::Point(ParamVector::new(phi))
    }

    /// Builds `{x : A x = b}` from a row-major `rows x cols` matrix.
    pub fn subspace(rows: usize, cols: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || a.len() != rows * cols || b.len() != rows {
            return Err(Error::Shape(format!(
                "subspace needs a {rows}x{cols} matrix and {rows} offsets, got {} and {}",
                a.len(),
                b.len()
            )));
        }
        let a = DMatrix::from_row_slice(rows, cols, &a);
        let sv = a.singular_values();
        let max = sv.max();
        let min = if rows > cols { 0.0 } else { sv.min() };
        if !(max > 0.0) || min <= RANK_TOL * max {
            return Err(Error::RankDeficient(min));
        }
        let gram_inv = (&a * a.transpose())
            .try_inverse()
            .ok_or(Error::RankDeficient(min))?;
        Ok(AffineManifold::Subspace {
            a,
            b: DVector::from_vec(b),
            gram_inv,
        })
    }

    pub fn dim(&self) -> usize {
        match self {
            AffineManifold::Point(phi) => phi.len(),
            AffineManifold::Subspace { a, .. } => a.ncols(),
        }
    }

    fn check_dim(&self, x: &ParamVector) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape(format!(
                "point of dimension {} against a manifold in dimension {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Euclidean projection onto the manifold.
pub fn project(x: &ParamVector, m: &AffineManifold) -> Result<ParamVector> {
    m.check_dim(x)?;
    Ok(match m {
        AffineManifold::Point(phi) => phi.clone(),
        AffineManifold::Subspace { a, b, gram_inv } => {
            let xv = DVector::from_column_slice(x.as_slice());
            let residual = a * &xv - b;
            let p = xv - a.transpose() * (gram_inv * residual);
            ParamVector::new(p.as_slice().to_vec())
        }
    })
}

/// `(1/2 ||x - P(x)||^2, x - P(x))`.
pub fn dist_loss_grad(x: &ParamVector, m: &AffineManifold) -> Result<(f64, ParamVector)> {
    let grad = x.sub(&project(x, m)?);
    Ok((0.5 * grad.dot(&grad), grad))
}

/// One SGD step of rate `lr` on the squared-distance loss; the step is an
/// exact interpolation toward the projection with weight `eta = lr`.
pub fn inner_step_exact(theta: &ParamVector, m: &AffineManifold, lr: f64) -> Result<(ParamVector, f64)> {
    check_lr(lr)?;
    let (_, grad) = dist_loss_grad(theta, m)?;
    let mut next = theta.clone();
    next.axpy(-lr, &grad);
    Ok((next, lr))
}

fn check_lr(lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr <= 1.0) {
        return Err(Error::InvalidConfig(format!("lr must lie in (0, 1], got {lr}")));
    }
    Ok(())
}

/// One affine optimal set per domain, all in the same ambient dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    pub manifolds: Vec<AffineManifold>,
    pub dim: usize,
}

impl QuadraticTask {
    pub fn new(manifolds: Vec<AffineManifold>) -> Result<Self> {
        let dim = manifolds
            .first()
            .ok_or_else(|| Error::InvalidConfig("a task needs at least one domain".into()))?
            .dim();
        if manifolds.iter().any(|m| m.dim() != dim) {
            return Err(Error::Shape("manifolds live in different dimensions".into()));
        }
        Ok(Self { manifolds, dim })
    }

    /// Task whose optima are the given points.
    pub fn from_points(points: Vec<Vec<f64>>) -> Result<Self> {
        Self::new(points.into_iter().map(AffineManifold::point).collect())
    }

    pub fn n(&self) -> usize {
        self.manifolds.len()
    }
}

/// Record of one inner pass over the domains.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationTrace {
    pub etas: Vec<f64>,
    /// `P_{W_i}(theta_i)`.
    pub projections: Vec<ParamVector>,
    /// `theta_1 ..= theta_{n+1}`.
    pub thetas: Vec<ParamVector>,
}

/// One exact-step pass over the domains in `order`.
pub fn interpolation_trace(
    task: &QuadraticTask,
    theta: &ParamVector,
    order: &[usize],
    lr: f64,
) -> Result<InterpolationTrace> {
    check_lr(lr)?;
    check_order(order, task.n())?;
    let mut thetas = vec![theta.clone()];
    let mut projections = Vec::with_capacity(order.len());
    let mut etas = Vec::with_capacity(order.len());
    let mut current = theta.clone();
    for &d in order {
        let m = &task.manifolds[d];
        projections.push(project(&current, m)?);
        let (next, eta) = inner_step_exact(&current, m, lr)?;
        etas.push(eta);
        thetas.push(next.clone());
        current = next;
    }
    Ok(InterpolationTrace {
        etas,
        projections,
        thetas,
    })
}

fn check_order(order: &[usize], n: usize) -> Result<()> {
    let mut sorted = order.to_vec();
    sorted.sort_unstable();
    if sorted != (0..n).collect::<Vec<_>>() {
        return Err(Error::InvalidConfig(format!(
            "domain order {order:?} is not a permutation of 0..{n}"
        )));
    }
    Ok(())
}

/// Closed form of `n` interpolation steps:
/// `prod_j (1 - eta_j) theta_1 + sum_j prod_{k>j} (1 - eta_k) eta_j phi_j`.
pub fn expand_interpolation(
    theta_1: &ParamVector,
    etas: &[f64],
    projections: &[ParamVector],
) -> Result<ParamVector> {
    if etas.len() != projections.len() {
        return Err(Error::Shape(format!(
            "{} step sizes for {} projections",
            etas.len(),
            projections.len()
        )));
    }
    for p in projections {
        theta_1.check_len(p, "interpolation expansion")?;
    }
    let coeffs = interpolation_coefficients(etas);
    let mut out = theta_1.scaled(coeffs.initial);
    for (c, phi) in coeffs.projections.iter().zip(projections) {
        out.axpy(*c, phi);
    }
    Ok(out)
}

/// Coefficients of the closed-form expansion.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpolationCoefficients {
    pub initial: f64,
    pub projections: Vec<f64>,
}

pub fn interpolation_coefficients(etas: &[f64]) -> InterpolationCoefficients {
    let n = etas.len();
    let mut projections = vec![0.0; n];
    let mut tail = 1.0;
    for j in (0..n).rev() {
        projections[j] = tail * etas[j];
        tail *= 1.0 - etas[j];
    }
    InterpolationCoefficients {
        initial: tail,
        projections,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointOptions {
    /// Stop once `||Θ' - Θ|| < tol`.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        Self {
            tol: 1e-12,
            max_iters: 100_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FixedPoint {
    pub theta: ParamVector,
    pub iterations: usize,
    pub displacement: f64,
}

/// Iterates `inner pass in fixed order -> Θ - sum_i w_i g_i` from `theta_0`
/// until the update stalls.
pub fn fixed_point(
    task: &QuadraticTask,
    scheme: &WeightScheme,
    lr: f64,
    order: &[usize],
    theta_0: &ParamVector,
    options: FixedPointOptions,
) -> Result<FixedPoint> {
    let w = weights(scheme, task.n())?;
    fixed_point_with_weights(task, &w, lr, order, theta_0, options)
}

/// [`fixed_point`] with explicit per-step weights.
pub fn fixed_point_with_weights(
    task: &QuadraticTask,
    weights: &[f64],
    lr: f64,
    order: &[usize],
    theta_0: &ParamVector,
    options: FixedPointOptions,
) -> Result<FixedPoint> {
    if weights.len() != task.n() {
        return Err(Error::InvalidConfig(format!(
            "{} weights for {} domains",
            weights.len(),
            task.n()
        )));
    }
    if theta_0.len() != task.dim {
        return Err(Error::Shape(format!(
            "start point of dimension {} in a {}-dimensional task",
            theta_0.len(),
            task.dim
        )));
    }
    let mut theta = theta_0.clone();
    let mut displacement = f64::INFINITY;
    for iter in 1..=options.max_iters {
        let trace = interpolation_trace(task, &theta, order, lr)?;
        let mut next = theta.clone();
        for (w, pair) in weights.iter().zip(trace.thetas.windows(2)) {
            next.axpy(-w, &pair[0].sub(&pair[1]));
        }
        displacement = next.sub(&theta).norm();
        theta = next;
        if !displacement.is_finite() {
            break;
        }
        if displacement < options.tol {
            return Ok(FixedPoint {
                theta,
                iterations: iter,
                displacement,
            });
        }
    }
    Err(Error::NonConvergence {
        iterations: options.max_iters,
        displacement,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CentroidReport {
    /// Distance from Θ to the mean of the projections of Θ.
    pub distance: f64,
    /// `D(Θ, W_i)` per domain.
    pub per_domain: Vec<f64>,
    /// `max - min` of `per_domain`.
    pub spread: f64,
}

pub fn centroid_distance(theta: &ParamVector, task: &QuadraticTask) -> Result<CentroidReport> {
    let projections = task
        .manifolds
        .iter()
        .map(|m| project(theta, m))
        .collect::<Result<Vec<_>>>()?;
    let centroid = ParamVector::mean(&projections)?;
    let per_domain: Vec<f64> = projections.iter().map(|p| theta.sub(p).norm()).collect();
    let max = per_domain.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = per_domain.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(CentroidReport {
        distance: theta.sub(&centroid).norm(),
        per_domain,
        spread: max - min,
    })
}

/// Vertices of a regular simplex with `n` vertices in `R^n`, centred at the
/// origin with unit circumradius.
pub fn regular_simplex(n: usize) -> Vec<Vec<f64>> {
    let radius = ((n as f64 - 1.0) / n as f64).sqrt();
    (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    let v = if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64;
                    if n > 1 {
                        v / radius
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect()
}

/// Uniformly distributed rotation (orthogonal, determinant +1) from the QR
/// factorisation of a Gaussian matrix.
pub fn random_rotation<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..dim {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    if dim > 0 && q.determinant() < 0.0 {
        q.column_mut(0).neg_mut();
    }
    q
}

/// Applies `rotation` to every point.
pub fn rotate_points(points: &[Vec<f64>], rotation: &DMatrix<f64>) -> Vec<Vec<f64>> {
    points
        .iter()
        .map(|p| {
            let v = rotation * DVector::from_column_slice(p);
            v.as_slice().to_vec()
        })
        .collect()
}

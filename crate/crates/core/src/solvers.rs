//! Fixed-point solvers shared by the nonlinear planner equilibrium and the
//! linear adjoint system.
//!
//! Both solvers evaluate `g` once per iteration and stop as soon as the
//! relative residual of the evaluated point drops to `tol`. The returned
//! solution is always the last point `g` was evaluated at, so the final entry
//! of the residual trace describes the returned solution.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const RESIDUAL_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    ForwardIteration,
    Anderson,
}

impl SolverKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::ForwardIteration => "forward",
            Self::Anderson => "anderson",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "forward" | "forward_iteration" => Some(Self::ForwardIteration),
            "anderson" => Some(Self::Anderson),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub kind: SolverKind,
    pub max_iter: usize,
    /// Relative-residual stopping threshold. Zero runs exactly `max_iter` iterations.
    pub tol: f64,
    pub memory: usize,
    /// Mixing between the `g` images (1.0) and the iterates (0.0).
    pub beta: f64,
    /// Ridge on the Anderson Gram matrix, relative to its mean diagonal.
    pub ridge: f64,
}

impl SolverConfig {
    pub fn forward_default() -> Self {
        Self {
            kind: SolverKind::ForwardIteration,
            max_iter: 80,
            tol: 1e-4,
            memory: 5,
            beta: 1.0,
            ridge: 1e-4,
        }
    }

    pub fn backward_default() -> Self {
        Self {
            kind: SolverKind::Anderson,
            max_iter: 15,
            tol: 1e-6,
            ..Self::forward_default()
        }
    }

    pub fn with_kind(self, kind: SolverKind) -> Self {
        Self { kind, ..self }
    }

    pub fn with_iters(self, max_iter: usize, tol: f64) -> Self {
        Self { max_iter, tol, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 {
            return Err(Error::Config("solver max_iter must be at least 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!(
                "solver tol must be non-negative, got {}",
                self.tol
            )));
        }
        if self.memory == 0 {
            return Err(Error::Config("anderson memory must be at least 1".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!(
                "anderson beta must lie in (0, 1], got {}",
                self.beta
            )));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Config(format!(
                "anderson ridge must be non-negative, got {}",
                self.ridge
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct EquilibriumResult {
    pub solution: Tensor,
    pub residual_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl EquilibriumResult {
    pub fn final_residual(&self) -> f64 {
        self.residual_trace.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// `‖fv − v‖₂ / (‖v‖₂ + 1e-8)`
pub fn relative_residual(v: &Tensor, fv: &Tensor) -> Result<f64> {
    v.expect_same_shape(fv, "relative_residual")?;
    let diff: f64 = v
        .data()
        .iter()
        .zip(fv.data())
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt();
    Ok(diff / (v.norm() + RESIDUAL_EPS))
}

pub fn solve<G>(g: G, v0: &Tensor, cfg: &SolverConfig) -> Result<EquilibriumResult>
where
    G: FnMut(&Tensor) -> Result<Tensor>,
{
    match cfg.kind {
        SolverKind::ForwardIteration => forward_iterate(g, v0, cfg),
        SolverKind::Anderson => anderson(g, v0, cfg),
    }
}

fn evaluate<G>(g: &mut G, v: &Tensor, trace: &mut Vec<f64>) -> Result<(Tensor, f64)>
where
    G: FnMut(&Tensor) -> Result<Tensor>,
{
    let fv = g(v)?;
    let res = relative_residual(v, &fv)?;
    trace.push(res);
    if !fv.is_finite() || !res.is_finite() {
        return Err(Error::Diverged {
            iterations: trace.len(),
            last_residual: res,
            trace: std::mem::take(trace),
        });
    }
    Ok((fv, res))
}

/// Plain iteration `v ← g(v)`.
pub fn forward_iterate<G>(mut g: G, v0: &Tensor, cfg: &SolverConfig) -> Result<EquilibriumResult>
where
    G: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.max_iter);
    let mut v = v0.clone();
    for k in 0..cfg.max_iter {
        let (fv, res) = evaluate(&mut g, &v, &mut trace)?;
        if res <= cfg.tol || k + 1 == cfg.max_iter {
            return Ok(finish(v, trace, cfg.tol));
        }
        v = fv;
    }
    unreachable!("max_iter >= 1 is validated")
}

/// Anderson acceleration with a sliding window of `cfg.memory` iterates.
pub fn anderson<G>(mut g: G, v0: &Tensor, cfg: &SolverConfig) -> Result<EquilibriumResult>
where
    G: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.max_iter);
    let mut xs: VecDeque<Tensor> = VecDeque::with_capacity(cfg.memory);
    let mut gs: VecDeque<Tensor> = VecDeque::with_capacity(cfg.memory);
    let mut v = v0.clone();
    for k in 0..cfg.max_iter {
        let (fv, res) = evaluate(&mut g, &v, &mut trace)?;
        if res <= cfg.tol || k + 1 == cfg.max_iter {
            return Ok(finish(v, trace, cfg.tol));
        }
        if xs.len() == cfg.memory {
            xs.pop_front();
            gs.pop_front();
        }
        xs.push_back(v);
        gs.push_back(fv);

        let weights = if xs.len() == 1 {
            Some(vec![1.0])
        } else {
            mixing_weights(&xs, &gs, cfg.ridge)
        };
        v = match weights {
            Some(alpha) => mix(&xs, &gs, &alpha, cfg.beta),
            None => {
                log::debug!("anderson: singular mixing system at iteration {k}, taking a plain step");
                gs.back().expect("history is non-empty").clone()
            }
        };
    }
    unreachable!("max_iter >= 1 is validated")
}

fn finish(solution: Tensor, trace: Vec<f64>, tol: f64) -> EquilibriumResult {
    let converged = trace.last().is_some_and(|&r| r <= tol);
    EquilibriumResult {
        solution,
        iterations: trace.len(),
        residual_trace: trace,
        converged,
    }
}

fn mix(xs: &VecDeque<Tensor>, gs: &VecDeque<Tensor>, alpha: &[f64], beta: f64) -> Tensor {
    let mut out = Tensor::zeros_like(&xs[0]);
    let o = out.data_mut();
    for ((x, gx), &a) in xs.iter().zip(gs).zip(alpha) {
        let (wg, wx) = (beta * a, (1.0 - beta) * a);
        if wx == 0.0 {
            for (d, &gv) in o.iter_mut().zip(gx.data()) {
                *d += wg * gv;
            }
        } else {
            for ((d, &gv), &xv) in o.iter_mut().zip(gx.data()).zip(x.data()) {
                *d += wg * gv + wx * xv;
            }
        }
    }
    out
}

/// Weights summing to one that minimise `‖Σ αᵢ (g(xᵢ) − xᵢ)‖² + ridge·‖α‖²`,
/// from the bordered normal equations. `None` if the system is singular.
fn mixing_weights(xs: &VecDeque<Tensor>, gs: &VecDeque<Tensor>, ridge: f64) -> Option<Vec<f64>> {
    let n = xs.len();
    let residuals: Vec<Vec<f64>> = xs
        .iter()
        .zip(gs)
        .map(|(x, gx)| gx.data().iter().zip(x.data()).map(|(a, b)| a - b).collect())
        .collect();
    let mut gram = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let d: f64 = residuals[i].iter().zip(&residuals[j]).map(|(a, b)| a * b).sum();
            gram[i][j] = d;
            gram[j][i] = d;
        }
    }
    let scale = (0..n).map(|i| gram[i][i]).sum::<f64>() / n as f64;
    if !(scale > 0.0) || !scale.is_finite() {
        return None;
    }
    // [0 1ᵀ; 1 H] [ν; α] = [1; 0], with H normalised to unit mean diagonal.
    let dim = n + 1;
    let mut a = vec![vec![0.0; dim + 1]; dim];
    for i in 0..n {
        a[0][i + 1] = 1.0;
        a[i + 1][0] = 1.0;
        for j in 0..n {
            a[i + 1][j + 1] = gram[i][j] / scale + if i == j { ridge } else { 0.0 };
        }
    }
    a[0][dim] = 1.0;
    let sol = gaussian_solve(a)?;
    let alpha = sol[1..].to_vec();
    alpha.iter().all(|x| x.is_finite()).then_some(alpha)
}

/// Solves an augmented system `[A | b]` by elimination with partial pivoting.
#[allow(clippy::needless_range_loop)]
fn gaussian_solve(mut a: Vec<Vec<f64>>) -> Option<Vec<f64>> {
    let n = a.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-13 {
            return None;
        }
        a.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f == 0.0 {
                continue;
            }
            for k in col..=n {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (a[row][n] - s) / a[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_affine(v: &Tensor) -> Result<Tensor> {
        Ok(v.map(|x| 0.5 * x + 1.0))
    }

    fn cfg(kind: SolverKind, max_iter: usize, tol: f64) -> SolverConfig {
        SolverConfig {
            kind,
            max_iter,
            tol,
            memory: 5,
            beta: 1.0,
            ridge: 1e-4,
        }
    }

    #[test]
    fn residual_definition() {
        let v = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        assert_eq!(relative_residual(&v, &v).unwrap(), 0.0);
        let zero = Tensor::zeros(&[2]);
        assert!((relative_residual(&zero, &v).unwrap() - 5.0 / 1e-8).abs() < 1e-3);
        let fv = Tensor::from_vec(&[2], vec![0.0, 8.0]).unwrap();
        // ‖(-3, 4)‖ / (5 + 1e-8)
        let want = 5.0 / (5.0 + 1e-8);
        assert!((relative_residual(&v, &fv).unwrap() - want).abs() < 1e-15);
        assert!(relative_residual(&v, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn forward_iteration_on_affine_contraction() {
        let v0 = Tensor::zeros(&[1]);
        let out = forward_iterate(scalar_affine, &v0, &cfg(SolverKind::ForwardIteration, 200, 1e-10)).unwrap();
        assert!(out.converged);
        assert!((out.solution.data()[0] - 2.0).abs() < 1e-9);
        assert_eq!(out.residual_trace.len(), out.iterations);
        for w in out.residual_trace.windows(2).skip(1) {
            assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn identity_converges_immediately() {
        let v0 = Tensor::full(&[3], 1.5);
        for kind in [SolverKind::ForwardIteration, SolverKind::Anderson] {
            let out = solve(|v: &Tensor| Ok(v.clone()), &v0, &cfg(kind, 10, 1e-12)).unwrap();
            assert!(out.converged);
            assert_eq!(out.iterations, 1);
            assert_eq!(out.residual_trace, vec![0.0]);
        }
    }

    #[test]
    fn anderson_solves_scalar_affine_exactly() {
        let c = SolverConfig {
            memory: 2,
            ridge: 0.0,
            ..cfg(SolverKind::Anderson, 10, 1e-14)
        };
        let out = anderson(scalar_affine, &Tensor::zeros(&[1]), &c).unwrap();
        assert!(out.converged, "{:?}", out.residual_trace);
        assert!(out.iterations <= 3);
        assert!((out.solution.data()[0] - 2.0).abs() <= f64::EPSILON * 2.0);
    }

    #[test]
    fn max_iter_without_convergence() {
        let out = forward_iterate(
            scalar_affine,
            &Tensor::zeros(&[1]),
            &cfg(SolverKind::ForwardIteration, 3, 0.0),
        )
        .unwrap();
        assert!(!out.converged);
        assert_eq!(out.iterations, 3);
        // solution is the third evaluated point: 0 -> 1 -> 1.5
        assert_eq!(out.solution.data(), &[1.5]);
    }

    #[test]
    fn divergence_is_reported_with_trace() {
        let blowup = |v: &Tensor| Ok(v.map(|x| x * 1e200 + 1.0));
        for kind in [SolverKind::ForwardIteration, SolverKind::Anderson] {
            match solve(blowup, &Tensor::zeros(&[2]), &cfg(kind, 50, 1e-10)) {
                Err(Error::Diverged { trace, iterations, .. }) => {
                    assert_eq!(trace.len(), iterations);
                    assert!(iterations >= 2);
                }
                other => panic!("expected divergence, got {other:?}"),
            }
        }
    }

    #[test]
    fn solvers_do_not_touch_the_initial_point() {
        let v0 = Tensor::full(&[4], 3.0);
        let snapshot = v0.clone();
        let _ = anderson(scalar_affine, &v0, &cfg(SolverKind::Anderson, 20, 1e-10)).unwrap();
        assert_eq!(v0, snapshot);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = cfg(SolverKind::Anderson, 10, 1e-6);
        for bad in [
            SolverConfig { max_iter: 0, ..base },
            SolverConfig { tol: -1.0, ..base },
            SolverConfig { memory: 0, ..base },
            SolverConfig { beta: 0.0, ..base },
            SolverConfig { beta: 1.5, ..base },
            SolverConfig { ridge: -1e-3, ..base },
        ] {
            assert!(anderson(scalar_affine, &Tensor::zeros(&[1]), &bad).is_err());
        }
    }

    #[test]
    fn rank_deficient_history_falls_back_cleanly() {
        // g constant: every residual after the first is identical, so the
        // Gram matrix is singular once two entries coincide.
        let target = Tensor::full(&[3], 7.0);
        let out = anderson(
            |_: &Tensor| Ok(target.clone()),
            &Tensor::zeros(&[3]),
            &cfg(SolverKind::Anderson, 10, 1e-12),
        )
        .unwrap();
        assert!(out.converged);
        assert_eq!(out.solution, target);
    }
}

//! Backward passes: implicit differentiation through the equilibrium and
//! ordinary reverse replay of the unrolled layers.

use std::time::Instant;

use crate::envs::PlanningSample;
use crate::error::{Error, Result};
use crate::ops;
use crate::planners::{
    self, head_param_names, mapper_param_names, policy_logits, reward_map, Bound, CoreTape, Differentiation,
    ModelParams, PlannerSpec,
};
use crate::solvers::{self, EquilibriumResult, SolverConfig, SolverKind};
use crate::tape::{finite_diff, Graph, Tape};
use crate::tensor::Tensor;

/// Cotangents flowing out of the Bellman core.
#[derive(Debug, Clone)]
pub struct CoreCotangents {
    pub reward: Tensor,
    pub params: Vec<(String, Tensor)>,
    /// Single-layer VJP applications performed.
    pub vjp_replays: usize,
    /// The linear solve for `w`; `None` for explicit replay.
    pub solve: Option<EquilibriumResult>,
}

/// Solves `wᵀ = wᵀ ∂f/∂v★ + ∂ℓ/∂v★` by fixed-point iteration starting at
/// `w = ∂ℓ/∂v★`, then reads parameter and reward cotangents off the VJP
/// seeded with the solved `w`.
///
/// Each solver evaluation is one replay of the taped step. The solver returns
/// the last point it evaluated, so the cotangents kept from that replay are
/// exactly `wᵀ ∂f/∂(·)` and no extra VJP is needed.
pub fn implicit_backward(core: &CoreTape, dl_dv: &Tensor, cfg: &SolverConfig) -> Result<CoreCotangents> {
    let before = core.tape.replays();
    let mut last = None;
    let solve = solvers::solve(
        |w: &Tensor| {
            let mut grads = core.tape.backward(core.output, w)?;
            let mut next = grads.take(core.state_in).unwrap_or_else(|| Tensor::zeros_like(dl_dv));
            next.axpy(1.0, dl_dv)?;
            last = Some(grads);
            Ok(next)
        },
        dl_dv,
        cfg,
    )?;
    let grads = last.expect("the solver evaluates at least once");
    let reward = grads.get_or_zeros(core.reward, core.tape.value_of(core.reward));
    let params = core
        .params
        .iter()
        .map(|(n, id)| (n.clone(), grads.get_or_zeros(*id, core.tape.value_of(*id))))
        .collect();
    Ok(CoreCotangents {
        reward,
        params,
        vjp_replays: core.tape.replays() - before,
        solve: Some(solve),
    })
}

/// One reverse sweep over all unrolled layers; tied parameters collect the
/// sum of their per-layer contributions.
pub fn explicit_backward(core: &CoreTape, dl_dv: &Tensor) -> Result<CoreCotangents> {
    let grads = core.tape.backward(core.output, dl_dv)?;
    let reward = grads.get_or_zeros(core.reward, core.tape.value_of(core.reward));
    let params = core
        .params
        .iter()
        .map(|(n, id)| (n.clone(), grads.get_or_zeros(*id, core.tape.value_of(*id))))
        .collect();
    Ok(CoreCotangents {
        reward,
        params,
        vjp_replays: core.step_outputs.iter().filter(|&&id| grads.reached(id)).count(),
        solve: None,
    })
}

#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    pub grads: ModelParams,
    pub forward: EquilibriumResult,
    pub backward: Option<EquilibriumResult>,
    pub vjp_replays: usize,
    /// Activation floats recorded for the Bellman core.
    pub stored_floats: usize,
    /// Channel-max cells at the final layer with a near tie.
    pub tied_cells: usize,
    pub fwd_time_s: f64,
    pub bwd_time_s: f64,
}

pub const TIE_TOL: f64 = 1e-12;

const ORACLE_TOL: f64 = 1e-14;
const ORACLE_MAX_ITER: usize = 2000;

/// Loss and full parameter gradient for one sample.
///
/// Mapper and head are ordinary taped graphs around the core; only the
/// Bellman layer is differentiated implicitly (or unrolled).
pub fn loss_and_gradient(spec: &PlannerSpec, params: &ModelParams, sample: &PlanningSample) -> Result<SampleGradient> {
    let obs = sample.grid.observation();
    planners::check_observation(spec, &obs)?;
    let t0 = Instant::now();

    let mut mapper_tape = Tape::new();
    let obs_id = mapper_tape.input(obs);
    let mapper = Bound::bind(&mut mapper_tape, params, &mapper_param_names())?;
    let r_id = reward_map(&mut mapper_tape, &obs_id, &mapper, spec.mapper_nonlinearity)?;
    let reward = mapper_tape.value_of(r_id).clone();

    let fp = planners::solve_core(spec, params, &reward)?;

    let mut head_tape = Tape::new();
    let v_id = head_tape.input(fp.equilibrium.solution.clone());
    let rh_id = head_tape.input(reward);
    let head = Bound::bind(&mut head_tape, params, &head_param_names(spec.kind))?;
    let logits = policy_logits(&mut head_tape, &v_id, &rh_id, &head, spec.kind)?;
    let loss_id = head_tape.cross_entropy(logits, &sample.expert_action)?;
    let loss = head_tape.value_of(loss_id).data()[0];
    let fwd_time_s = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let head_grads = head_tape.backward(loss_id, &Tensor::scalar(1.0))?;
    let dl_dv = head_grads.get_or_zeros(v_id, &fp.equilibrium.solution);
    let core_ct = match spec.differentiation {
        Differentiation::Implicit => implicit_backward(&fp.core, &dl_dv, &spec.backward)?,
        Differentiation::Explicit => explicit_backward(&fp.core, &dl_dv)?,
    };
    let mut dl_dr = core_ct.reward.clone();
    dl_dr.axpy(1.0, &head_grads.get_or_zeros(rh_id, &dl_dr))?;
    let mapper_grads = mapper_tape.backward(r_id, &dl_dr)?;

    let mut grads = params.zeros_like();
    for (name, id) in mapper.iter() {
        if let Some(g) = mapper_grads.get(*id) {
            grads.accumulate(name, 1.0, g)?;
        }
    }
    for (name, id) in head.iter() {
        if let Some(g) = head_grads.get(*id) {
            grads.accumulate(name, 1.0, g)?;
        }
    }
    for (name, g) in &core_ct.params {
        grads.accumulate(name, 1.0, g)?;
    }
    let bwd_time_s = t1.elapsed().as_secs_f64();
    if !grads.is_finite() {
        return Err(Error::NonFinite { op: "gradient" });
    }

    let last_layer = *fp.core.step_outputs.last().expect("at least one layer");
    let tied_cells = fp.core.tape.near_ties_at(last_layer, TIE_TOL);
    Ok(SampleGradient {
        loss,
        grads,
        stored_floats: fp.core.stored_floats(),
        forward: fp.equilibrium,
        backward: core_ct.solve,
        vjp_replays: core_ct.vjp_replays,
        tied_cells,
        fwd_time_s,
        bwd_time_s,
    })
}

/// Untaped loss at the planner's own forward pass.
pub fn loss_only(spec: &PlannerSpec, params: &ModelParams, sample: &PlanningSample) -> Result<f64> {
    let (logits, _) = planners::plan(spec, params, &sample.grid.observation())?;
    Ok(ops::masked_cross_entropy(&logits, &sample.expert_action)?.0)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    rel_err_floor(a, b, 1e-8)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`
pub fn rel_err_floor(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    let mut d = a.clone();
    d.axpy(-1.0, b).expect("compared tensors share a shape");
    d.norm() / a.norm().max(b.norm()).max(floor)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckTolerances {
    /// Forward and backward solver tolerance for the implicit gradient.
    pub solve_tol: f64,
    pub solve_max_iter: usize,
    pub explicit_k: usize,
    pub fd_step: f64,
    /// Bound on implicit-vs-explicit relative error.
    pub implicit_explicit: f64,
    /// Bound on either analytic gradient vs finite differences.
    pub finite_diff: f64,
    /// Gradient norm below which a tensor counts as zero: finite differences
    /// only resolve rounding noise there (about `ε·|loss|/h` per entry), and
    /// gradients that vanish at an exact equilibrium pick up the solver
    /// residual. All three errors are measured relative to at least this norm.
    pub grad_floor: f64,
}

impl Default for GradCheckTolerances {
    fn default() -> Self {
        Self {
            solve_tol: 1e-10,
            solve_max_iter: 500,
            explicit_k: 200,
            fd_step: 1e-5,
            implicit_explicit: 1e-4,
            finite_diff: 1e-3,
            grad_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub implicit_vs_explicit: f64,
    pub implicit_vs_fd: f64,
    pub explicit_vs_fd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerances: GradCheckTolerances,
    pub forward_converged: bool,
    /// Near-tie channel-max cells at the equilibrium; when non-zero the
    /// sample is excluded from pass/fail.
    pub tied_cells: usize,
}

impl GradCheckReport {
    pub fn excluded(&self) -> bool {
        self.tied_cells > 0
    }

    pub fn max_implicit_vs_explicit(&self) -> f64 {
        self.entries.iter().map(|e| e.implicit_vs_explicit).fold(0.0, f64::max)
    }

    pub fn max_vs_fd(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.implicit_vs_fd.max(e.explicit_vs_fd))
            .fold(0.0, f64::max)
    }

    /// Entries whose errors exceed the thresholds.
    pub fn flagged(&self) -> Vec<&GradCheckEntry> {
        self.entries
            .iter()
            .filter(|e| {
                !(e.implicit_vs_explicit < self.tolerances.implicit_explicit
                    && e.implicit_vs_fd < self.tolerances.finite_diff
                    && e.explicit_vs_fd < self.tolerances.finite_diff)
            })
            .collect()
    }

    pub fn passed(&self) -> bool {
        self.excluded() || self.flagged().is_empty()
    }
}

/// Compares implicit, explicit (`explicit_k` layers) and central-difference
/// gradients per parameter tensor.
///
/// The implicit pass uses `spec.forward` and `spec.backward` as given, so a
/// deliberately weak solver shows up as flagged entries. Finite differences
/// differentiate the loss at a tightly solved equilibrium.
pub fn grad_check(
    spec: &PlannerSpec,
    params: &ModelParams,
    sample: &PlanningSample,
    tol: &GradCheckTolerances,
) -> Result<GradCheckReport> {
    let mut imp = *spec;
    imp.differentiation = Differentiation::Implicit;
    let implicit = loss_and_gradient(&imp, params, sample)?;

    let mut exp = *spec;
    exp.differentiation = Differentiation::Explicit;
    exp.k_layer = tol.explicit_k;
    let explicit = loss_and_gradient(&exp, params, sample)?;

    // The difference quotient amplifies solver error by 1/h, so the oracle
    // solves well past the analytic tolerance.
    let mut oracle = imp;
    oracle.forward = SolverConfig {
        kind: SolverKind::Anderson,
        max_iter: ORACLE_MAX_ITER,
        tol: ORACLE_TOL,
        ..oracle.forward
    };
    let mut entries = Vec::new();
    for (name, t) in params.iter() {
        let mut probe = params.clone();
        let mut failure = None;
        let fd = finite_diff(
            |x| {
                *probe.get_mut(name).expect("name comes from params") = x.clone();
                loss_only(&oracle, &probe, sample).unwrap_or_else(|e| {
                    failure.get_or_insert(e);
                    f64::NAN
                })
            },
            t,
            tol.fd_step,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        let gi = implicit.grads.get(name)?;
        let ge = explicit.grads.get(name)?;
        entries.push(GradCheckEntry {
            name: name.to_string(),
            implicit_vs_explicit: rel_err_floor(gi, ge, tol.grad_floor),
            implicit_vs_fd: rel_err_floor(gi, &fd, tol.grad_floor),
            explicit_vs_fd: rel_err_floor(ge, &fd, tol.grad_floor),
        });
    }
    Ok(GradCheckReport {
        entries,
        tolerances: *tol,
        forward_converged: implicit.forward.converged,
        tied_cells: implicit.tied_cells,
    })
}

/// Spec with forward and backward solvers tightened for gradient checking.
pub fn tight_spec(spec: &PlannerSpec, tol: &GradCheckTolerances) -> PlannerSpec {
    let mut s = *spec;
    s.forward = SolverConfig {
        kind: SolverKind::Anderson,
        max_iter: tol.solve_max_iter,
        tol: tol.solve_tol,
        ..s.forward
    };
    s.backward = SolverConfig {
        kind: SolverKind::Anderson,
        max_iter: tol.solve_max_iter,
        tol: tol.solve_tol,
        ..s.backward
    };
    s
}

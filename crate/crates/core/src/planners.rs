//! Bellman-operator layers and the pieces around them.
//!
//! A planner maps an occupancy/goal observation to a reward map `R` (the
//! mapper), finds a value map `v★ = f(v★, R)` using either a solver
//! (implicit mode) or a fixed stack of `K` weight-tied layers (explicit mode),
//! and turns `v★` into per-cell action logits (the policy head).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::envs::MOVES;
use crate::error::{shape_err, Error, Result};
use crate::solvers::{self, EquilibriumResult, SolverConfig};
use crate::tape::{Eager, Graph, NodeId, Tape};
use crate::tensor::Tensor;

/// North, west, south, east.
pub const NUM_ACTIONS: usize = 4;

/// Observation channels: occupancy and goal indicator.
pub const OBS_CHANNELS: usize = 2;

/// Bound of the uniform initialisation for recurrent kernels.
pub const TRANSITION_INIT: f64 = 0.1;

/// Weight on the tap each VIN action initially reads its successor value
/// from, i.e. the discount of the initial transition model.
pub const TRANSITION_DISCOUNT: f64 = 0.9;

/// Uniform noise added to the initial VIN kernels. With `F = 3` the absolute
/// row sum stays below `0.9 + 9·0.01 < 1`, so the freshly initialised
/// Bellman layer is a contraction.
pub const TRANSITION_NOISE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlannerKind {
    Vin,
    ConvGppn,
}

impl PlannerKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Vin => "vin",
            Self::ConvGppn => "convgppn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vin" => Some(Self::Vin),
            "convgppn" | "gppn" => Some(Self::ConvGppn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Differentiation {
    Implicit,
    Explicit,
}

impl Differentiation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Implicit => "implicit",
            Self::Explicit => "explicit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "implicit" => Some(Self::Implicit),
            "explicit" => Some(Self::Explicit),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlannerSpec {
    pub kind: PlannerKind,
    pub differentiation: Differentiation,
    pub map_size: usize,
    /// Hidden channels of the reward mapper.
    pub channels: usize,
    pub kernel: usize,
    /// Latent value channels of the ConvGRU cell (VIN always uses one).
    pub latent: usize,
    /// ReLU between the two mapper convolutions.
    pub mapper_nonlinearity: bool,
    pub forward: SolverConfig,
    /// Number of unrolled layers in explicit mode.
    pub k_layer: usize,
    pub backward: SolverConfig,
}

impl PlannerSpec {
    pub fn new(kind: PlannerKind, differentiation: Differentiation, map_size: usize) -> Self {
        Self {
            kind,
            differentiation,
            map_size,
            channels: 40,
            kernel: 3,
            latent: 1,
            mapper_nonlinearity: false,
            forward: SolverConfig::forward_default(),
            k_layer: 30,
            backward: SolverConfig::backward_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.map_size < 3 {
            return Err(Error::Config(format!(
                "map size must be at least 3, got {}",
                self.map_size
            )));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("kernel size must be odd, got {}", self.kernel)));
        }
        if self.channels == 0 || self.latent == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if self.kind == PlannerKind::Vin && self.latent != 1 {
            return Err(Error::Config("VIN carries a single value channel".into()));
        }
        match self.differentiation {
            Differentiation::Explicit if self.k_layer == 0 => {
                Err(Error::Config("explicit mode needs k_layer >= 1".into()))
            }
            Differentiation::Explicit => Ok(()),
            Differentiation::Implicit => {
                self.forward.validate()?;
                self.backward.validate()
            }
        }
    }

    pub fn state_shape(&self) -> Vec<usize> {
        match self.kind {
            PlannerKind::Vin => vec![self.map_size, self.map_size],
            PlannerKind::ConvGppn => vec![self.latent, self.map_size, self.map_size],
        }
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter tensor `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros_like(v)))
                .collect(),
        }
    }

    /// `self[name] += alpha * g` for the named tensor.
    pub fn accumulate(&mut self, name: &str, alpha: f64, g: &Tensor) -> Result<()> {
        match self.tensors.get_mut(name) {
            Some(t) => t.axpy(alpha, g),
            None => Err(Error::Config(format!("no parameter `{name}` to accumulate into"))),
        }
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, alpha: f64, other: &ModelParams) -> Result<()> {
        for (name, g) in other.iter() {
            self.accumulate(name, alpha, g)?;
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }
}

const GATES: [&str; 3] = ["update", "reset", "candidate"];

fn gate_name(gate: &str, part: &str) -> String {
    format!("gru.{gate}.{part}")
}

/// Fresh parameters for `spec`, deterministic in `seed`.
///
/// Mapper tensors and the policy bias use the usual `1/√fan_in` uniform
/// bound and recurrent kernels use [`TRANSITION_INIT`]. VIN kernel `a`
/// starts as a discounted shift that reads the cell action `a` moves to,
/// plus noise: a uniformly random kernel carries no action-to-direction
/// assignment and gradient descent takes far longer than our epoch budgets
/// to find one. The policy weight starts as the identity so that logit `a`
/// reads `Q★[a]`. A random mixing matrix with unequal row sums turns the
/// offset shared by all Q-values of a cell, which grows with the value
/// scale, into large spurious logit differences.
pub fn init_params(spec: &PlannerSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, h, f, l) = (NUM_ACTIONS, spec.channels, spec.kernel, spec.latent);
    let fan = |n: usize| 1.0 / (n as f64).sqrt();
    let mut p = ModelParams::new();
    p.insert(
        "mapper.w1",
        Tensor::uniform(&[h, OBS_CHANNELS, f, f], fan(OBS_CHANNELS * f * f), &mut rng),
    );
    p.insert("mapper.b1", Tensor::uniform(&[h], fan(OBS_CHANNELS * f * f), &mut rng));
    p.insert("mapper.w2", Tensor::uniform(&[a, h, 1, 1], fan(h), &mut rng));
    p.insert("mapper.b2", Tensor::uniform(&[a], fan(h), &mut rng));
    match spec.kind {
        PlannerKind::Vin => {
            let mut w = Tensor::uniform(&[a, 1, f, f], TRANSITION_NOISE, &mut rng);
            let c = (f / 2) as isize;
            for (i, (dr, dc)) in MOVES.iter().enumerate() {
                let tap = ((c + dr) * f as isize + c + dc) as usize;
                w.data_mut()[i * f * f + tap] += TRANSITION_DISCOUNT;
            }
            p.insert("vi.trans_w", w);
        }
        PlannerKind::ConvGppn => {
            for gate in GATES {
                p.insert(
                    gate_name(gate, "w_v"),
                    Tensor::uniform(&[l, l, f, f], TRANSITION_INIT, &mut rng),
                );
                p.insert(
                    gate_name(gate, "w_r"),
                    Tensor::uniform(&[l, a, f, f], TRANSITION_INIT, &mut rng),
                );
                p.insert(gate_name(gate, "b"), Tensor::uniform(&[l], TRANSITION_INIT, &mut rng));
            }
            p.insert("head.trans_w", Tensor::uniform(&[a, l, f, f], fan(l * f * f), &mut rng));
        }
    }
    let mut policy_w = Tensor::zeros(&[a, a, 1, 1]);
    for i in 0..a {
        policy_w.data_mut()[i * a + i] = 1.0;
    }
    p.insert("head.policy_w", policy_w);
    p.insert("head.policy_b", Tensor::uniform(&[a], fan(a), &mut rng));
    Ok(p)
}

/// Parameter names consumed by the mapper, the Bellman layer and the head.
pub fn mapper_param_names() -> [&'static str; 4] {
    ["mapper.w1", "mapper.b1", "mapper.w2", "mapper.b2"]
}

pub fn core_param_names(kind: PlannerKind) -> Vec<String> {
    match kind {
        PlannerKind::Vin => vec!["vi.trans_w".to_string()],
        PlannerKind::ConvGppn => GATES
            .iter()
            .flat_map(|g| ["w_v", "w_r", "b"].map(|part| gate_name(g, part)))
            .collect(),
    }
}

pub fn head_param_names(kind: PlannerKind) -> [&'static str; 3] {
    match kind {
        PlannerKind::Vin => ["vi.trans_w", "head.policy_w", "head.policy_b"],
        PlannerKind::ConvGppn => ["head.trans_w", "head.policy_w", "head.policy_b"],
    }
}

/// Graph handles for a set of parameter tensors, keyed by name.
#[derive(Debug, Clone)]
pub struct Bound<V> {
    vars: Vec<(String, V)>,
}

impl<V: Clone> Bound<V> {
    pub fn bind<G: Graph<Var = V>, S: AsRef<str>>(g: &mut G, params: &ModelParams, names: &[S]) -> Result<Self> {
        let vars = names
            .iter()
            .map(|n| Ok((n.as_ref().to_string(), g.input(params.get(n.as_ref())?.clone()))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { vars })
    }

    pub fn var(&self, name: &str) -> &V {
        &self
            .vars
            .iter()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
            .1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &V)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }
}

/// `R = W₂ ⋆ (W₁ ⋆ obs + b₁) + b₂`, optionally with a ReLU in between.
pub fn reward_map<G: Graph>(g: &mut G, obs: &G::Var, mapper: &Bound<G::Var>, nonlinearity: bool) -> Result<G::Var> {
    let hidden = g.conv2d(obs, mapper.var("mapper.w1"), Some(mapper.var("mapper.b1")))?;
    let hidden = if nonlinearity { g.relu(&hidden) } else { hidden };
    g.conv2d(&hidden, mapper.var("mapper.w2"), Some(mapper.var("mapper.b2")))
}

/// `f(V, R) = max_a (R[a] + W_a ⋆ V)`
pub fn vin_step<G: Graph>(g: &mut G, v: &G::Var, r: &G::Var, trans_w: &G::Var) -> Result<G::Var> {
    let propagated = g.conv2d(v, trans_w, None)?;
    let q = g.add(r, &propagated)?;
    g.channel_max(&q)
}

/// Reward terms `W_r ⋆ R + b` of the three gates. They do not depend on `V`,
/// so solvers compute them once per problem.
pub fn convgru_injection<G: Graph>(g: &mut G, r: &G::Var, core: &Bound<G::Var>) -> Result<[G::Var; 3]> {
    let mut out = Vec::with_capacity(3);
    for gate in GATES {
        out.push(g.conv2d(
            r,
            core.var(&gate_name(gate, "w_r")),
            Some(core.var(&gate_name(gate, "b"))),
        )?);
    }
    Ok(out.try_into().unwrap_or_else(|_| unreachable!()))
}

/// ConvGRU update given precomputed reward injections.
pub fn convgru_recurrence<G: Graph>(
    g: &mut G,
    v: &G::Var,
    injection: &[G::Var; 3],
    core: &Bound<G::Var>,
) -> Result<G::Var> {
    let [inj_z, inj_r, inj_c] = injection;
    let z = g.conv2d(v, core.var("gru.update.w_v"), None)?;
    let z = g.add(&z, inj_z)?;
    let z = g.sigmoid(&z);
    let reset = g.conv2d(v, core.var("gru.reset.w_v"), None)?;
    let reset = g.add(&reset, inj_r)?;
    let reset = g.sigmoid(&reset);
    let gated = g.mul(&reset, v)?;
    let cand = g.conv2d(&gated, core.var("gru.candidate.w_v"), None)?;
    let cand = g.add(&cand, inj_c)?;
    let cand = g.tanh(&cand);
    // (1 − z)⊙V + z⊙Ṽ  ==  V + z⊙(Ṽ − V)
    let delta = g.sub(&cand, v)?;
    let delta = g.mul(&z, &delta)?;
    g.add(v, &delta)
}

/// One ConvGRU layer `f(V, R)`.
pub fn convgru_step<G: Graph>(g: &mut G, v: &G::Var, r: &G::Var, core: &Bound<G::Var>) -> Result<G::Var> {
    let injection = convgru_injection(g, r, core)?;
    convgru_recurrence(g, v, &injection, core)
}

/// `Q★[a] = R[a] + W_a ⋆ v★`, then a 1×1 convolution to logits.
pub fn policy_logits<G: Graph>(
    g: &mut G,
    v_star: &G::Var,
    r: &G::Var,
    head: &Bound<G::Var>,
    kind: PlannerKind,
) -> Result<G::Var> {
    let [trans, pw, pb] = head_param_names(kind);
    let propagated = g.conv2d(v_star, head.var(trans), None)?;
    let q = g.add(r, &propagated)?;
    g.conv2d(&q, head.var(pw), Some(head.var(pb)))
}

/// A Bellman layer prepared for repeated application to one reward map.
enum PreparedCore<V> {
    Vin { r: V, trans_w: V },
    Gru { injection: [V; 3], core: Bound<V> },
}

impl<V: Clone> PreparedCore<V> {
    fn prepare<G: Graph<Var = V>>(g: &mut G, kind: PlannerKind, r: &V, core: Bound<V>) -> Result<Self> {
        Ok(match kind {
            PlannerKind::Vin => Self::Vin {
                r: r.clone(),
                trans_w: core.var("vi.trans_w").clone(),
            },
            PlannerKind::ConvGppn => Self::Gru {
                injection: convgru_injection(g, r, &core)?,
                core,
            },
        })
    }

    fn apply<G: Graph<Var = V>>(&self, g: &mut G, v: &V) -> Result<V> {
        match self {
            Self::Vin { r, trans_w } => vin_step(g, v, r, trans_w),
            Self::Gru { injection, core } => convgru_recurrence(g, v, injection, core),
        }
    }
}

/// The recorded Bellman layer(s) of one forward pass.
///
/// In implicit mode the tape holds a single application at the equilibrium
/// (`state_in` is the `v★` leaf); in explicit mode it holds all `K` unrolled
/// layers starting from the zero state.
#[derive(Debug)]
pub struct CoreTape {
    pub tape: Tape,
    pub state_in: NodeId,
    pub reward: NodeId,
    pub params: Vec<(String, NodeId)>,
    pub output: NodeId,
    pub step_outputs: Vec<NodeId>,
}

impl CoreTape {
    pub fn stored_floats(&self) -> usize {
        self.tape.stored_floats()
    }
}

#[derive(Debug)]
pub struct ForwardPass {
    pub equilibrium: EquilibriumResult,
    pub reward: Tensor,
    pub core: CoreTape,
}

pub fn check_observation(spec: &PlannerSpec, obs: &Tensor) -> Result<()> {
    let m = spec.map_size;
    if obs.shape() != [OBS_CHANNELS, m, m] {
        return Err(shape_err(
            "observation",
            format!("expected [{OBS_CHANNELS}, {m}, {m}], got {:?}", obs.shape()),
        ));
    }
    Ok(())
}

/// Untaped reward map.
pub fn compute_reward(spec: &PlannerSpec, params: &ModelParams, obs: &Tensor) -> Result<Tensor> {
    check_observation(spec, obs)?;
    let mut g = Eager;
    let mapper = Bound::bind(&mut g, params, &mapper_param_names())?;
    reward_map(&mut g, obs, &mapper, spec.mapper_nonlinearity)
}

/// Solves (implicit) or unrolls (explicit) the Bellman layer for a given
/// reward map and records what the backward pass needs.
pub fn solve_core(spec: &PlannerSpec, params: &ModelParams, reward: &Tensor) -> Result<ForwardPass> {
    let names = core_param_names(spec.kind);
    let v0 = Tensor::zeros(&spec.state_shape());
    match spec.differentiation {
        Differentiation::Implicit => {
            let mut eager = Eager;
            let bound = Bound::bind(&mut eager, params, &names)?;
            let layer = PreparedCore::prepare(&mut eager, spec.kind, reward, bound)?;
            let equilibrium = solvers::solve(|v: &Tensor| layer.apply(&mut Eager, v), &v0, &spec.forward)?;

            let mut tape = Tape::new();
            let state_in = tape.leaf(equilibrium.solution.clone());
            let r = tape.leaf(reward.clone());
            let bound = Bound::bind(&mut tape, params, &names)?;
            let param_ids = bound.iter().map(|(n, id)| (n.to_string(), *id)).collect();
            let layer = PreparedCore::prepare(&mut tape, spec.kind, &r, bound)?;
            let output = layer.apply(&mut tape, &state_in)?;
            Ok(ForwardPass {
                equilibrium,
                reward: reward.clone(),
                core: CoreTape {
                    tape,
                    state_in,
                    reward: r,
                    params: param_ids,
                    output,
                    step_outputs: vec![output],
                },
            })
        }
        Differentiation::Explicit => {
            let mut tape = Tape::new();
            let state_in = tape.leaf(v0);
            let r = tape.leaf(reward.clone());
            let bound = Bound::bind(&mut tape, params, &names)?;
            let param_ids = bound.iter().map(|(n, id)| (n.to_string(), *id)).collect();
            let layer = PreparedCore::prepare(&mut tape, spec.kind, &r, bound)?;
            let mut v = state_in;
            let mut trace = Vec::with_capacity(spec.k_layer);
            let mut step_outputs = Vec::with_capacity(spec.k_layer);
            for _ in 0..spec.k_layer {
                let next = layer.apply(&mut tape, &v)?;
                let res = solvers::relative_residual(tape.value_of(v), tape.value_of(next))?;
                trace.push(res);
                if !tape.value_of(next).is_finite() || !res.is_finite() {
                    return Err(Error::Diverged {
                        iterations: trace.len(),
                        last_residual: res,
                        trace,
                    });
                }
                step_outputs.push(next);
                v = next;
            }
            let converged = trace.last().is_some_and(|&r| r <= spec.forward.tol);
            let equilibrium = EquilibriumResult {
                solution: tape.value_of(v).clone(),
                iterations: trace.len(),
                residual_trace: trace,
                converged,
            };
            Ok(ForwardPass {
                equilibrium,
                reward: reward.clone(),
                core: CoreTape {
                    tape,
                    state_in,
                    reward: r,
                    params: param_ids,
                    output: v,
                    step_outputs,
                },
            })
        }
    }
}

/// Full forward pass from an observation.
pub fn solve_forward(spec: &PlannerSpec, params: &ModelParams, obs: &Tensor) -> Result<ForwardPass> {
    let reward = compute_reward(spec, params, obs)?;
    solve_core(spec, params, &reward)
}

/// Untaped inference: action logits and the equilibrium they came from.
///
/// Implicit planners use their forward solver; explicit planners run their
/// `K` layers.
pub fn plan(spec: &PlannerSpec, params: &ModelParams, obs: &Tensor) -> Result<(Tensor, EquilibriumResult)> {
    let reward = compute_reward(spec, params, obs)?;
    let mut g = Eager;
    let names = core_param_names(spec.kind);
    let bound = Bound::bind(&mut g, params, &names)?;
    let layer = PreparedCore::prepare(&mut g, spec.kind, &reward, bound)?;
    let v0 = Tensor::zeros(&spec.state_shape());
    let equilibrium = match spec.differentiation {
        Differentiation::Implicit => solvers::solve(|v: &Tensor| layer.apply(&mut Eager, v), &v0, &spec.forward)?,
        Differentiation::Explicit => {
            let cfg = SolverConfig {
                kind: solvers::SolverKind::ForwardIteration,
                max_iter: spec.k_layer + 1,
                tol: 0.0,
                ..spec.forward
            };
            // K layers: evaluate K+1 times so the returned point is v_K.
            let mut eq = solvers::forward_iterate(|v: &Tensor| layer.apply(&mut Eager, v), &v0, &cfg)?;
            eq.residual_trace.truncate(spec.k_layer);
            eq.iterations = spec.k_layer;
            eq.converged = eq.residual_trace.last().is_some_and(|&r| r <= spec.forward.tol);
            eq
        }
    };
    let head = Bound::bind(&mut g, params, &head_param_names(spec.kind))?;
    let logits = policy_logits(&mut g, &equilibrium.solution, &reward, &head, spec.kind)?;
    Ok((logits, equilibrium))
}

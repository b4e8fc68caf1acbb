//! Forward/backward cost of implicit versus unrolled planners as a function
//! of iteration count and map size.

use std::fmt::Write as _;

use crate::envs::PlanningSample;
use crate::error::{Error, Result};
use crate::gradients::loss_and_gradient;
use crate::planners::{init_params, Differentiation, PlannerKind, PlannerSpec};
use crate::solvers::{SolverConfig, SolverKind};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchCase {
    pub kind: PlannerKind,
    pub mode: Differentiation,
    pub m: usize,
    /// Forward iterations (implicit) or unrolled layers (explicit).
    pub k: usize,
    pub k_bwd: usize,
    /// Solver tolerance; zero pins the iteration counts to `k` and `k_bwd`.
    pub tol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub case: BenchCase,
    /// Median seconds per forward pass over the sample batch.
    pub fwd_s: f64,
    pub bwd_s: f64,
    pub stored_floats: usize,
    pub vjp_replays: usize,
    pub diverged: bool,
    pub reps: usize,
}

pub const BENCH_HEADER: &str = "planner,mode,m,K,K_bwd,fwd_s,bwd_s,stored_floats,diverged,reps";

pub const MIN_REPS: usize = 5;

impl BenchCase {
    pub fn spec(&self) -> PlannerSpec {
        let mut spec = PlannerSpec::new(self.kind, self.mode, self.m);
        spec.forward = SolverConfig {
            kind: SolverKind::ForwardIteration,
            max_iter: self.k,
            tol: self.tol,
            ..spec.forward
        };
        spec.k_layer = self.k;
        spec.backward = SolverConfig {
            kind: SolverKind::Anderson,
            max_iter: self.k_bwd,
            tol: self.tol,
            ..spec.backward
        };
        spec
    }
}

struct Measurement {
    fwd_s: f64,
    bwd_s: f64,
    stored_floats: usize,
    vjp_replays: usize,
}

fn measure(spec: &PlannerSpec, seed: u64, samples: &[PlanningSample]) -> Result<Measurement> {
    let params = init_params(spec, seed)?;
    let mut out = Measurement {
        fwd_s: 0.0,
        bwd_s: 0.0,
        stored_floats: 0,
        vjp_replays: 0,
    };
    for s in samples {
        let g = loss_and_gradient(spec, &params, s)?;
        out.fwd_s += g.fwd_time_s;
        out.bwd_s += g.bwd_time_s;
        out.stored_floats = out.stored_floats.max(g.stored_floats);
        out.vjp_replays = out.vjp_replays.max(g.vjp_replays);
    }
    Ok(out)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        0.0
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times every case on the same samples, single-threaded.
///
/// Repetitions are interleaved across cases after one discarded warm-up
/// round, so slow drift in machine load affects all cases alike. Divergence
/// is recorded in the row rather than returned.
pub fn run_scaling_benchmark(
    cases: &[BenchCase],
    samples_for: impl Fn(usize) -> Vec<PlanningSample>,
    reps: usize,
    seed: u64,
) -> Result<Vec<BenchmarkRecord>> {
    if reps < MIN_REPS {
        return Err(Error::Config(format!(
            "benchmarks need at least {MIN_REPS} repetitions, got {reps}"
        )));
    }
    let mut sizes: Vec<usize> = cases.iter().map(|c| c.m).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let data: Vec<(usize, Vec<PlanningSample>)> = sizes.iter().map(|&m| (m, samples_for(m))).collect();
    let samples = |m: usize| &data.iter().find(|(s, _)| *s == m).expect("size collected above").1;

    let mut fwd = vec![Vec::with_capacity(reps); cases.len()];
    let mut bwd = vec![Vec::with_capacity(reps); cases.len()];
    let mut floats = vec![0; cases.len()];
    let mut replays = vec![0; cases.len()];
    let mut diverged = vec![false; cases.len()];
    for round in 0..=reps {
        for (i, case) in cases.iter().enumerate() {
            if diverged[i] {
                continue;
            }
            let spec = case.spec();
            spec.validate()?;
            match measure(&spec, seed, samples(case.m)) {
                Ok(meas) => {
                    floats[i] = meas.stored_floats;
                    replays[i] = meas.vjp_replays;
                    if round > 0 {
                        fwd[i].push(meas.fwd_s);
                        bwd[i].push(meas.bwd_s);
                    }
                }
                Err(Error::Diverged { .. } | Error::NonFinite { .. }) => diverged[i] = true,
                Err(e) => return Err(e),
            }
        }
    }
    Ok(cases
        .iter()
        .enumerate()
        .map(|(i, &case)| BenchmarkRecord {
            case,
            fwd_s: median(std::mem::take(&mut fwd[i])),
            bwd_s: median(std::mem::take(&mut bwd[i])),
            stored_floats: floats[i],
            vjp_replays: replays[i],
            diverged: diverged[i],
            reps,
        })
        .collect())
}

pub fn bench_csv(records: &[BenchmarkRecord]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in records {
        let c = &r.case;
        let k_bwd = match c.mode {
            Differentiation::Implicit => c.k_bwd,
            Differentiation::Explicit => 0,
        };
        writeln!(
            out,
            "{},{},{},{},{},{:.6},{:.6},{},{},{}",
            c.kind.name(),
            c.mode.name(),
            c.m,
            c.k,
            k_bwd,
            r.fwd_s,
            r.bwd_s,
            r.stored_floats,
            r.diverged,
            r.reps
        )
        .expect("writing to a String cannot fail");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::{bfs_expert, generate_maze};

    fn samples(m: usize) -> Vec<PlanningSample> {
        (0..2).map(|s| bfs_expert(&generate_maze(m, s, 0.3).unwrap())).collect()
    }

    fn case(mode: Differentiation, k: usize) -> BenchCase {
        BenchCase {
            kind: PlannerKind::Vin,
            mode,
            m: 9,
            k,
            k_bwd: 6,
            tol: 0.0,
        }
    }

    #[test]
    fn memory_accounting() {
        let cases: Vec<_> = [Differentiation::Implicit, Differentiation::Explicit]
            .into_iter()
            .flat_map(|mode| [4, 8, 16].map(|k| case(mode, k)))
            .collect();
        let recs = run_scaling_benchmark(&cases, samples, 5, 0).unwrap();
        let (imp, exp) = recs.split_at(3);
        assert!(imp
            .iter()
            .all(|r| r.stored_floats == imp[0].stored_floats && r.vjp_replays == 6));
        let per_layer = exp[0].stored_floats / 4;
        for r in exp {
            assert_eq!(r.stored_floats, per_layer * r.case.k);
            assert_eq!(r.vjp_replays, r.case.k);
        }
        assert_eq!(imp[0].stored_floats, per_layer);
        assert!(recs.iter().all(|r| r.fwd_s >= 0.0 && r.bwd_s >= 0.0 && !r.diverged));

        let csv = bench_csv(&recs);
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], BENCH_HEADER);
        assert_eq!(lines.len(), 7);
        assert!(lines[1].starts_with("vin,implicit,9,4,6,"));
        assert!(lines[4].starts_with("vin,explicit,9,4,0,"));
    }

    #[test]
    fn too_few_reps() {
        assert!(run_scaling_benchmark(&[case(Differentiation::Implicit, 3)], samples, 2, 0).is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

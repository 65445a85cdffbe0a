//! Exact baselines: the disjunctive big-M MILP (as an LP-format export for
//! external solvers) and an in-repo branch-and-bound over the environment's
//! own sequencing tree.
//!
//! The branch-and-bound explores non-delay schedules, the same class the
//! decision process generates, so its "optimal" flag means optimal within
//! that class; the exported MILP is the unrestricted formulation.

use crate::env::{self, ScheduleRecord, SchedulingState};
use crate::instances::Instance;
use std::fmt::Write as _;
use std::time::{Duration, Instant};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExactError {
    #[error("brute force refuses instances with more than {limit} tasks (got {tasks})")]
    TooLarge { tasks: usize, limit: usize },
}

/// Hard cap for the exhaustive oracle.
pub const BRUTE_FORCE_TASK_LIMIT: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    /// Operation start time, continuous >= 0.
    Start { job: usize, machine: usize },
    /// 1 when `first_job` precedes `second_job` on `machine`.
    Order {
        first_job: usize,
        second_job: usize,
        machine: usize,
    },
    /// The makespan objective variable.
    Makespan,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpVar {
    pub name: String,
    pub kind: VarKind,
}

/// One `sum(coeff * var) >= rhs` row.
#[derive(Debug, Clone, PartialEq)]
pub struct LpConstraint {
    pub name: String,
    pub terms: Vec<(f64, usize)>,
    pub rhs: f64,
}

/// The disjunctive big-M formulation of an instance.
#[derive(Debug, Clone, PartialEq)]
pub struct MilpModel {
    pub variables: Vec<LpVar>,
    pub constraints: Vec<LpConstraint>,
    pub objective_var: usize,
    pub big_m: u64,
}

impl MilpModel {
    pub fn num_binary_vars(&self) -> usize {
        self.variables
            .iter()
            .filter(|v| matches!(v.kind, VarKind::Order { .. }))
            .count()
    }
}

/// Builds the MILP: per-job precedence rows, paired big-M disjunctions for
/// every job pair sharing a machine, and one makespan row per operation.
/// Big-M is exactly the total processing time.
pub fn build_milp(instance: &Instance) -> MilpModel {
    let big_m = instance.total_processing_time();
    let mut variables = Vec::new();
    let mut constraints = Vec::new();

    // Start-time variables, indexed per (job, machine) operation.
    let mut start_var = vec![vec![usize::MAX; instance.num_machines()]; instance.num_jobs()];
    for (j, job) in instance.jobs().iter().enumerate() {
        for task in job {
            start_var[j][task.machine] = variables.len();
            variables.push(LpVar {
                name: format!("t_{}_{}", j, task.machine),
                kind: VarKind::Start {
                    job: j,
                    machine: task.machine,
                },
            });
        }
    }
    let objective_var = variables.len();
    variables.push(LpVar {
        name: "Cmax".to_string(),
        kind: VarKind::Makespan,
    });

    // Precedence: t_jh - t_jk >= p_jk for consecutive tasks of a job.
    for (j, job) in instance.jobs().iter().enumerate() {
        for pair in job.windows(2) {
            let (prev, next) = (pair[0], pair[1]);
            constraints.push(LpConstraint {
                name: format!("prec_{}_{}_{}", j, prev.machine, next.machine),
                terms: vec![
                    (1.0, start_var[j][next.machine]),
                    (-1.0, start_var[j][prev.machine]),
                ],
                rhs: prev.processing_time as f64,
            });
        }
    }

    // Disjunctive pairs per machine, one binary per unordered pair j < i:
    //   t_jk - t_ik >= p_ik - M x_jik
    //   t_ik - t_jk >= p_jk - M (1 - x_jik)
    #[allow(clippy::needless_range_loop)]
    for k in 0..instance.num_machines() {
        let sharing: Vec<(usize, u64)> = instance
            .jobs()
            .iter()
            .enumerate()
            .filter_map(|(j, job)| {
                job.iter()
                    .find(|t| t.machine == k)
                    .map(|t| (j, t.processing_time))
            })
            .collect();
        for a in 0..sharing.len() {
            for b in (a + 1)..sharing.len() {
                let (j, p_j) = sharing[a];
                let (i, p_i) = sharing[b];
                let x = variables.len();
                variables.push(LpVar {
                    name: format!("x_{}_{}_{}", j, i, k),
                    kind: VarKind::Order {
                        first_job: j,
                        second_job: i,
                        machine: k,
                    },
                });
                constraints.push(LpConstraint {
                    name: format!("disj_a_{}_{}_{}", j, i, k),
                    terms: vec![
                        (1.0, start_var[j][k]),
                        (-1.0, start_var[i][k]),
                        (big_m as f64, x),
                    ],
                    rhs: p_i as f64,
                });
                constraints.push(LpConstraint {
                    name: format!("disj_b_{}_{}_{}", j, i, k),
                    terms: vec![
                        (1.0, start_var[i][k]),
                        (-1.0, start_var[j][k]),
                        (-(big_m as f64), x),
                    ],
                    rhs: p_j as f64 - big_m as f64,
                });
            }
        }
    }

    // Makespan rows: Cmax - t_jk >= p_jk for every operation.
    for (j, job) in instance.jobs().iter().enumerate() {
        for task in job {
            constraints.push(LpConstraint {
                name: format!("mk_{}_{}", j, task.machine),
                terms: vec![(1.0, objective_var), (-1.0, start_var[j][task.machine])],
                rhs: task.processing_time as f64,
            });
        }
    }

    MilpModel {
        variables,
        constraints,
        objective_var,
        big_m,
    }
}

fn format_coefficient(out: &mut String, coeff: f64, name: &str, first: bool) {
    if first {
        if coeff == 1.0 {
            let _ = write!(out, "{name}");
        } else if coeff == -1.0 {
            let _ = write!(out, "- {name}");
        } else {
            let _ = write!(out, "{coeff} {name}");
        }
    } else if coeff >= 0.0 {
        if coeff == 1.0 {
            let _ = write!(out, " + {name}");
        } else {
            let _ = write!(out, " + {coeff} {name}");
        }
    } else if coeff == -1.0 {
        let _ = write!(out, " - {name}");
    } else {
        let _ = write!(out, " - {} {name}", -coeff);
    }
}

/// Serializes the model in CPLEX LP text format. Start variables keep the
/// LP default bounds (>= 0); order variables go in the Binary section.
pub fn export_lp(model: &MilpModel) -> String {
    let mut out = String::new();
    out.push_str("Minimize\n");
    let _ = writeln!(out, " obj: {}", model.variables[model.objective_var].name);
    out.push_str("Subject To\n");
    for c in &model.constraints {
        let _ = write!(out, " {}: ", c.name);
        for (i, &(coeff, var)) in c.terms.iter().enumerate() {
            format_coefficient(&mut out, coeff, &model.variables[var].name, i == 0);
        }
        let _ = writeln!(out, " >= {}", c.rhs);
    }
    let binaries: Vec<&str> = model
        .variables
        .iter()
        .filter(|v| matches!(v.kind, VarKind::Order { .. }))
        .map(|v| v.name.as_str())
        .collect();
    if !binaries.is_empty() {
        out.push_str("Binary\n");
        for name in binaries {
            let _ = writeln!(out, " {name}");
        }
    }
    out.push_str("End\n");
    out
}

/// Search options for [`branch_and_bound`].
#[derive(Debug, Clone, Copy, Default)]
pub struct BnbOptions {
    pub time_limit: Option<Duration>,
    /// Stop as soon as the incumbent is at or below this value.
    pub target: Option<u64>,
}

/// Search outcome. `optimal` is true only when the tree was exhausted, and
/// means optimal within the non-delay schedule class.
#[derive(Debug, Clone)]
pub struct BnbResult {
    pub makespan: u64,
    pub schedule: Vec<ScheduleRecord>,
    pub optimal: bool,
    pub nodes: u64,
    /// (elapsed, incumbent) at every improvement, for time-to-quality
    /// queries.
    pub incumbent_trace: Vec<(Duration, u64)>,
}

struct SearchContext<'a> {
    instance: &'a Instance,
    options: BnbOptions,
    started: Instant,
    nodes: u64,
    best_makespan: u64,
    best_schedule: Vec<ScheduleRecord>,
    trace: Vec<(Duration, u64)>,
    aborted: bool,
}

/// Remaining work per machine and per job, maintained incrementally for the
/// lower bound.
#[derive(Clone)]
struct Remaining {
    per_machine: Vec<u64>,
    per_job: Vec<u64>,
}

impl Remaining {
    fn full(instance: &Instance) -> Self {
        let mut per_machine = vec![0u64; instance.num_machines()];
        let mut per_job = vec![0u64; instance.num_jobs()];
        for (j, job) in instance.jobs().iter().enumerate() {
            for task in job {
                per_machine[task.machine] += task.processing_time;
                per_job[j] += task.processing_time;
            }
        }
        Self {
            per_machine,
            per_job,
        }
    }
}

fn lower_bound(state: &SchedulingState, remaining: &Remaining) -> u64 {
    let mut bound = state.makespan();
    for (k, &work) in remaining.per_machine.iter().enumerate() {
        if work > 0 {
            bound = bound.max(state.machine_ready(k) + work);
        }
    }
    for (j, &work) in remaining.per_job.iter().enumerate() {
        if work > 0 {
            bound = bound.max(state.job_ready(j) + work);
        }
    }
    bound
}

/// Greedy shortest-processing-time rollout for the initial incumbent.
fn spt_rollout(instance: &Instance) -> (u64, Vec<ScheduleRecord>) {
    let mut state = env::reset(instance);
    while !state.is_done() {
        let m = env::mask(instance, &state);
        let action = m
            .allowed
            .iter()
            .enumerate()
            .filter(|(_, &a)| a)
            .map(|(j, _)| j)
            .min_by_key(|&j| (state.remaining_tasks(instance, j)[0].processing_time, j))
            .expect("non-terminal state has allowed actions");
        state = env::step(instance, &state, action)
            .expect("mask guarantees the action")
            .next_state;
    }
    (state.makespan(), state.scheduled().to_vec())
}

fn search(ctx: &mut SearchContext<'_>, state: &SchedulingState, remaining: &Remaining) {
    if ctx.aborted {
        return;
    }
    ctx.nodes += 1;
    if ctx.nodes.is_multiple_of(1024) {
        if let Some(limit) = ctx.options.time_limit {
            if ctx.started.elapsed() >= limit {
                ctx.aborted = true;
                return;
            }
        }
    }
    if let Some(target) = ctx.options.target {
        if ctx.best_makespan <= target {
            ctx.aborted = true;
            return;
        }
    }

    if state.is_done() {
        if state.makespan() < ctx.best_makespan {
            ctx.best_makespan = state.makespan();
            ctx.best_schedule = state.scheduled().to_vec();
            ctx.trace.push((ctx.started.elapsed(), ctx.best_makespan));
        }
        return;
    }
    if lower_bound(state, remaining) >= ctx.best_makespan {
        return;
    }

    // Branch order: ascending earliest start, then ascending job index.
    let m = env::mask(ctx.instance, state);
    let mut children: Vec<(u64, usize)> = m
        .allowed
        .iter()
        .enumerate()
        .filter(|(_, &a)| a)
        .map(|(j, _)| {
            (
                env::earliest_start(ctx.instance, state, j).expect("allowed"),
                j,
            )
        })
        .collect();
    children.sort_unstable();

    for (_, job) in children {
        let task = state.remaining_tasks(ctx.instance, job)[0];
        let next = env::step(ctx.instance, state, job)
            .expect("mask guarantees the action")
            .next_state;
        let mut next_remaining = remaining.clone();
        next_remaining.per_machine[task.machine] -= task.processing_time;
        next_remaining.per_job[job] -= task.processing_time;
        search(ctx, &next, &next_remaining);
        if ctx.aborted {
            return;
        }
    }
}

/// Depth-first branch-and-bound over the sequencing tree, lower-bounded by
/// machine and job workload frontiers, seeded with an SPT incumbent.
pub fn branch_and_bound(instance: &Instance, options: BnbOptions) -> BnbResult {
    let started = Instant::now();
    let (spt_makespan, spt_schedule) = spt_rollout(instance);
    let mut ctx = SearchContext {
        instance,
        options,
        started,
        nodes: 0,
        best_makespan: spt_makespan,
        best_schedule: spt_schedule,
        trace: vec![(started.elapsed(), spt_makespan)],
        aborted: false,
    };
    // An up-front target hit skips the search entirely; optimality is then
    // unproven even though nothing aborted.
    let target_met_immediately = options.target.is_some_and(|t| ctx.best_makespan <= t);
    if !target_met_immediately {
        let state = env::reset(instance);
        let remaining = Remaining::full(instance);
        search(&mut ctx, &state, &remaining);
    }
    BnbResult {
        makespan: ctx.best_makespan,
        schedule: ctx.best_schedule,
        optimal: !target_met_immediately && !ctx.aborted,
        nodes: ctx.nodes,
        incumbent_trace: ctx.trace,
    }
}

/// Exhaustive minimum over every topologically valid action sequence.
/// Exact for the non-delay schedule class; guarded by
/// [`BRUTE_FORCE_TASK_LIMIT`].
pub fn brute_force(instance: &Instance) -> Result<u64, ExactError> {
    let tasks = instance.task_count();
    if tasks > BRUTE_FORCE_TASK_LIMIT {
        return Err(ExactError::TooLarge {
            tasks,
            limit: BRUTE_FORCE_TASK_LIMIT,
        });
    }
    fn recurse(instance: &Instance, state: &SchedulingState, best: &mut u64) {
        if state.is_done() {
            *best = (*best).min(state.makespan());
            return;
        }
        for (j, &allowed) in env::mask(instance, state).allowed.iter().enumerate() {
            if allowed {
                let next = env::step(instance, state, j).expect("allowed").next_state;
                recurse(instance, &next, best);
            }
        }
    }
    let mut best = u64::MAX;
    recurse(instance, &env::reset(instance), &mut best);
    Ok(best)
}

//! Metrics and the benchmark harness.
//!
//! Covers the training-time relative objective gap (phi), the paired
//! time/objective improvement statistics (tau, rho), cumulative performance
//! profiles, and a harness that runs the learned policy against the exact
//! solver and emits records, summaries, and profile curves as CSV.

use crate::env::check_feasibility;
use crate::exact::{branch_and_bound, BnbOptions};
use crate::instances::Instance;
use crate::models::ActorNet;
use crate::ppo::{greedy_solve, PpoError};
use rayon::prelude::*;
use std::collections::BTreeSet;
use std::io::Write;
use std::time::Duration;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("records for instances {0:?} and {1:?} cannot be paired")]
    InstanceMismatch(String, String),
    #[error("baseline {quantity} must be positive, got {value}")]
    NonPositiveBaseline { quantity: &'static str, value: f64 },
    #[error("{method} on {instance_id}: performance must be positive, got {value}")]
    NonPositivePerformance {
        method: String,
        instance_id: String,
        value: f64,
    },
    #[error("return history contains a zero return (no makespan can be zero)")]
    ZeroReturn,
    #[error("return history contains a positive return; episode returns are non-positive")]
    PositiveReturn,
    #[error(transparent)]
    Ppo(#[from] PpoError),
    #[error("benchmark produced an infeasible schedule for {0}: {1}")]
    Infeasible(String, String),
}

/// One solver run on one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub instance_id: String,
    pub method: String,
    pub objective: u64,
    pub time_s: f64,
    pub optimal: bool,
}

/// Cumulative performance-profile curve of one method.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileCurve {
    pub method: String,
    /// (eta breakpoint, cumulative fraction), non-decreasing in both.
    pub points: Vec<(f64, f64)>,
}

/// Convention for the phi training gap.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhiConvention {
    /// |R_k| over the smallest |R| seen for the same instance: >= 1,
    /// decreasing toward 1 as episodes approach the best-known solution.
    Magnitude,
    /// The literal ratio of raw (negative) returns against the minimum
    /// (most negative) same-instance return.
    Literal,
}

/// One episode's return keyed by instance (whatever per-episode statistic
/// the caller tracks: the episode-best or the mean over roll-outs).
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeReturn {
    pub instance_id: String,
    pub best_return: f64,
}

/// The relative objective gap per episode, computed against the best (or,
/// for the literal convention, most negative) same-instance return across
/// the whole history.
pub fn phi(history: &[EpisodeReturn], convention: PhiConvention) -> Result<Vec<f64>, EvalError> {
    let mut reference: std::collections::HashMap<&str, f64> = std::collections::HashMap::new();
    for entry in history {
        if entry.best_return == 0.0 {
            return Err(EvalError::ZeroReturn);
        }
        if entry.best_return > 0.0 {
            return Err(EvalError::PositiveReturn);
        }
        reference
            .entry(entry.instance_id.as_str())
            .and_modify(|r| {
                *r = match convention {
                    // Best solution: smallest magnitude.
                    PhiConvention::Magnitude => r.max(entry.best_return),
                    // Literal formula: minimum raw return.
                    PhiConvention::Literal => r.min(entry.best_return),
                }
            })
            .or_insert(entry.best_return);
    }
    Ok(history
        .iter()
        .map(|entry| entry.best_return / reference[entry.instance_id.as_str()])
        .collect())
}

/// Centered-window-free trailing moving average: entry `i` averages the
/// last `window` values ending at `i`.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / window.min(i + 1) as f64);
    }
    out
}

/// Signed relative time difference; negative means `rl` was faster.
pub fn tau(rl: &RunRecord, baseline: &RunRecord) -> Result<f64, EvalError> {
    if rl.instance_id != baseline.instance_id {
        return Err(EvalError::InstanceMismatch(
            rl.instance_id.clone(),
            baseline.instance_id.clone(),
        ));
    }
    if baseline.time_s <= 0.0 || baseline.time_s.is_nan() {
        return Err(EvalError::NonPositiveBaseline {
            quantity: "time",
            value: baseline.time_s,
        });
    }
    Ok((rl.time_s - baseline.time_s) / baseline.time_s)
}

/// Signed relative makespan difference; negative means `rl` found a shorter
/// schedule.
pub fn rho(rl: &RunRecord, baseline: &RunRecord) -> Result<f64, EvalError> {
    if rl.instance_id != baseline.instance_id {
        return Err(EvalError::InstanceMismatch(
            rl.instance_id.clone(),
            baseline.instance_id.clone(),
        ));
    }
    if baseline.objective == 0 {
        return Err(EvalError::NonPositiveBaseline {
            quantity: "objective",
            value: 0.0,
        });
    }
    Ok((rl.objective as f64 - baseline.objective as f64) / baseline.objective as f64)
}

/// Which measurement a profile ranks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PerfMetric {
    Time,
    Objective,
}

impl PerfMetric {
    pub fn name(self) -> &'static str {
        match self {
            PerfMetric::Time => "time",
            PerfMetric::Objective => "objective",
        }
    }
}

/// Dolan-More performance profiles: per-problem ratios against the
/// per-problem best, cumulated over all distinct finite breakpoints.
/// Missing (problem, method) pairs count as infinitely bad, so a method's
/// curve tops out at its attempted fraction.
pub fn performance_profile(
    records: &[RunRecord],
    metric: PerfMetric,
) -> Result<Vec<ProfileCurve>, EvalError> {
    let problems: BTreeSet<&str> = records.iter().map(|r| r.instance_id.as_str()).collect();
    let methods: BTreeSet<&str> = records.iter().map(|r| r.method.as_str()).collect();
    let perf = |r: &RunRecord| match metric {
        PerfMetric::Time => r.time_s,
        PerfMetric::Objective => r.objective as f64,
    };
    for r in records {
        if perf(r) <= 0.0 || perf(r).is_nan() {
            return Err(EvalError::NonPositivePerformance {
                method: r.method.clone(),
                instance_id: r.instance_id.clone(),
                value: perf(r),
            });
        }
    }

    // eta[problem][method], infinity when missing.
    let mut ratios: Vec<Vec<f64>> = Vec::with_capacity(problems.len());
    for problem in &problems {
        let mut row = Vec::with_capacity(methods.len());
        let best = records
            .iter()
            .filter(|r| r.instance_id == *problem)
            .map(perf)
            .fold(f64::INFINITY, f64::min);
        for method in &methods {
            let value = records
                .iter()
                .find(|r| r.instance_id == *problem && r.method == *method)
                .map(perf);
            row.push(value.map_or(f64::INFINITY, |v| v / best));
        }
        ratios.push(row);
    }

    let mut breakpoints: Vec<f64> = ratios
        .iter()
        .flatten()
        .copied()
        .filter(|v| v.is_finite())
        .collect();
    breakpoints.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    breakpoints.dedup();

    let num_problems = problems.len() as f64;
    Ok(methods
        .iter()
        .enumerate()
        .map(|(mi, method)| {
            let points = breakpoints
                .iter()
                .map(|&eta| {
                    let count = ratios.iter().filter(|row| row[mi] <= eta).count();
                    (eta, count as f64 / num_problems)
                })
                .collect();
            ProfileCurve {
                method: method.to_string(),
                points,
            }
        })
        .collect())
}

/// A named instance to benchmark.
#[derive(Debug, Clone)]
pub struct BenchInstance {
    pub id: String,
    pub instance: Instance,
}

#[derive(Debug, Clone, Copy)]
pub struct BenchConfig {
    /// Wall-clock cap per exact solve.
    pub time_limit: Duration,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            time_limit: Duration::from_secs(60),
        }
    }
}

/// Per-(class, method) summary row. The stat columns describe objectives;
/// times and everything else recompute from the raw records. `avg_tau` and
/// `avg_rho` are the per-instance means against the exact baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub class: String,
    pub method: String,
    pub mean: f64,
    pub std: f64,
    pub max: f64,
    pub min: f64,
    pub avg_tau: f64,
    pub avg_rho: f64,
}

#[derive(Debug)]
pub struct BenchOutput {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub time_profile: Vec<ProfileCurve>,
    pub objective_profile: Vec<ProfileCurve>,
}

pub const METHOD_RL: &str = "rl";
pub const METHOD_EXACT: &str = "exact";

/// Floor for measured wall times so ratios stay defined on instances that
/// solve faster than the clock resolution.
const MIN_TIME_S: f64 = 1e-9;

fn class_of(instance: &Instance) -> String {
    format!("{}x{}", instance.num_jobs(), instance.num_machines())
}

/// Runs both methods on every instance. The exact solver runs once with the
/// configured limit and an instrumented incumbent trace; its record carries
/// both benchmark counterfactuals at once: `time_s` is the time it needed
/// to match the policy's objective (the time analysis) and `objective` is
/// its incumbent within the policy's wall time (the quality analysis).
pub fn bench(
    instances: &[BenchInstance],
    actor: &ActorNet,
    config: BenchConfig,
) -> Result<BenchOutput, EvalError> {
    let per_instance: Vec<Result<(RunRecord, RunRecord), EvalError>> = instances
        .par_iter()
        .map(|entry| {
            let start = std::time::Instant::now();
            let (schedule, rl_makespan) = greedy_solve(&entry.instance, actor)?;
            let rl_time = start.elapsed().as_secs_f64().max(MIN_TIME_S);
            check_feasibility(&entry.instance, &schedule)
                .map_err(|e| EvalError::Infeasible(entry.id.clone(), e.to_string()))?;
            let rl_record = RunRecord {
                instance_id: entry.id.clone(),
                method: METHOD_RL.to_string(),
                objective: rl_makespan,
                time_s: rl_time,
                optimal: false,
            };

            let result = branch_and_bound(
                &entry.instance,
                BnbOptions {
                    time_limit: Some(config.time_limit),
                    target: None,
                },
            );
            // Time to match the policy's quality; censored at the full run
            // time when it never matched.
            let time_to_match = result
                .incumbent_trace
                .iter()
                .find(|(_, v)| *v <= rl_makespan)
                .map(|(t, _)| t.as_secs_f64())
                .unwrap_or_else(|| config.time_limit.as_secs_f64())
                .max(MIN_TIME_S);
            // Incumbent within the policy's wall-time budget; the SPT seed
            // exists from time zero, so the fallback is the first entry.
            let objective_at_budget = result
                .incumbent_trace
                .iter()
                .take_while(|(t, _)| t.as_secs_f64() <= rl_time)
                .last()
                .map(|&(_, v)| v)
                .unwrap_or(result.incumbent_trace[0].1);
            let exact_record = RunRecord {
                instance_id: entry.id.clone(),
                method: METHOD_EXACT.to_string(),
                objective: objective_at_budget,
                time_s: time_to_match,
                optimal: result.optimal,
            };
            Ok((rl_record, exact_record))
        })
        .collect();

    let mut records = Vec::with_capacity(instances.len() * 2);
    for pair in per_instance {
        let (rl, exact) = pair?;
        records.push(rl);
        records.push(exact);
    }

    let summary = summarize(instances, &records)?;
    let time_profile = performance_profile(&records, PerfMetric::Time)?;
    let objective_profile = performance_profile(&records, PerfMetric::Objective)?;
    Ok(BenchOutput {
        records,
        summary,
        time_profile,
        objective_profile,
    })
}

fn stats(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    (mean, var.sqrt(), max, min)
}

fn summarize(
    instances: &[BenchInstance],
    records: &[RunRecord],
) -> Result<Vec<SummaryRow>, EvalError> {
    let classes: BTreeSet<String> = instances.iter().map(|e| class_of(&e.instance)).collect();
    let methods: BTreeSet<&str> = records.iter().map(|r| r.method.as_str()).collect();
    let mut rows = Vec::new();
    for class in &classes {
        let ids: BTreeSet<&str> = instances
            .iter()
            .filter(|e| class_of(&e.instance) == *class)
            .map(|e| e.id.as_str())
            .collect();
        // Mean tau/rho of the policy against the exact baseline.
        let mut taus = Vec::new();
        let mut rhos = Vec::new();
        for id in &ids {
            let find = |method: &str| {
                records
                    .iter()
                    .find(|r| r.instance_id == *id && r.method == method)
            };
            if let (Some(rl), Some(exact)) = (find(METHOD_RL), find(METHOD_EXACT)) {
                taus.push(tau(rl, exact)?);
                rhos.push(rho(rl, exact)?);
            }
        }
        let avg_tau_rl = taus.iter().sum::<f64>() / taus.len().max(1) as f64;
        let avg_rho_rl = rhos.iter().sum::<f64>() / rhos.len().max(1) as f64;

        for method in &methods {
            let objectives: Vec<f64> = records
                .iter()
                .filter(|r| r.method == *method && ids.contains(r.instance_id.as_str()))
                .map(|r| r.objective as f64)
                .collect();
            if objectives.is_empty() {
                continue;
            }
            let (mean, std, max, min) = stats(&objectives);
            let is_rl = *method == METHOD_RL;
            rows.push(SummaryRow {
                class: class.clone(),
                method: method.to_string(),
                mean,
                std,
                max,
                min,
                avg_tau: if is_rl { avg_tau_rl } else { 0.0 },
                avg_rho: if is_rl { avg_rho_rl } else { 0.0 },
            });
        }
    }
    Ok(rows)
}

pub fn write_records_csv<W: Write>(records: &[RunRecord], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "instance_id,method,objective,time_s,optimal")?;
    for r in records {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.instance_id, r.method, r.objective, r.time_s, r.optimal
        )?;
    }
    Ok(())
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "class,method,mean,std,max,min,avg_tau,avg_rho")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.class, r.method, r.mean, r.std, r.max, r.min, r.avg_tau, r.avg_rho
        )?;
    }
    Ok(())
}

pub fn write_profile_csv<W: Write>(curves: &[ProfileCurve], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "method,eta,gamma")?;
    for curve in curves {
        for &(eta, gamma) in &curve.points {
            writeln!(out, "{},{},{}", curve.method, eta, gamma)?;
        }
    }
    Ok(())
}

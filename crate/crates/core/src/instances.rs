//! Problem data model, random instance generation, and the canonical text
//! format.
//!
//! An instance is a set of jobs, each an ordered list of (machine,
//! processing time) tasks; the task order inside a job is its precedence
//! chain. Generated instances give every job a uniformly random permutation
//! of all machines, with integer processing times drawn from a Gaussian or
//! Poisson distribution.
//!
//! The text format is the OR-library style: line 1 is `<jobs> <machines>`,
//! then one line per job holding `machine time machine time ...` pairs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One operation: job-on-machine with its processing time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Task {
    pub machine: usize,
    pub processing_time: u64,
}

/// A job shop instance: `jobs[j]` lists job `j`'s tasks in precedence order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instance {
    num_machines: usize,
    jobs: Vec<Vec<Task>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum InstanceError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("instance must have at least one job")]
    NoJobs,
    #[error("instance must have at least one machine")]
    NoMachines,
    #[error("job {job} has no tasks")]
    EmptyJob { job: usize },
    #[error("job {job} visits machine {machine} more than once")]
    DuplicateMachine { job: usize, machine: usize },
    #[error("job {job} references machine {machine} but the instance has {num_machines} machines")]
    MachineOutOfRange {
        job: usize,
        machine: usize,
        num_machines: usize,
    },
    #[error("job {job} has a task with processing time 0; times must be >= 1")]
    NonPositiveTime { job: usize },
}

impl Instance {
    /// Builds an instance, validating every structural invariant.
    pub fn new(num_machines: usize, jobs: Vec<Vec<Task>>) -> Result<Self, InstanceError> {
        if num_machines == 0 {
            return Err(InstanceError::NoMachines);
        }
        if jobs.is_empty() {
            return Err(InstanceError::NoJobs);
        }
        for (j, job) in jobs.iter().enumerate() {
            if job.is_empty() {
                return Err(InstanceError::EmptyJob { job: j });
            }
            let mut seen = vec![false; num_machines];
            for task in job {
                if task.machine >= num_machines {
                    return Err(InstanceError::MachineOutOfRange {
                        job: j,
                        machine: task.machine,
                        num_machines,
                    });
                }
                if seen[task.machine] {
                    return Err(InstanceError::DuplicateMachine {
                        job: j,
                        machine: task.machine,
                    });
                }
                seen[task.machine] = true;
                if task.processing_time == 0 {
                    return Err(InstanceError::NonPositiveTime { job: j });
                }
            }
        }
        Ok(Self { num_machines, jobs })
    }

    pub fn num_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn num_machines(&self) -> usize {
        self.num_machines
    }

    pub fn jobs(&self) -> &[Vec<Task>] {
        &self.jobs
    }

    pub fn job(&self, j: usize) -> &[Task] {
        &self.jobs[j]
    }

    /// Total number of tasks over all jobs; equals the episode length.
    pub fn task_count(&self) -> usize {
        self.jobs.iter().map(Vec::len).sum()
    }

    /// Sum of all processing times; the exact module's Big-M ceiling.
    pub fn total_processing_time(&self) -> u64 {
        self.jobs
            .iter()
            .flat_map(|job| job.iter().map(|t| t.processing_time))
            .sum()
    }
}

/// Processing-time distribution for generated instances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ProcessingTimeDist {
    Gaussian { mean: f64, std_dev: f64 },
    Poisson { lambda: f64 },
}

/// Parameters for random instance generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorSpec {
    pub num_jobs: usize,
    pub num_machines: usize,
    pub distribution: ProcessingTimeDist,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), InstanceError> {
        if self.num_jobs == 0 {
            return Err(InstanceError::InvalidSpec("num_jobs must be >= 1".into()));
        }
        if self.num_machines == 0 {
            return Err(InstanceError::InvalidSpec(
                "num_machines must be >= 1".into(),
            ));
        }
        match self.distribution {
            ProcessingTimeDist::Gaussian { mean, std_dev } => {
                if mean <= 0.0 || mean.is_nan() {
                    return Err(InstanceError::InvalidSpec(
                        "gaussian mean must be > 0".into(),
                    ));
                }
                if std_dev <= 0.0 || std_dev.is_nan() {
                    return Err(InstanceError::InvalidSpec(
                        "gaussian std_dev must be > 0".into(),
                    ));
                }
            }
            ProcessingTimeDist::Poisson { lambda } => {
                if lambda <= 0.0 || lambda.is_nan() {
                    return Err(InstanceError::InvalidSpec(
                        "poisson lambda must be > 0".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Draws one standard normal deviate via the Box-Muller transform.
///
/// Kept as an explicit transform of uniforms (rather than a library sampler)
/// so the generated streams are reproducible across platforms and releases.
fn sample_standard_normal(rng: &mut ChaCha20Rng) -> f64 {
    // random::<f64>() is uniform on [0, 1); shift away from 0 for the log.
    let u1: f64 = loop {
        let u = rng.random::<f64>();
        if u > 0.0 {
            break u;
        }
    };
    let u2: f64 = rng.random::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Draws one Poisson deviate by CDF inversion (sequential search).
///
/// Suitable for the lambda ~ 100 scale used by the generated classes; the
/// search is capped well past the distribution's effective support.
fn sample_poisson(rng: &mut ChaCha20Rng, lambda: f64) -> u64 {
    let u: f64 = rng.random::<f64>();
    let mut k: u64 = 0;
    let mut p = (-lambda).exp();
    let mut cdf = p;
    let cap = (lambda + 10.0 * lambda.sqrt() + 50.0) as u64;
    while u > cdf && k < cap {
        k += 1;
        p *= lambda / k as f64;
        cdf += p;
    }
    k
}

fn sample_processing_time(rng: &mut ChaCha20Rng, dist: ProcessingTimeDist) -> u64 {
    match dist {
        ProcessingTimeDist::Gaussian { mean, std_dev } => {
            let x = mean + std_dev * sample_standard_normal(rng);
            let rounded = x.round();
            if rounded < 1.0 {
                1
            } else {
                rounded as u64
            }
        }
        ProcessingTimeDist::Poisson { lambda } => sample_poisson(rng, lambda).max(1),
    }
}

/// Generates a random instance: each job visits every machine exactly once
/// in a uniformly random order, with i.i.d. integer processing times.
/// Deterministic given `spec.seed`.
pub fn generate(spec: &GeneratorSpec) -> Result<Instance, InstanceError> {
    spec.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
    let m = spec.num_machines;
    let mut jobs = Vec::with_capacity(spec.num_jobs);
    for _ in 0..spec.num_jobs {
        // Fisher-Yates permutation of the machine ids.
        let mut machines: Vec<usize> = (0..m).collect();
        for i in (1..m).rev() {
            let j = rng.random_range(0..=i);
            machines.swap(i, j);
        }
        let job = machines
            .into_iter()
            .map(|machine| Task {
                machine,
                processing_time: sample_processing_time(&mut rng, spec.distribution),
            })
            .collect();
        jobs.push(job);
    }
    Instance::new(m, jobs)
}

#[derive(Debug, Error, PartialEq)]
pub enum ParseError {
    #[error("line {line}: malformed header, expected \"<jobs> <machines>\"")]
    MalformedHeader { line: usize },
    #[error("header declares {expected} jobs but only {found} job lines follow")]
    MissingJobs { expected: usize, found: usize },
    #[error("line {line}: unexpected content after the last job line")]
    TrailingContent { line: usize },
    #[error("line {line}: expected an even number of integers (machine/time pairs), found {found} tokens")]
    OddTokenCount { line: usize, found: usize },
    #[error("line {line}: invalid integer {token:?}")]
    InvalidInteger { line: usize, token: String },
    #[error("line {line}: {source}")]
    Invalid {
        line: usize,
        #[source]
        source: InstanceError,
    },
}

/// Parses the canonical text format, validating every instance invariant.
/// Error messages carry 1-based line numbers.
pub fn parse_instance(text: &str) -> Result<Instance, ParseError> {
    let mut lines = text.lines().enumerate();
    let (header_idx, header) = lines
        .next()
        .ok_or(ParseError::MalformedHeader { line: 1 })?;
    let header_line = header_idx + 1;
    let mut it = header.split_whitespace();
    let num_jobs: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or(ParseError::MalformedHeader { line: header_line })?;
    let num_machines: usize = it
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or(ParseError::MalformedHeader { line: header_line })?;
    if it.next().is_some() {
        return Err(ParseError::MalformedHeader { line: header_line });
    }
    if num_jobs == 0 {
        return Err(ParseError::Invalid {
            line: header_line,
            source: InstanceError::NoJobs,
        });
    }
    if num_machines == 0 {
        return Err(ParseError::Invalid {
            line: header_line,
            source: InstanceError::NoMachines,
        });
    }

    let mut jobs: Vec<Vec<Task>> = Vec::with_capacity(num_jobs);
    for (idx, raw) in &mut lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        if jobs.len() == num_jobs {
            return Err(ParseError::TrailingContent { line });
        }
        let tokens: Vec<&str> = raw.split_whitespace().collect();
        if !tokens.len().is_multiple_of(2) {
            return Err(ParseError::OddTokenCount {
                line,
                found: tokens.len(),
            });
        }
        let mut job = Vec::with_capacity(tokens.len() / 2);
        for pair in tokens.chunks(2) {
            let machine: usize = pair[0].parse().map_err(|_| ParseError::InvalidInteger {
                line,
                token: pair[0].to_string(),
            })?;
            let time: u64 = pair[1].parse().map_err(|_| ParseError::InvalidInteger {
                line,
                token: pair[1].to_string(),
            })?;
            job.push(Task {
                machine,
                processing_time: time,
            });
        }
        // Validate this job in isolation so the error names the right line.
        let job_index = jobs.len();
        validate_job(job_index, &job, num_machines)
            .map_err(|source| ParseError::Invalid { line, source })?;
        jobs.push(job);
    }
    if jobs.len() < num_jobs {
        return Err(ParseError::MissingJobs {
            expected: num_jobs,
            found: jobs.len(),
        });
    }
    Instance::new(num_machines, jobs).map_err(|source| ParseError::Invalid { line: 1, source })
}

fn validate_job(job_index: usize, job: &[Task], num_machines: usize) -> Result<(), InstanceError> {
    if job.is_empty() {
        return Err(InstanceError::EmptyJob { job: job_index });
    }
    let mut seen = vec![false; num_machines];
    for task in job {
        if task.machine >= num_machines {
            return Err(InstanceError::MachineOutOfRange {
                job: job_index,
                machine: task.machine,
                num_machines,
            });
        }
        if seen[task.machine] {
            return Err(InstanceError::DuplicateMachine {
                job: job_index,
                machine: task.machine,
            });
        }
        seen[task.machine] = true;
        if task.processing_time == 0 {
            return Err(InstanceError::NonPositiveTime { job: job_index });
        }
    }
    Ok(())
}

/// Writes the canonical text form; `parse_instance` round-trips it exactly.
pub fn write_instance(instance: &Instance) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{} {}\n",
        instance.num_jobs(),
        instance.num_machines()
    ));
    for job in instance.jobs() {
        let mut first = true;
        for task in job {
            if !first {
                out.push(' ');
            }
            out.push_str(&format!("{} {}", task.machine, task.processing_time));
            first = false;
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_spec(seed: u64) -> GeneratorSpec {
        GeneratorSpec {
            num_jobs: 8,
            num_machines: 6,
            distribution: ProcessingTimeDist::Gaussian {
                mean: 100.0,
                std_dev: 10.0,
            },
            seed,
        }
    }

    #[test]
    fn generates_full_permutations() {
        let inst = generate(&gaussian_spec(7)).unwrap();
        assert_eq!(inst.num_jobs(), 8);
        assert_eq!(inst.num_machines(), 6);
        assert_eq!(inst.task_count(), 48);
        for job in inst.jobs() {
            let mut machines: Vec<usize> = job.iter().map(|t| t.machine).collect();
            machines.sort_unstable();
            assert_eq!(machines, (0..6).collect::<Vec<_>>());
        }
        // N(100, 10) at 48 draws stays comfortably within +-4 sigma.
        for job in inst.jobs() {
            for t in job {
                assert!(
                    (60..=140).contains(&t.processing_time),
                    "p = {}",
                    t.processing_time
                );
            }
        }
    }

    #[test]
    fn minimal_poisson_instance() {
        let inst = generate(&GeneratorSpec {
            num_jobs: 1,
            num_machines: 1,
            distribution: ProcessingTimeDist::Poisson { lambda: 100.0 },
            seed: 3,
        })
        .unwrap();
        assert_eq!(inst.task_count(), 1);
        assert!(inst.job(0)[0].processing_time >= 1);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&gaussian_spec(42)).unwrap();
        let b = generate(&gaussian_spec(42)).unwrap();
        assert_eq!(a, b);
        let c = generate(&gaussian_spec(43)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = gaussian_spec(1);
        spec.num_jobs = 0;
        assert!(matches!(
            generate(&spec),
            Err(InstanceError::InvalidSpec(_))
        ));
        let bad_sigma = GeneratorSpec {
            distribution: ProcessingTimeDist::Gaussian {
                mean: 100.0,
                std_dev: 0.0,
            },
            ..gaussian_spec(1)
        };
        assert!(generate(&bad_sigma).is_err());
        let bad_lambda = GeneratorSpec {
            distribution: ProcessingTimeDist::Poisson { lambda: -1.0 },
            ..gaussian_spec(1)
        };
        assert!(generate(&bad_lambda).is_err());
    }

    #[test]
    fn gaussian_sampler_mean_sanity() {
        // Empirical mean of 10_000 draws within 3*sigma/sqrt(10_000) of mu.
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let dist = ProcessingTimeDist::Gaussian {
            mean: 100.0,
            std_dev: 10.0,
        };
        let n = 10_000;
        let sum: f64 = (0..n)
            .map(|_| sample_processing_time(&mut rng, dist) as f64)
            .sum();
        let mean = sum / n as f64;
        let tol = 3.0 * 10.0 / (n as f64).sqrt();
        assert!(
            (mean - 100.0).abs() <= tol,
            "mean {mean} outside 100 +- {tol}"
        );
    }

    #[test]
    fn poisson_sampler_mean_sanity() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let n = 10_000;
        let sum: f64 = (0..n).map(|_| sample_poisson(&mut rng, 100.0) as f64).sum();
        let mean = sum / n as f64;
        assert!((mean - 100.0).abs() <= 0.5, "poisson mean {mean}");
    }

    #[test]
    fn parses_the_format_definition_case() {
        let inst = parse_instance("2 2\n0 3 1 2\n1 4 0 1\n").unwrap();
        assert_eq!(inst.num_jobs(), 2);
        assert_eq!(inst.num_machines(), 2);
        assert_eq!(
            inst.job(0),
            &[
                Task {
                    machine: 0,
                    processing_time: 3
                },
                Task {
                    machine: 1,
                    processing_time: 2
                }
            ]
        );
        assert_eq!(
            inst.job(1),
            &[
                Task {
                    machine: 1,
                    processing_time: 4
                },
                Task {
                    machine: 0,
                    processing_time: 1
                }
            ]
        );
    }

    #[test]
    fn parses_single_task_instance() {
        let inst = parse_instance("1 1\n0 5\n").unwrap();
        assert_eq!(inst.task_count(), 1);
        assert_eq!(write_instance(&inst), "1 1\n0 5\n");
    }

    #[test]
    fn missing_job_lines_error() {
        let err = parse_instance("3 2\n0 3 1 2\n1 4 0 1\n").unwrap_err();
        assert_eq!(
            err,
            ParseError::MissingJobs {
                expected: 3,
                found: 2
            }
        );
    }

    #[test]
    fn parse_errors_name_lines() {
        assert_eq!(
            parse_instance("x 2\n").unwrap_err(),
            ParseError::MalformedHeader { line: 1 }
        );
        assert!(matches!(
            parse_instance("1 2\n0 3 1\n").unwrap_err(),
            ParseError::OddTokenCount { line: 2, found: 3 }
        ));
        assert!(matches!(
            parse_instance("1 2\n0 3 0 2\n").unwrap_err(),
            ParseError::Invalid {
                line: 2,
                source: InstanceError::DuplicateMachine { job: 0, machine: 0 }
            }
        ));
        assert!(matches!(
            parse_instance("1 2\n0 0\n").unwrap_err(),
            ParseError::Invalid {
                line: 2,
                source: InstanceError::NonPositiveTime { job: 0 }
            }
        ));
        assert!(matches!(
            parse_instance("1 1\n0 5\n0 4\n").unwrap_err(),
            ParseError::TrailingContent { line: 3 }
        ));
    }

    #[test]
    fn parser_accepts_partial_jobs() {
        // n_j < m is legal for parsed corpora even though the generator
        // always emits full permutations.
        let inst = parse_instance("2 3\n0 5 2 4\n1 2\n").unwrap();
        assert_eq!(inst.job(0).len(), 2);
        assert_eq!(inst.job(1).len(), 1);
    }

    #[test]
    fn round_trips_generated_instances() {
        for seed in 0..100 {
            let inst = generate(&gaussian_spec(seed)).unwrap();
            let text = write_instance(&inst);
            let back = parse_instance(&text).unwrap();
            assert_eq!(inst, back);
            assert_eq!(write_instance(&back), text);
        }
    }

    proptest::proptest! {
        // Round trip over arbitrary valid instances, partial jobs included.
        #[test]
        fn round_trips_arbitrary_instances(
            num_machines in 1usize..6,
            job_shapes in proptest::collection::vec(
                (proptest::collection::vec(1u64..500, 1..6), 0u64..u64::MAX),
                1..6,
            ),
        ) {
            let jobs: Vec<Vec<Task>> = job_shapes
                .iter()
                .map(|(times, perm_seed)| {
                    // Pick n_j <= m distinct machines deterministically.
                    let n_j = times.len().min(num_machines);
                    let mut machines: Vec<usize> = (0..num_machines).collect();
                    let mut s = *perm_seed;
                    for i in (1..num_machines).rev() {
                        s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                        machines.swap(i, (s >> 33) as usize % (i + 1));
                    }
                    machines
                        .into_iter()
                        .take(n_j)
                        .zip(times)
                        .map(|(machine, &processing_time)| Task { machine, processing_time })
                        .collect()
                })
                .collect();
            let inst = Instance::new(num_machines, jobs).unwrap();
            let text = write_instance(&inst);
            let back = parse_instance(&text).unwrap();
            proptest::prop_assert_eq!(&inst, &back);
            proptest::prop_assert_eq!(write_instance(&back), text);
        }
    }
}

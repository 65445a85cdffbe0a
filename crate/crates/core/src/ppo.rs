//! Rollout collection, losses, and the training loop.
//!
//! Each episode samples one instance, collects N roll-outs under the current
//! policy (with an epsilon-random exploration floor), computes rewards-to-go
//! and one-step advantages, then takes Adam steps on the KL-penalized actor
//! objective and the critic's mean-square regression. The KL penalty
//! coefficient doubles or halves depending on the observed divergence
//! against the target.
//!
//! All randomness is derived from the master seed and the episode index, so
//! a run can be resumed mid-stream and two runs with the same inputs are
//! bit-identical.

use crate::autodiff::{adam_step, AdamConfig, AdamState, GradMap, Graph, Var};
use crate::env::{
    encode, extract_schedule, mask, reset, step, ActionMask, EnvError, ScheduleRecord,
    SchedulingState, StateFeatures,
};
use crate::instances::Instance;
use crate::models::{actor_forward, critic_forward, ActorNet, CriticNet, ModelError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PpoError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error("environment rejected an agent action (agent bug): {0}")]
    Env(#[from] EnvError),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("non-finite {quantity} at episode {episode}")]
    NumericFailure { episode: usize, quantity: String },
    #[error("rollout batch is missing {0}; compute it first")]
    MissingDerived(&'static str),
}

/// One recorded decision.
#[derive(Debug, Clone)]
pub struct StepSample {
    pub features: StateFeatures,
    pub mask: ActionMask,
    pub action: usize,
    /// Old policy's log-probability of the chosen action.
    pub old_logp_action: f64,
    /// Old policy's full log-probability vector (masked entries sentinel).
    pub old_logp: Vec<f64>,
    pub reward: i64,
}

/// One complete episode trajectory plus derived training targets.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub steps: Vec<StepSample>,
    pub rewards_to_go: Vec<i64>,
    pub advantages: Vec<f64>,
    pub makespan: u64,
}

impl RolloutBatch {
    /// Total episode return; equals minus the terminal makespan.
    pub fn total_return(&self) -> i64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Direction of the KL penalty term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KlDirection {
    /// KL(pi_old || pi_new): expectation under the sampled (old) policy.
    OldNew,
    /// KL(pi_new || pi_old).
    NewOld,
}

/// Step schedule for the random-action probability: the first entry whose
/// `until_fraction` exceeds the episode fraction applies; past the last
/// entry epsilon is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpsilonStep {
    pub until_fraction: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub episodes: usize,
    pub rollouts_per_episode: usize,
    pub beta0: f64,
    pub delta: f64,
    pub actor_steps: usize,
    pub critic_steps: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub epsilon_schedule: Vec<EpsilonStep>,
    pub kl_direction: KlDirection,
    /// The actor update is rolled back (and beta doubled) when the observed
    /// KL exceeds this multiple of delta.
    pub divergence_guard: f64,
    pub checkpoint_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 5000,
            rollouts_per_episode: 10,
            beta0: 15.0,
            delta: 0.05,
            actor_steps: 1,
            critic_steps: 3,
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            epsilon_schedule: vec![
                EpsilonStep {
                    until_fraction: 0.40,
                    epsilon: 0.20,
                },
                EpsilonStep {
                    until_fraction: 0.55,
                    epsilon: 0.10,
                },
                EpsilonStep {
                    until_fraction: 0.70,
                    epsilon: 0.05,
                },
            ],
            kl_direction: KlDirection::OldNew,
            divergence_guard: 50.0,
            checkpoint_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PpoError> {
        if self.episodes == 0 {
            return Err(PpoError::InvalidConfig("episodes must be >= 1".into()));
        }
        if self.rollouts_per_episode == 0 {
            return Err(PpoError::InvalidConfig(
                "rollouts_per_episode must be >= 1".into(),
            ));
        }
        if self.actor_steps == 0 || self.critic_steps == 0 {
            return Err(PpoError::InvalidConfig(
                "optimizer step counts must be >= 1".into(),
            ));
        }
        if self.delta <= 0.0 || self.delta.is_nan() {
            return Err(PpoError::InvalidConfig("delta must be > 0".into()));
        }
        if self.beta0 <= 0.0 || self.beta0.is_nan() {
            return Err(PpoError::InvalidConfig("beta0 must be > 0".into()));
        }
        if [self.actor_lr, self.critic_lr]
            .iter()
            .any(|lr| *lr <= 0.0 || lr.is_nan())
        {
            return Err(PpoError::InvalidConfig("learning rates must be > 0".into()));
        }
        if self.divergence_guard <= 0.0 || self.divergence_guard.is_nan() {
            return Err(PpoError::InvalidConfig(
                "divergence_guard must be > 0".into(),
            ));
        }
        let mut prev_fraction = 0.0;
        let mut prev_eps = f64::INFINITY;
        for step in &self.epsilon_schedule {
            if !(step.until_fraction > prev_fraction && step.until_fraction <= 1.0) {
                return Err(PpoError::InvalidConfig(
                    "epsilon schedule fractions must increase within (0, 1]".into(),
                ));
            }
            if !(0.0..=1.0).contains(&step.epsilon) || step.epsilon > prev_eps {
                return Err(PpoError::InvalidConfig(
                    "epsilon values must be non-increasing within [0, 1]".into(),
                ));
            }
            prev_fraction = step.until_fraction;
            prev_eps = step.epsilon;
        }
        Ok(())
    }

    /// Epsilon for episode `k` of `self.episodes`.
    pub fn epsilon_for(&self, episode: usize) -> f64 {
        let fraction = episode as f64 / self.episodes as f64;
        for step in &self.epsilon_schedule {
            if fraction < step.until_fraction {
                return step.epsilon;
            }
        }
        0.0
    }
}

const STREAM_INSTANCE: u64 = 0;
const STREAM_ROLLOUT: u64 = 1;

/// Stateless per-(episode, stream) seed derivation (splitmix64 finalizer),
/// the basis for exact resume and reproducibility.
pub fn derive_seed(master: u64, episode: u64, stream: u64) -> u64 {
    let mut z = master
        ^ episode.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn allowed_actions(mask: &ActionMask) -> Vec<usize> {
    mask.allowed
        .iter()
        .enumerate()
        .filter(|(_, &a)| a)
        .map(|(j, _)| j)
        .collect()
}

fn sample_from_log_probs(logp: &[f64], mask: &ActionMask, rng: &mut ChaCha20Rng) -> usize {
    let draw: f64 = rng.random();
    let mut cumulative = 0.0;
    let mut last_allowed = 0;
    for (j, (&l, &allowed)) in logp.iter().zip(&mask.allowed).enumerate() {
        if !allowed {
            continue;
        }
        last_allowed = j;
        cumulative += l.exp();
        if draw < cumulative {
            return j;
        }
    }
    last_allowed
}

/// Runs one episode from reset to terminal under the actor's masked policy,
/// taking a uniformly random allowed action with probability `epsilon`.
/// Records everything the losses need; stores no gradients.
pub fn collect_rollout(
    instance: &Instance,
    actor: &ActorNet,
    epsilon: f64,
    seed: u64,
) -> Result<RolloutBatch, PpoError> {
    let scale = actor.config.feature_scale(instance);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut state = reset(instance);
    let mut steps = Vec::with_capacity(instance.task_count());
    while !state.is_done() {
        let features = encode(instance, &state, scale);
        let action_mask = mask(instance, &state);
        let mut g = Graph::new();
        let logp_var = actor_forward(&mut g, actor, &features, &action_mask)?;
        let logp = g.value(logp_var).to_vec();
        drop(g);
        let action = if rng.random::<f64>() < epsilon {
            let allowed = allowed_actions(&action_mask);
            allowed[rng.random_range(0..allowed.len())]
        } else {
            sample_from_log_probs(&logp, &action_mask, &mut rng)
        };
        let outcome = step(instance, &state, action)?;
        steps.push(StepSample {
            features,
            mask: action_mask,
            action,
            old_logp_action: logp[action],
            old_logp: logp,
            reward: outcome.reward,
        });
        state = outcome.next_state;
    }
    Ok(RolloutBatch {
        steps,
        rewards_to_go: Vec::new(),
        advantages: Vec::new(),
        makespan: state.makespan(),
    })
}

/// Backward suffix sums of the rewards.
pub fn rewards_to_go(batch: &mut RolloutBatch) {
    let mut acc = 0i64;
    let mut rtg = vec![0i64; batch.steps.len()];
    for (t, sample) in batch.steps.iter().enumerate().rev() {
        acc += sample.reward;
        rtg[t] = acc;
    }
    batch.rewards_to_go = rtg;
}

/// One-step advantages `A_t = r + V(s_{t+1}) - V(s_t)` with the terminal
/// value fixed at 0. The critic is evaluated with frozen parameters.
pub fn advantages(batch: &mut RolloutBatch, critic: &CriticNet) -> Result<(), PpoError> {
    let mut g = Graph::new();
    let mut values = Vec::with_capacity(batch.steps.len());
    for sample in &batch.steps {
        let v = critic_forward(&mut g, critic, &sample.features)?;
        values.push(g.scalar_value(v));
    }
    let t_count = batch.steps.len();
    batch.advantages = (0..t_count)
        .map(|t| {
            let v_next = if t + 1 < t_count { values[t + 1] } else { 0.0 };
            batch.steps[t].reward as f64 + v_next - values[t]
        })
        .collect();
    Ok(())
}

fn kl_term(
    g: &mut Graph,
    sample: &StepSample,
    new_logp: Var,
    direction: KlDirection,
) -> Result<Var, PpoError> {
    match direction {
        KlDirection::OldNew => {
            // sum over allowed of pi_old * (log pi_old - log pi_new); the
            // old terms are constants.
            let pi_old: Vec<f64> = sample
                .old_logp
                .iter()
                .zip(&sample.mask.allowed)
                .map(|(&l, &m)| if m { l.exp() } else { 0.0 })
                .collect();
            let old_self_term: f64 = pi_old
                .iter()
                .zip(&sample.old_logp)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &l)| p * l)
                .sum();
            let pi_old_leaf = g.vector_input(pi_old);
            let cross = g.mul(pi_old_leaf, new_logp)?;
            let cross_sum = g.sum(cross);
            let old_leaf = g.scalar_input(old_self_term);
            Ok(g.sub(old_leaf, cross_sum)?)
        }
        KlDirection::NewOld => {
            // sum over allowed of pi_new * (log pi_new - log pi_old);
            // differentiable through pi_new. Masked entries contribute
            // exp(sentinel) * (sentinel - sentinel) = 0.
            let pi_new = g.exp(new_logp);
            let old_leaf = g.vector_input(sample.old_logp.clone());
            let diff = g.sub(new_logp, old_leaf)?;
            let weighted = g.mul(pi_new, diff)?;
            Ok(g.sum(weighted))
        }
    }
}

/// The negated KL-penalized surrogate: minus the sample mean over all steps
/// of `ratio * advantage - beta * KL`.
pub fn actor_loss(
    g: &mut Graph,
    batches: &[RolloutBatch],
    actor: &ActorNet,
    beta: f64,
    direction: KlDirection,
) -> Result<Var, PpoError> {
    let mut objectives = Vec::new();
    for batch in batches {
        if batch.advantages.len() != batch.steps.len() {
            return Err(PpoError::MissingDerived("advantages"));
        }
        for (sample, &advantage) in batch.steps.iter().zip(&batch.advantages) {
            let new_logp = actor_forward(g, actor, &sample.features, &sample.mask)?;
            let chosen = g.pick(new_logp, sample.action)?;
            let old = g.scalar_input(sample.old_logp_action);
            let log_ratio = g.sub(chosen, old)?;
            let ratio = g.exp(log_ratio);
            let weighted = g.scale(ratio, advantage);
            let kl = kl_term(g, sample, new_logp, direction)?;
            let penalty = g.scale(kl, beta);
            objectives.push(g.sub(weighted, penalty)?);
        }
    }
    if objectives.is_empty() {
        return Err(PpoError::MissingDerived("steps"));
    }
    let stacked = g.concat(&objectives)?;
    let mean = g.mean(stacked)?;
    Ok(g.scale(mean, -1.0))
}

/// Mean squared error of the critic against the rewards-to-go.
pub fn critic_loss(
    g: &mut Graph,
    batches: &[RolloutBatch],
    critic: &CriticNet,
) -> Result<Var, PpoError> {
    let mut squares = Vec::new();
    for batch in batches {
        if batch.rewards_to_go.len() != batch.steps.len() {
            return Err(PpoError::MissingDerived("rewards_to_go"));
        }
        for (sample, &target) in batch.steps.iter().zip(&batch.rewards_to_go) {
            let v = critic_forward(g, critic, &sample.features)?;
            let t = g.scalar_input(target as f64);
            let d = g.sub(v, t)?;
            squares.push(g.mul(d, d)?);
        }
    }
    if squares.is_empty() {
        return Err(PpoError::MissingDerived("steps"));
    }
    let stacked = g.concat(&squares)?;
    Ok(g.mean(stacked)?)
}

/// Doubles beta above 1.5x the target divergence, halves it below the
/// target divided by 1.5, and keeps it otherwise. Halving floors at the
/// smallest positive normal so beta stays > 0 over arbitrarily long runs.
pub fn update_beta(beta: f64, observed_kl: f64, delta: f64) -> f64 {
    if observed_kl > 1.5 * delta {
        2.0 * beta
    } else if observed_kl < delta / 1.5 {
        (beta / 2.0).max(f64::MIN_POSITIVE)
    } else {
        beta
    }
}

/// Mean KL between the recorded (old) policy and the actor's current one
/// over every step of `batches`, in the configured direction. Values only.
pub fn mean_kl(
    batches: &[RolloutBatch],
    actor: &ActorNet,
    direction: KlDirection,
) -> Result<f64, PpoError> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut g = Graph::new();
    for batch in batches {
        for sample in &batch.steps {
            let new_logp = actor_forward(&mut g, actor, &sample.features, &sample.mask)?;
            let kl = kl_term(&mut g, sample, new_logp, direction)?;
            total += g.scalar_value(kl);
            count += 1;
        }
    }
    Ok(total / count.max(1) as f64)
}

/// A named training instance.
#[derive(Debug, Clone)]
pub struct DatasetEntry {
    pub id: String,
    pub instance: Instance,
}

/// Per-episode log row. CSV columns: episode, instance_id, mean_return,
/// best_return, phi, critic_loss, kl, beta, epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeLog {
    pub episode: usize,
    pub instance_id: String,
    pub mean_return: f64,
    pub best_return: i64,
    /// Episode-best makespan over the best makespan seen so far for the
    /// same instance (>= 1; 1 means best-so-seen).
    pub phi: f64,
    pub critic_loss: f64,
    pub kl: f64,
    pub beta: f64,
    pub epsilon: f64,
    /// True when the divergence guard rolled the actor update back.
    pub guard_fired: bool,
}

pub const TRAINING_LOG_HEADER: &str =
    "episode,instance_id,mean_return,best_return,phi,critic_loss,kl,beta,epsilon";

pub fn write_training_log_row<W: Write>(log: &EpisodeLog, out: &mut W) -> std::io::Result<()> {
    writeln!(
        out,
        "{},{},{},{},{},{},{},{},{}",
        log.episode,
        log.instance_id,
        log.mean_return,
        log.best_return,
        log.phi,
        log.critic_loss,
        log.kl,
        log.beta,
        log.epsilon
    )
}

pub fn write_training_log_csv<W: Write>(logs: &[EpisodeLog], out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{TRAINING_LOG_HEADER}")?;
    for log in logs {
        write_training_log_row(log, out)?;
    }
    Ok(())
}

/// Everything that evolves during training; checkpointable and resumable.
pub struct TrainState {
    pub actor: ActorNet,
    pub critic: CriticNet,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub beta: f64,
    pub next_episode: usize,
    /// Best makespan seen per instance id, for the phi column.
    pub best_makespans: HashMap<String, u64>,
}

impl TrainState {
    pub fn fresh(
        model: crate::models::ModelConfig,
        config: &TrainConfig,
    ) -> Result<Self, PpoError> {
        config.validate()?;
        let (actor, critic) = crate::models::init_params(model, config.seed)?;
        let actor_adam = AdamState::new(
            AdamConfig::with_learning_rate(config.actor_lr),
            &actor.params(),
        );
        let critic_adam = AdamState::new(
            AdamConfig::with_learning_rate(config.critic_lr),
            &critic.params(),
        );
        Ok(Self {
            actor,
            critic,
            actor_adam,
            critic_adam,
            beta: config.beta0,
            next_episode: 0,
            best_makespans: HashMap::new(),
        })
    }
}

/// Why [`TrainObserver::on_snapshot`] was called.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotReason {
    Periodic,
    Diagnostic,
}

/// Hooks for progress reporting and checkpointing.
pub trait TrainObserver {
    fn on_episode(&mut self, _log: &EpisodeLog) {}
    fn on_snapshot(&mut self, _state: &TrainState, _reason: SnapshotReason) {}
}

/// No-op observer.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Runs episodes `state.next_episode..config.episodes`, mutating `state` in
/// place and returning the per-episode log. A non-finite loss or divergence
/// aborts with a diagnostic snapshot.
pub fn train(
    state: &mut TrainState,
    dataset: &[DatasetEntry],
    config: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<Vec<EpisodeLog>, PpoError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(PpoError::EmptyDataset);
    }
    let mut logs = Vec::with_capacity(config.episodes.saturating_sub(state.next_episode));

    for episode in state.next_episode..config.episodes {
        let epsilon = config.epsilon_for(episode);

        let mut instance_rng =
            ChaCha20Rng::seed_from_u64(derive_seed(config.seed, episode as u64, STREAM_INSTANCE));
        let entry = &dataset[instance_rng.random_range(0..dataset.len())];
        let instance = &entry.instance;

        // Roll-outs run against frozen parameters and may go wide.
        let rollout_seeds: Vec<u64> = (0..config.rollouts_per_episode)
            .map(|i| derive_seed(config.seed, episode as u64, STREAM_ROLLOUT + i as u64))
            .collect();
        let mut batches: Vec<RolloutBatch> = rollout_seeds
            .par_iter()
            .map(|&seed| collect_rollout(instance, &state.actor, epsilon, seed))
            .collect::<Result<_, _>>()?;
        batches.par_iter_mut().try_for_each(|batch| {
            rewards_to_go(batch);
            advantages(batch, &state.critic)
        })?;

        // Actor update(s); snapshot first so the divergence guard can skip
        // the whole episode's update.
        let actor_snapshot = state.actor.snapshot();
        let adam_snapshot = state.actor_adam.clone();
        let mut grads = GradMap::new();
        for _ in 0..config.actor_steps {
            let mut g = Graph::new();
            let loss = actor_loss(
                &mut g,
                &batches,
                &state.actor,
                state.beta,
                config.kl_direction,
            )?;
            let loss_value = g.scalar_value(loss);
            if !loss_value.is_finite() {
                observer.on_snapshot(state, SnapshotReason::Diagnostic);
                return Err(PpoError::NumericFailure {
                    episode,
                    quantity: "actor loss".into(),
                });
            }
            g.backward(loss, &mut grads)?;
            drop(g);
            adam_step(
                &mut state.actor_adam,
                &mut state.actor.params_mut(),
                &mut grads,
            );
        }

        let observed_kl = mean_kl(&batches, &state.actor, config.kl_direction)?;
        if !observed_kl.is_finite() {
            observer.on_snapshot(state, SnapshotReason::Diagnostic);
            return Err(PpoError::NumericFailure {
                episode,
                quantity: "kl".into(),
            });
        }
        let guard_fired = observed_kl > config.divergence_guard * config.delta;
        if guard_fired {
            state.actor.restore(&actor_snapshot);
            state.actor_adam = adam_snapshot;
            state.beta *= 2.0;
        } else {
            state.beta = update_beta(state.beta, observed_kl, config.delta);
        }

        // Critic regression; the logged loss is the pre-update fit on this
        // episode's batch.
        let mut logged_critic_loss = f64::NAN;
        for l in 0..config.critic_steps {
            let mut g = Graph::new();
            let loss = critic_loss(&mut g, &batches, &state.critic)?;
            let loss_value = g.scalar_value(loss);
            if l == 0 {
                logged_critic_loss = loss_value;
            }
            if !loss_value.is_finite() {
                observer.on_snapshot(state, SnapshotReason::Diagnostic);
                return Err(PpoError::NumericFailure {
                    episode,
                    quantity: "critic loss".into(),
                });
            }
            g.backward(loss, &mut grads)?;
            drop(g);
            adam_step(
                &mut state.critic_adam,
                &mut state.critic.params_mut(),
                &mut grads,
            );
        }

        let returns: Vec<i64> = batches.iter().map(RolloutBatch::total_return).collect();
        let mean_return = returns.iter().sum::<i64>() as f64 / returns.len() as f64;
        let best_return = *returns.iter().max().expect("N >= 1");
        let episode_best_makespan = (-best_return) as u64;
        let all_time = state
            .best_makespans
            .entry(entry.id.clone())
            .and_modify(|b| *b = (*b).min(episode_best_makespan))
            .or_insert(episode_best_makespan);
        let phi = episode_best_makespan as f64 / *all_time as f64;

        let log = EpisodeLog {
            episode,
            instance_id: entry.id.clone(),
            mean_return,
            best_return,
            phi,
            critic_loss: logged_critic_loss,
            kl: observed_kl,
            beta: state.beta,
            epsilon,
            guard_fired,
        };
        observer.on_episode(&log);
        logs.push(log);
        state.next_episode = episode + 1;

        if let Some(every) = config.checkpoint_every {
            if every > 0
                && state.next_episode.is_multiple_of(every)
                && state.next_episode < config.episodes
            {
                observer.on_snapshot(state, SnapshotReason::Periodic);
            }
        }
    }
    Ok(logs)
}

/// Deterministic rollout taking the masked argmax at every step, ties
/// broken by the lowest job index. Returns the schedule and its makespan.
pub fn greedy_solve(
    instance: &Instance,
    actor: &ActorNet,
) -> Result<(Vec<ScheduleRecord>, u64), PpoError> {
    let scale = actor.config.feature_scale(instance);
    let mut state: SchedulingState = reset(instance);
    while !state.is_done() {
        let features = encode(instance, &state, scale);
        let action_mask = mask(instance, &state);
        let mut g = Graph::new();
        let logp_var = actor_forward(&mut g, actor, &features, &action_mask)?;
        let logp = g.value(logp_var);
        let mut best: Option<(usize, f64)> = None;
        for (j, (&l, &allowed)) in logp.iter().zip(&action_mask.allowed).enumerate() {
            if !allowed {
                continue;
            }
            if best.is_none_or(|(_, bl)| l > bl) {
                best = Some((j, l));
            }
        }
        let (action, _) = best.expect("non-terminal state has an allowed action");
        drop(g);
        state = step(instance, &state, action)?.next_state;
    }
    let schedule = extract_schedule(&state)?.to_vec();
    Ok((schedule, state.makespan()))
}

//! Versioned checkpoint container.
//!
//! A checkpoint is a JSON document holding the model configuration, both
//! parameter sets as named row-major tensors in a stable order, the Adam
//! moments, and the training-loop position (episode counter, beta, per
//! instance best makespans, and the full train config). Two runs with the
//! same inputs write byte-identical files.

use crate::autodiff::{AdamState, Param, Tensor};
use crate::models::{ActorNet, CriticNet, ModelConfig};
use crate::ppo::{TrainConfig, TrainState};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use thiserror::Error;

/// Bumped on any incompatible change to the on-disk layout.
pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    FormatVersion { found: u32, supported: u32 },
    #[error("checkpoint parameter {index}: expected {expected:?}, found {found:?}")]
    ParamMismatch {
        index: usize,
        expected: String,
        found: String,
    },
    #[error("checkpoint has {found} {section} tensors, the model needs {expected}")]
    ParamCount {
        section: &'static str,
        expected: usize,
        found: usize,
    },
}

/// One parameter as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

fn to_named(params: &[&Param]) -> Vec<NamedTensor> {
    params
        .iter()
        .map(|p| NamedTensor {
            name: p.name().to_string(),
            shape: p.value().shape().to_vec(),
            data: p.value().data().to_vec(),
        })
        .collect()
}

fn restore_named(
    params: Vec<&mut Param>,
    saved: &[NamedTensor],
    section: &'static str,
) -> Result<(), CheckpointError> {
    if params.len() != saved.len() {
        return Err(CheckpointError::ParamCount {
            section,
            expected: params.len(),
            found: saved.len(),
        });
    }
    for (index, (param, tensor)) in params.into_iter().zip(saved).enumerate() {
        if param.name() != tensor.name || param.value().shape() != tensor.shape.as_slice() {
            return Err(CheckpointError::ParamMismatch {
                index,
                expected: format!("{} {:?}", param.name(), param.value().shape()),
                found: format!("{} {:?}", tensor.name, tensor.shape),
            });
        }
        let value = Tensor::new(tensor.shape.clone(), tensor.data.clone()).map_err(|_| {
            CheckpointError::ParamMismatch {
                index,
                expected: format!("{} {:?}", param.name(), param.value().shape()),
                found: format!("{} with {} values", tensor.name, tensor.data.len()),
            }
        })?;
        param.set_value(value);
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub next_episode: usize,
    pub beta: f64,
    pub actor: Vec<NamedTensor>,
    pub critic: Vec<NamedTensor>,
    pub actor_adam: AdamState,
    pub critic_adam: AdamState,
    pub best_makespans: BTreeMap<String, u64>,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, train: &TrainConfig) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model: state.actor.config,
            train: train.clone(),
            next_episode: state.next_episode,
            beta: state.beta,
            actor: to_named(&state.actor.params()),
            critic: to_named(&state.critic.params()),
            actor_adam: state.actor_adam.clone(),
            critic_adam: state.critic_adam.clone(),
            best_makespans: state
                .best_makespans
                .iter()
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }

    pub fn write<W: Write>(&self, out: W) -> Result<(), CheckpointError> {
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn read<R: Read>(mut input: R) -> Result<Self, CheckpointError> {
        // Slurp first: from_reader on an unbuffered source reads one byte
        // per syscall, which is ruinous at checkpoint sizes.
        let mut buf = Vec::new();
        input.read_to_end(&mut buf)?;
        let checkpoint: Checkpoint = serde_json::from_slice(&buf)?;
        if checkpoint.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(CheckpointError::FormatVersion {
                found: checkpoint.format_version,
                supported: CHECKPOINT_FORMAT_VERSION,
            });
        }
        Ok(checkpoint)
    }

    /// Rebuilds just the policy network (for solving and benchmarking).
    pub fn build_actor(&self) -> Result<ActorNet, CheckpointError> {
        let mut actor = ActorNet::zeroed(self.model);
        restore_named(actor.params_mut(), &self.actor, "actor")?;
        Ok(actor)
    }

    /// Rebuilds the full training state (for resuming).
    pub fn into_train_state(&self) -> Result<TrainState, CheckpointError> {
        let mut actor = ActorNet::zeroed(self.model);
        restore_named(actor.params_mut(), &self.actor, "actor")?;
        let mut critic = CriticNet::zeroed(self.model);
        restore_named(critic.params_mut(), &self.critic, "critic")?;
        Ok(TrainState {
            actor,
            critic,
            actor_adam: self.actor_adam.clone(),
            critic_adam: self.critic_adam.clone(),
            beta: self.beta,
            next_episode: self.next_episode,
            best_makespans: self
                .best_makespans
                .iter()
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::parse_instance;
    use crate::models::ModelConfig;
    use crate::ppo::{train, DatasetEntry, NullObserver};

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            hidden1: 4,
            hidden2: 5,
            ffn_widths: [6, 3, 2],
            feature_width: 3,
            time_scale_mean: 10.0,
        }
    }

    fn trained_state() -> (TrainState, TrainConfig) {
        let config = TrainConfig {
            episodes: 2,
            rollouts_per_episode: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let mut state = TrainState::fresh(tiny_model(), &config).unwrap();
        let dataset = vec![DatasetEntry {
            id: "t".into(),
            instance: parse_instance("2 2\n0 3 1 2\n1 4 0 1\n").unwrap(),
        }];
        train(&mut state, &dataset, &config, &mut NullObserver).unwrap();
        (state, config)
    }

    #[test]
    fn round_trips_state() {
        let (state, config) = trained_state();
        let checkpoint = Checkpoint::from_state(&state, &config);
        let mut buf = Vec::new();
        checkpoint.write(&mut buf).unwrap();
        let loaded = Checkpoint::read(buf.as_slice()).unwrap();
        let restored = loaded.into_train_state().unwrap();
        assert_eq!(restored.next_episode, state.next_episode);
        assert_eq!(restored.beta, state.beta);
        assert_eq!(restored.best_makespans, state.best_makespans);
        for (a, b) in restored.actor.params().iter().zip(state.actor.params()) {
            assert_eq!(a.value(), b.value());
            assert_eq!(a.name(), b.name());
        }
        for (a, b) in restored.critic.params().iter().zip(state.critic.params()) {
            assert_eq!(a.value(), b.value());
        }
    }

    #[test]
    fn serialization_is_byte_stable() {
        let (state, config) = trained_state();
        let mut a = Vec::new();
        Checkpoint::from_state(&state, &config)
            .write(&mut a)
            .unwrap();
        let mut b = Vec::new();
        Checkpoint::from_state(&state, &config)
            .write(&mut b)
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rejects_future_format_versions() {
        let (state, config) = trained_state();
        let mut checkpoint = Checkpoint::from_state(&state, &config);
        checkpoint.format_version = 999;
        let mut buf = Vec::new();
        serde_json::to_writer(&mut buf, &checkpoint).unwrap();
        assert!(matches!(
            Checkpoint::read(buf.as_slice()),
            Err(CheckpointError::FormatVersion { found: 999, .. })
        ));
    }

    #[test]
    fn rejects_mismatched_models() {
        let (state, config) = trained_state();
        let mut checkpoint = Checkpoint::from_state(&state, &config);
        checkpoint.model.hidden1 = 7;
        assert!(matches!(
            checkpoint.build_actor(),
            Err(CheckpointError::ParamMismatch { .. })
        ));
    }
}

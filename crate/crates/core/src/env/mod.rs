//! Concrete environments and the identifiers used to select them.

pub mod driving;
pub mod mismatch;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConfoundedMdpModel, MediatorModel};
use crate::policy::TabularPolicy;

pub use driving::{
    behavioral_policy_driving, build_driving_model, driving_latent_dist, driving_step, DrivingNoise, DrivingState,
};
pub use mismatch::{build_mediator_toy_env, build_mismatch_env};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvId {
    Driving,
    Mismatch,
    MediatorToy,
}

impl EnvId {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvId::Driving => "driving",
            EnvId::Mismatch => "mismatch",
            EnvId::MediatorToy => "mediator-toy",
        }
    }
}

impl fmt::Display for EnvId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "driving" => Ok(EnvId::Driving),
            "mismatch" => Ok(EnvId::Mismatch),
            "mediator-toy" => Ok(EnvId::MediatorToy),
            other => Err(Error::Config(format!("unknown environment '{other}'"))),
        }
    }
}

/// A ground-truth model bundled with its logging policy and optional mediator.
#[derive(Debug, Clone)]
pub struct Environment {
    pub id: EnvId,
    pub model: ConfoundedMdpModel,
    pub mediator: Option<MediatorModel>,
    pub behavioral: TabularPolicy,
}

impl Environment {
    pub fn build(id: EnvId, horizon: usize) -> Result<Self> {
        let (model, mediator, behavioral) = match id {
            EnvId::Driving => (build_driving_model(horizon)?, None, driving::driving_behavioral()?),
            EnvId::Mismatch => (build_mismatch_env(horizon)?, None, mismatch::mismatch_behavioral()?),
            EnvId::MediatorToy => {
                let (model, med) = build_mediator_toy_env(horizon)?;
                (model, Some(med), mismatch::mismatch_behavioral()?)
            }
        };
        Ok(Self {
            id,
            model,
            mediator,
            behavioral,
        })
    }

    /// Encodes a state given by its components (`[position, velocity]` for
    /// driving, `[x]` for the two-state environments).
    pub fn encode_state(&self, components: &[i64]) -> Result<usize> {
        match (self.id, components) {
            (EnvId::Driving, &[p, v]) => Ok(DrivingState::new(p, v)?.encode()),
            (EnvId::Mismatch | EnvId::MediatorToy, &[x]) if (0..2).contains(&x) => Ok(x as usize),
            _ => Err(Error::Encoding(format!(
                "state {components:?} is not valid for {}",
                self.id
            ))),
        }
    }

    pub fn decode_state(&self, x: usize) -> Result<Vec<i64>> {
        self.model.check_state(x)?;
        match self.id {
            EnvId::Driving => {
                let s = DrivingState::decode(x)?;
                Ok(vec![s.position, s.velocity])
            }
            _ => Ok(vec![x as i64]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in [EnvId::Driving, EnvId::Mismatch, EnvId::MediatorToy] {
            assert_eq!(id.as_str().parse::<EnvId>().unwrap(), id);
        }
        assert!("highway".parse::<EnvId>().is_err());
    }

    #[test]
    fn state_components() {
        let env = Environment::build(EnvId::Driving, 2).unwrap();
        let x = env.encode_state(&[33, 2]).unwrap();
        assert_eq!(env.decode_state(x).unwrap(), vec![3, 2]);
        assert!(env.encode_state(&[0]).is_err());
        let toy = Environment::build(EnvId::MediatorToy, 2).unwrap();
        assert_eq!(toy.encode_state(&[1]).unwrap(), 1);
        assert!(toy.encode_state(&[2]).is_err());
        assert!(toy.mediator.is_some());
    }
}

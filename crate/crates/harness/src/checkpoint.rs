//! Checkpoint files: 8-byte magic, little-endian `u32` version, then a
//! bincode payload holding the run config (as flat TOML text) and the full
//! agent state.

use std::path::Path;

use bincode::Options;
use bro_core::agent::AgentState;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 8] = b"BROCKPT\0";
pub const VERSION: u32 = 1;
/// Largest payload accepted when decoding.
pub const MAX_PAYLOAD: u64 = 4 << 30;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub agent: AgentState<f32>,
}

#[derive(Serialize, Deserialize)]
struct Payload {
    config: String,
    agent: AgentState<f32>,
}

fn codec() -> impl Options {
    bincode::DefaultOptions::new().with_fixint_encoding()
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let payload = Payload {
            config: self.config.to_toml_string(),
            agent: self.agent.clone(),
        };
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend(codec().serialize(&payload).expect("agent state serializes"));
        out
    }

    pub fn from_bytes(bytes: &[u8], limit: u64) -> std::result::Result<Self, String> {
        let header = MAGIC.len() + 4;
        if bytes.len() < header || &bytes[..MAGIC.len()] != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(bytes[MAGIC.len()..header].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let body = &bytes[header..];
        if body.len() as u64 > limit {
            return Err(format!("payload of {} bytes exceeds limit {limit}", body.len()));
        }
        let payload: Payload = codec()
            .with_limit(limit)
            .deserialize(body)
            .map_err(|e| format!("undecodable payload: {e}"))?;
        let config = RunConfig::from_toml_str(&payload.config, None).map_err(|e| e.to_string())?;
        payload.agent.validate().map_err(|e| e.to_string())?;
        if payload.agent.hyper != config.hyper {
            return Err("agent hyperparameters disagree with the stored config".into());
        }
        let env = config.env.build().map_err(|e| e.to_string())?;
        let spec = env.spec();
        if (payload.agent.obs_dim(), payload.agent.act_dim()) != (spec.obs_dim, spec.act_dim) {
            return Err("agent dimensions do not match the stored env".into());
        }
        Ok(Checkpoint {
            config,
            agent: payload.agent,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes()).map_err(HarnessError::io(&tmp))?;
        std::fs::rename(&tmp, path).map_err(HarnessError::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(HarnessError::io(path))?;
        Self::from_bytes(&bytes, MAX_PAYLOAD).map_err(|message| HarnessError::Corrupt {
            path: path.to_path_buf(),
            message,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{EnvConfig, Preset};
    use bro_core::networks::ModelSize;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Checkpoint {
        let mut config = RunConfig::new(EnvConfig::default_for("pendulum").unwrap(), Preset::BroFast);
        config.hyper.critic_size = ModelSize::new(1, 16);
        config.hyper.actor_size = ModelSize::new(1, 8);
        config.hyper.num_quantiles = 5;
        let agent = AgentState::new(config.hyper.clone(), 3, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        Checkpoint { config, agent }
    }

    #[test]
    fn round_trip_through_disk() {
        let ckpt = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("final.ckpt");
        ckpt.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);
    }

    #[test]
    fn rejects_damaged_bytes() {
        let bytes = small().to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], MAX_PAYLOAD).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..5], MAX_PAYLOAD).is_err());
        assert!(Checkpoint::from_bytes(&bytes, 16).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[8] = 9;
        assert!(Checkpoint::from_bytes(&wrong_version, MAX_PAYLOAD).is_err());
        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&wrong_magic, MAX_PAYLOAD).is_err());
        // Flipping payload bytes must never panic.
        for i in (12..bytes.len()).step_by(97) {
            let mut b = bytes.clone();
            b[i] ^= 0xA5;
            let _ = Checkpoint::from_bytes(&b, MAX_PAYLOAD);
        }
    }
}

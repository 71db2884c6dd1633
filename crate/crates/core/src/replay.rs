//! Uniform experience replay over a fixed-capacity ring.

use bincode::Options;
use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Real, Result};

pub const DEFAULT_CAPACITY: usize = 1_000_000;

const MAGIC: &[u8; 8] = b"BROREPLY";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct Transition<F: Real> {
    pub obs: Vec<F>,
    pub action: Vec<F>,
    pub reward: F,
    pub next_obs: Vec<F>,
    pub terminated: bool,
    pub truncated: bool,
}

/// Column-stacked sample. `not_done` is `1 - terminated`; truncation still
/// bootstraps.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<F> {
    pub obs: Array2<F>,
    pub actions: Array2<F>,
    pub rewards: Array1<F>,
    pub next_obs: Array2<F>,
    pub not_done: Array1<F>,
    pub indices: Vec<usize>,
}

impl<F> Batch<F> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Storage is struct-of-arrays; slot `i` of each array holds one transition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct ReplayBuffer<F: Real> {
    capacity: usize,
    obs_dim: usize,
    act_dim: usize,
    next: usize,
    obs: Vec<F>,
    actions: Vec<F>,
    rewards: Vec<F>,
    next_obs: Vec<F>,
    terminated: Vec<bool>,
    truncated: Vec<bool>,
}

impl<F: Real> ReplayBuffer<F> {
    pub fn new(capacity: usize, obs_dim: usize, act_dim: usize) -> Result<Self> {
        if capacity == 0 || obs_dim == 0 || act_dim == 0 {
            return Err(Error::Config("replay capacity and widths must be positive".into()));
        }
        Ok(ReplayBuffer {
            capacity,
            obs_dim,
            act_dim,
            next: 0,
            obs: Vec::new(),
            actions: Vec::new(),
            rewards: Vec::new(),
            next_obs: Vec::new(),
            terminated: Vec::new(),
            truncated: Vec::new(),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn act_dim(&self) -> usize {
        self.act_dim
    }

    pub fn add(&mut self, t: Transition<F>) -> Result<()> {
        if t.obs.len() != self.obs_dim {
            return Err(Error::shape("transition obs", self.obs_dim, t.obs.len()));
        }
        if t.next_obs.len() != self.obs_dim {
            return Err(Error::shape("transition next_obs", self.obs_dim, t.next_obs.len()));
        }
        if t.action.len() != self.act_dim {
            return Err(Error::shape("transition action", self.act_dim, t.action.len()));
        }
        let all = t.obs.iter().chain(&t.next_obs).chain(&t.action).chain(std::iter::once(&t.reward));
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite transition".into()));
        }
        if t.action.iter().any(|a| a.abs() > F::one()) {
            return Err(Error::Domain("transition action outside [-1, 1]".into()));
        }
        if self.len() < self.capacity {
            self.obs.extend_from_slice(&t.obs);
            self.actions.extend_from_slice(&t.action);
            self.rewards.push(t.reward);
            self.next_obs.extend_from_slice(&t.next_obs);
            self.terminated.push(t.terminated);
            self.truncated.push(t.truncated);
        } else {
            let i = self.next;
            let (o, a) = (self.obs_dim, self.act_dim);
            self.obs[i * o..(i + 1) * o].copy_from_slice(&t.obs);
            self.actions[i * a..(i + 1) * a].copy_from_slice(&t.action);
            self.rewards[i] = t.reward;
            self.next_obs[i * o..(i + 1) * o].copy_from_slice(&t.next_obs);
            self.terminated[i] = t.terminated;
            self.truncated[i] = t.truncated;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    fn slot(&self, age: usize) -> usize {
        if self.len() < self.capacity {
            age
        } else {
            (self.next + age) % self.capacity
        }
    }

    /// Transition by age, 0 being the oldest still stored.
    pub fn get(&self, age: usize) -> Option<Transition<F>> {
        (age < self.len()).then(|| self.at_slot(self.slot(age)))
    }

    fn at_slot(&self, i: usize) -> Transition<F> {
        let (o, a) = (self.obs_dim, self.act_dim);
        Transition {
            obs: self.obs[i * o..(i + 1) * o].to_vec(),
            action: self.actions[i * a..(i + 1) * a].to_vec(),
            reward: self.rewards[i],
            next_obs: self.next_obs[i * o..(i + 1) * o].to_vec(),
            terminated: self.terminated[i],
            truncated: self.truncated[i],
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Transition<F>> + '_ {
        (0..self.len()).map(|age| self.at_slot(self.slot(age)))
    }

    /// Uniform storage slots drawn with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..batch_size).map(|_| rng.random_range(0..self.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Result<Batch<F>> {
        let indices = self.sample_indices(batch_size, rng)?;
        Ok(self.gather(indices))
    }

    pub fn gather(&self, indices: Vec<usize>) -> Batch<F> {
        let (o, a) = (self.obs_dim, self.act_dim);
        let n = indices.len();
        let mut batch = Batch {
            obs: Array2::zeros((n, o)),
            actions: Array2::zeros((n, a)),
            rewards: Array1::zeros(n),
            next_obs: Array2::zeros((n, o)),
            not_done: Array1::zeros(n),
            indices,
        };
        for (row, &i) in batch.indices.iter().enumerate() {
            batch.obs.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.obs[i * o..(i + 1) * o]);
            batch.actions.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.actions[i * a..(i + 1) * a]);
            batch.next_obs.row_mut(row).as_slice_mut().unwrap().copy_from_slice(&self.next_obs[i * o..(i + 1) * o]);
            batch.rewards[row] = self.rewards[i];
            batch.not_done[row] = if self.terminated[i] { F::zero() } else { F::one() };
        }
        batch
    }

    fn validate(&self) -> Result<()> {
        let n = self.rewards.len();
        let consistent = self.capacity > 0
            && self.obs_dim > 0
            && self.act_dim > 0
            && n <= self.capacity
            && self.next < self.capacity
            && (n == self.capacity || self.next == n)
            && Some(self.obs.len()) == n.checked_mul(self.obs_dim)
            && Some(self.next_obs.len()) == n.checked_mul(self.obs_dim)
            && Some(self.actions.len()) == n.checked_mul(self.act_dim)
            && self.terminated.len() == n
            && self.truncated.len() == n;
        if !consistent {
            return Err(Error::Corrupt("inconsistent replay buffer layout".into()));
        }
        let finite = self.obs.iter().chain(&self.next_obs).chain(&self.actions).chain(&self.rewards);
        if finite.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Corrupt("non-finite replay contents".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + self.len() * (2 * self.obs_dim + self.act_dim + 3) * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        bincode::DefaultOptions::new()
            .serialize_into(&mut out, self)
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(out)
    }

    /// Decodes a buffer written by [`ReplayBuffer::to_bytes`]; `limit` caps
    /// the number of payload bytes the decoder may allocate.
    pub fn from_bytes(bytes: &[u8], limit: u64) -> Result<Self> {
        let payload = bytes
            .strip_prefix(MAGIC.as_slice())
            .ok_or_else(|| Error::Corrupt("bad replay magic".into()))?;
        if payload.len() < 4 {
            return Err(Error::Corrupt("truncated replay header".into()));
        }
        if payload.len() as u64 > limit {
            return Err(Error::Corrupt(format!("replay payload exceeds {limit} bytes")));
        }
        let version = u32::from_le_bytes(payload[..4].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Corrupt(format!("unsupported replay version {version}")));
        }
        let buffer: Self = bincode::DefaultOptions::new()
            .with_limit(limit)
            .deserialize(&payload[4..])
            .map_err(|e| Error::Corrupt(e.to_string()))?;
        buffer.validate()?;
        Ok(buffer)
    }
}

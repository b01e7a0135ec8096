//! Tabular stochastic policies.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{check_row, AugmentedState};
use crate::rng::sample_categorical;

/// What a policy table is indexed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyKind {
    /// Online/nominal policies: rows indexed by the augmented state `(x, k)`
    /// for `k` in `0..=horizon`. Never sees the latent variable.
    LatentBlind { n_states: usize, horizon: usize },
    /// Behavioral (logging) policies: rows indexed by `(x, w)`.
    LatentAware { n_states: usize, n_latent: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    kind: PolicyKind,
    n_actions: usize,
    probs: Vec<f64>,
}

impl TabularPolicy {
    /// Builds a latent-blind policy from a row function `(x, k) -> π(·|x, k)`.
    pub fn latent_blind<F>(n_states: usize, horizon: usize, n_actions: usize, mut row: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut probs = Vec::with_capacity((horizon + 1) * n_states * n_actions);
        for k in 0..=horizon {
            for x in 0..n_states {
                let r = row(x, k);
                check_len(&r, n_actions)?;
                check_row(&r, || format!("policy row (x={x}, k={k})"))?;
                probs.extend_from_slice(&r);
            }
        }
        Ok(Self {
            kind: PolicyKind::LatentBlind { n_states, horizon },
            n_actions,
            probs,
        })
    }

    /// Builds a latent-aware policy from a row function `(x, w) -> π^b(·|x, w)`.
    pub fn latent_aware<F>(n_states: usize, n_latent: usize, n_actions: usize, mut row: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut probs = Vec::with_capacity(n_states * n_latent * n_actions);
        for x in 0..n_states {
            for w in 0..n_latent {
                let r = row(x, w);
                check_len(&r, n_actions)?;
                check_row(&r, || format!("behavioral row (x={x}, w={w})"))?;
                probs.extend_from_slice(&r);
            }
        }
        Ok(Self {
            kind: PolicyKind::LatentAware { n_states, n_latent },
            n_actions,
            probs,
        })
    }

    /// The uniform latent-blind policy.
    pub fn uniform(n_states: usize, horizon: usize, n_actions: usize) -> Self {
        let p = 1.0 / n_actions as f64;
        Self {
            kind: PolicyKind::LatentBlind { n_states, horizon },
            n_actions,
            probs: vec![p; (horizon + 1) * n_states * n_actions],
        }
    }

    pub fn kind(&self) -> PolicyKind {
        self.kind
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn is_latent_blind(&self) -> bool {
        matches!(self.kind, PolicyKind::LatentBlind { .. })
    }

    /// `π(·|x, k)` for a latent-blind policy.
    pub fn row(&self, y: AugmentedState) -> Result<&[f64]> {
        match self.kind {
            PolicyKind::LatentBlind { n_states, horizon } => {
                if y.x >= n_states || y.k > horizon {
                    return Err(Error::Config(format!("policy has no row for {y}")));
                }
                let start = (y.k * n_states + y.x) * self.n_actions;
                Ok(&self.probs[start..start + self.n_actions])
            }
            PolicyKind::LatentAware { .. } => Err(Error::Config(
                "latent-aware policy queried without a latent value".into(),
            )),
        }
    }

    /// `π^b(·|x, w)` for a latent-aware policy.
    pub fn aware_row(&self, x: usize, w: usize) -> Result<&[f64]> {
        match self.kind {
            PolicyKind::LatentAware { n_states, n_latent } => {
                if x >= n_states || w >= n_latent {
                    return Err(Error::Encoding(format!("behavioral policy has no row (x={x}, w={w})")));
                }
                let start = (x * n_latent + w) * self.n_actions;
                Ok(&self.probs[start..start + self.n_actions])
            }
            PolicyKind::LatentBlind { .. } => Err(Error::Config(
                "latent-blind policy cannot be indexed by a latent value".into(),
            )),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, y: AugmentedState, rng: &mut R) -> Result<usize> {
        Ok(sample_categorical(self.row(y)?, rng))
    }

    pub fn sample_aware<R: Rng + ?Sized>(&self, x: usize, w: usize, rng: &mut R) -> Result<usize> {
        Ok(sample_categorical(self.aware_row(x, w)?, rng))
    }
}

fn check_len(row: &[f64], n_actions: usize) -> Result<()> {
    if row.len() != n_actions {
        return Err(Error::Encoding(format!(
            "policy row has {} entries, expected {n_actions}",
            row.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_rows_sum_to_one() {
        let pi = TabularPolicy::uniform(4, 3, 5);
        for k in 0..=3 {
            for x in 0..4 {
                let s: f64 = pi.row(AugmentedState::new(x, k)).unwrap().iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let err = TabularPolicy::latent_blind(2, 1, 2, |_, _| vec![0.5, 0.6]).unwrap_err();
        assert!(matches!(err, Error::NotNormalized { .. }));
    }

    #[test]
    fn blind_policy_refuses_latent_index() {
        let pi = TabularPolicy::uniform(2, 1, 2);
        assert!(pi.aware_row(0, 0).is_err());
        let b = TabularPolicy::latent_aware(2, 2, 2, |_, _| vec![0.5, 0.5]).unwrap();
        assert!(b.row(AugmentedState::new(0, 1)).is_err());
        assert!(b.aware_row(1, 1).is_ok());
    }
}

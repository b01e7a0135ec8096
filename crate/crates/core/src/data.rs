//! Offline episode datasets: generation under a latent-aware behavioral
//! policy, conversion to the absorbing process, and JSON-lines storage.

use std::io::{BufRead, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AugmentedState, ConfoundedMdpModel, MediatorModel, VisibleKernel};
use crate::policy::TabularPolicy;
use crate::rng::{split_seed, stream};
use crate::tables::OfflineTables;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetForm {
    /// Visible states as logged.
    Raw,
    /// States frozen after the first unsafe visit, with remaining time attached.
    Converted,
}

/// One logged episode. All sequences have length `H + 1`.
///
/// Latent values are never recorded. In converted form `x` holds the frozen
/// states and `k` the remaining time `H - t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Episode {
    pub seed: u64,
    pub x: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<Vec<usize>>,
    pub u: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<Vec<usize>>,
}

impl Episode {
    pub fn augmented(&self, t: usize) -> AugmentedState {
        let horizon = self.x.len() - 1;
        AugmentedState::at_time(self.x[t], t, horizon)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeDataset {
    pub form: DatasetForm,
    pub horizon: usize,
    pub episodes: Vec<Episode>,
}

impl EpisodeDataset {
    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// True when every episode carries mediators (vacuously so when empty).
    pub fn has_mediators(&self) -> bool {
        self.episodes.iter().all(|e| e.m.is_some())
    }

    /// One episode per line, in dataset order.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for ep in &self.episodes {
            serde_json::to_writer(&mut out, ep)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a JSON-lines dataset. The form follows from the presence of `k`
    /// and the horizon from the sequence lengths; both must be consistent.
    pub fn read_jsonl<R: BufRead>(input: R) -> Result<Self> {
        let mut episodes = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ep: Episode = serde_json::from_str(&line).map_err(|e| Error::Form(format!("line {}: {e}", i + 1)))?;
            episodes.push(ep);
        }
        let Some(first) = episodes.first() else {
            return Ok(Self {
                form: DatasetForm::Raw,
                horizon: 0,
                episodes,
            });
        };
        if first.x.is_empty() {
            return Err(Error::Form("episode with no states".into()));
        }
        let horizon = first.x.len() - 1;
        let form = if first.k.is_some() {
            DatasetForm::Converted
        } else {
            DatasetForm::Raw
        };
        for (i, ep) in episodes.iter().enumerate() {
            let lens_ok = ep.x.len() == horizon + 1
                && ep.u.len() == horizon + 1
                && ep.m.as_ref().is_none_or(|m| m.len() == horizon + 1)
                && ep.k.as_ref().is_none_or(|k| k.len() == horizon + 1);
            if !lens_ok {
                return Err(Error::Form(format!("episode {i} has inconsistent sequence lengths")));
            }
            if ep.k.is_some() != (form == DatasetForm::Converted) {
                return Err(Error::Form(format!("episode {i} mixes raw and converted form")));
            }
            if let Some(k) = &ep.k {
                if k.iter().enumerate().any(|(t, &kt)| kt != horizon - t) {
                    return Err(Error::Form(format!("episode {i} has remaining times other than H - t")));
                }
            }
        }
        Ok(Self {
            form,
            horizon,
            episodes,
        })
    }
}

/// Logs `n_episodes` episodes from `x0`. At every step the latent value is
/// drawn from `P(w | x)`, the action from the behavioral policy given both,
/// the mediator (when present) from `P(m | x, u)`, and the next state from the
/// true kernel. Episode `i` uses its own stream derived from `seed`.
pub fn generate_offline(
    model: &ConfoundedMdpModel,
    mediator: Option<&MediatorModel>,
    behavioral: &TabularPolicy,
    n_episodes: usize,
    x0: usize,
    seed: u64,
) -> Result<EpisodeDataset> {
    model.check_state(x0)?;
    if behavioral.is_latent_blind() {
        return Err(Error::Config(
            "offline data needs a latent-aware behavioral policy".into(),
        ));
    }
    let h = model.horizon();
    let episodes = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let ep_seed = split_seed(seed, i as u64);
            let mut rng = stream(ep_seed);
            let mut xs = Vec::with_capacity(h + 1);
            let mut us = Vec::with_capacity(h + 1);
            let mut ms = mediator.map(|_| Vec::with_capacity(h + 1));
            let mut x = x0;
            for t in 0..=h {
                xs.push(x);
                let w = model.sample_latent(x, &mut rng);
                let u = behavioral.sample_aware(x, w, &mut rng)?;
                us.push(u);
                let next = match (mediator, ms.as_mut()) {
                    (Some(med), Some(ms)) => {
                        let m = med.sample_mediator(x, u, &mut rng);
                        ms.push(m);
                        (t < h).then(|| med.sample_next(x, m, w, &mut rng))
                    }
                    _ => (t < h).then(|| model.sample_next(x, u, w, &mut rng)),
                };
                if let Some(next) = next {
                    x = next;
                }
            }
            Ok(Episode {
                seed: ep_seed,
                x: xs,
                k: None,
                u: us,
                m: ms,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodeDataset {
        form: DatasetForm::Raw,
        horizon: h,
        episodes,
    })
}

/// Freezes each episode at its first unsafe state and attaches remaining time.
///
/// `x̂_0 = x_0`; `x̂_{t+1} = x_{t+1}` while `x̂_t` is safe and `x̂_t` otherwise.
/// Actions and mediators are copied unchanged.
pub fn convert_dataset(raw: &EpisodeDataset, safety: impl Fn(usize) -> bool + Sync) -> Result<EpisodeDataset> {
    if raw.form != DatasetForm::Raw {
        return Err(Error::Form("dataset is already converted".into()));
    }
    let h = raw.horizon;
    let episodes = raw
        .episodes
        .par_iter()
        .map(|ep| {
            let mut frozen = Vec::with_capacity(h + 1);
            frozen.push(ep.x[0]);
            for t in 0..h {
                let cur = frozen[t];
                frozen.push(if safety(cur) { ep.x[t + 1] } else { cur });
            }
            Episode {
                seed: ep.seed,
                x: frozen,
                k: Some((0..=h).map(|t| h - t).collect()),
                u: ep.u.clone(),
                m: ep.m.clone(),
            }
        })
        .collect();
    Ok(EpisodeDataset {
        form: DatasetForm::Converted,
        horizon: h,
        episodes,
    })
}

/// Count-ratio conditional tables over augmented states.
pub fn empirical_offline_tables(converted: &EpisodeDataset, n_actions: usize) -> Result<OfflineTables> {
    OfflineTables::from_dataset(converted, n_actions)
}

/// Count-ratio estimate of `P_offline(x' | x, u)` from a raw dataset.
pub fn empirical_visible_kernel(raw: &EpisodeDataset, n_states: usize, n_actions: usize) -> Result<VisibleKernel> {
    if raw.form != DatasetForm::Raw {
        return Err(Error::Form("visible kernel needs raw episodes".into()));
    }
    let mut counts = vec![0u64; n_states * n_actions * n_states];
    for ep in &raw.episodes {
        for t in 0..raw.horizon {
            let (x, u, xn) = (ep.x[t], ep.u[t], ep.x[t + 1]);
            if x >= n_states || xn >= n_states || u >= n_actions {
                return Err(Error::Encoding(format!("episode {} has out-of-range entries", ep.seed)));
            }
            counts[(x * n_actions + u) * n_states + xn] += 1;
        }
    }
    Ok(VisibleKernel::from_counts(n_states, n_actions, &counts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{build_mediator_toy_env, build_mismatch_env, mismatch::mismatch_behavioral};

    fn raw_episode(x: Vec<usize>) -> Episode {
        let n = x.len();
        Episode {
            seed: 0,
            x,
            k: None,
            u: vec![0; n],
            m: None,
        }
    }

    #[test]
    fn zero_episodes_is_empty() {
        let m = build_mismatch_env(3).unwrap();
        let d = generate_offline(&m, None, &mismatch_behavioral().unwrap(), 0, 0, 1).unwrap();
        assert!(d.is_empty());
        let mut buf = Vec::new();
        d.write_jsonl(&mut buf).unwrap();
        assert!(buf.is_empty());
    }

    #[test]
    fn generation_is_deterministic_and_shaped() {
        let (m, med) = build_mediator_toy_env(3).unwrap();
        let b = mismatch_behavioral().unwrap();
        let a = generate_offline(&m, Some(&med), &b, 200, 0, 42).unwrap();
        let c = generate_offline(&m, Some(&med), &b, 200, 0, 42).unwrap();
        assert_eq!(a, c);
        assert!(a.has_mediators());
        for ep in &a.episodes {
            assert_eq!(ep.x.len(), 4);
            assert_eq!(ep.u.len(), 4);
            assert_eq!(ep.m.as_ref().unwrap().len(), 4);
        }
        let other = generate_offline(&m, Some(&med), &b, 200, 0, 43).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn latent_blind_behavior_is_rejected() {
        let m = build_mismatch_env(2).unwrap();
        let pi = TabularPolicy::uniform(2, 2, 2);
        assert!(generate_offline(&m, None, &pi, 1, 0, 0).is_err());
    }

    #[test]
    fn conversion_identity_on_safe_episodes() {
        let raw = EpisodeDataset {
            form: DatasetForm::Raw,
            horizon: 3,
            episodes: vec![raw_episode(vec![0, 0, 0, 0])],
        };
        let conv = convert_dataset(&raw, |x| x == 0).unwrap();
        assert_eq!(conv.episodes[0].x, vec![0, 0, 0, 0]);
        assert_eq!(conv.episodes[0].k, Some(vec![3, 2, 1, 0]));
        assert!(matches!(convert_dataset(&conv, |x| x == 0), Err(Error::Form(_))));
    }

    #[test]
    fn conversion_freezes_at_first_unsafe_state() {
        // Safe states are 0 and 1; the episode becomes unsafe at t = 2 and later recovers.
        let raw = EpisodeDataset {
            form: DatasetForm::Raw,
            horizon: 5,
            episodes: vec![raw_episode(vec![0, 1, 2, 3, 0, 1])],
        };
        let conv = convert_dataset(&raw, |x| x <= 1).unwrap();
        assert_eq!(conv.episodes[0].x, vec![0, 1, 2, 2, 2, 2]);
        assert_eq!(conv.len(), raw.len());
        assert_eq!(conv.episodes[0].u, raw.episodes[0].u);
    }

    #[test]
    fn jsonl_round_trip_and_form_detection() {
        let (m, med) = build_mediator_toy_env(2).unwrap();
        let raw = generate_offline(&m, Some(&med), &mismatch_behavioral().unwrap(), 5, 0, 9).unwrap();
        let conv = convert_dataset(&raw, |x| x == 0).unwrap();
        for d in [&raw, &conv] {
            let mut buf = Vec::new();
            d.write_jsonl(&mut buf).unwrap();
            let back = EpisodeDataset::read_jsonl(buf.as_slice()).unwrap();
            assert_eq!(&back, d);
        }
        let mut buf = Vec::new();
        raw.write_jsonl(&mut buf).unwrap();
        let line = String::from_utf8(buf).unwrap().lines().next().unwrap().to_string();
        assert!(line.starts_with("{\"seed\":"));
        assert!(line.contains("\"m\":["));
    }

    #[test]
    fn malformed_jsonl_is_a_form_error() {
        let bad = b"{\"seed\":1,\"x\":[0,0],\"u\":[0]}\n";
        assert!(matches!(EpisodeDataset::read_jsonl(&bad[..]), Err(Error::Form(_))));
        let garbage = b"not json\n";
        assert!(matches!(EpisodeDataset::read_jsonl(&garbage[..]), Err(Error::Form(_))));
    }
}

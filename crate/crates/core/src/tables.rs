//! Conditional offline tables over augmented states: `P(u | ŷ)`,
//! `P(m | u, ŷ)`, `P(ŷ' | ŷ, u, m)` and `P(ŷ' | ŷ, u)`.
//!
//! Tables come either from converted data (count ratios) or from the
//! ground-truth model (exact offline statistics of the absorbing process).
//! Conditioning cells with no support are absent; lookups on them fail with a
//! positivity error that names the cell.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::data::{DatasetForm, EpisodeDataset};
use crate::error::{Error, Result};
use crate::model::{AugmentedState, ConfoundedMdpModel, MediatorModel};
use crate::policy::TabularPolicy;

/// A conditional distribution over outcomes `O`, sorted by outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditional<O> {
    /// Number of observations behind the row; `None` for exact rows.
    pub support: Option<u64>,
    pub probs: Vec<(O, f64)>,
}

impl<O: Copy + Ord> Conditional<O> {
    fn from_counts(counts: &BTreeMap<O, u64>) -> Self {
        let total: u64 = counts.values().sum();
        Self {
            support: Some(total),
            probs: counts.iter().map(|(&o, &c)| (o, c as f64 / total as f64)).collect(),
        }
    }

    fn exact(probs: impl IntoIterator<Item = (O, f64)>) -> Self {
        let mut probs: Vec<(O, f64)> = probs.into_iter().filter(|&(_, p)| p > 0.0).collect();
        probs.sort_by_key(|e| e.0);
        Self { support: None, probs }
    }

    pub fn prob(&self, o: O) -> f64 {
        self.probs
            .binary_search_by(|(k, _)| k.cmp(&o))
            .map_or(0.0, |i| self.probs[i].1)
    }
}

type Counts<K, O> = BTreeMap<K, BTreeMap<O, u64>>;

#[derive(Default)]
struct TupleCounts {
    actions: Counts<AugmentedState, usize>,
    mediators: Counts<(AugmentedState, usize), usize>,
    next_um: Counts<(AugmentedState, usize, usize), AugmentedState>,
    next_u: Counts<(AugmentedState, usize), AugmentedState>,
}

fn bump<K: Ord, O: Ord>(map: &mut Counts<K, O>, key: K, outcome: O, by: u64) {
    *map.entry(key).or_default().entry(outcome).or_default() += by;
}

fn merge<K: Ord, O: Ord>(into: &mut Counts<K, O>, from: Counts<K, O>) {
    for (key, row) in from {
        let slot = into.entry(key).or_default();
        for (o, c) in row {
            *slot.entry(o).or_default() += c;
        }
    }
}

impl TupleCounts {
    fn merge(mut self, other: Self) -> Self {
        merge(&mut self.actions, other.actions);
        merge(&mut self.mediators, other.mediators);
        merge(&mut self.next_um, other.next_um);
        merge(&mut self.next_u, other.next_u);
        self
    }
}

fn finish<K: Ord + Clone, O: Copy + Ord>(counts: Counts<K, O>) -> BTreeMap<K, Conditional<O>> {
    counts
        .iter()
        .map(|(k, row)| (k.clone(), Conditional::from_counts(row)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineTables {
    horizon: usize,
    n_actions: usize,
    has_mediators: bool,
    actions: BTreeMap<AugmentedState, Conditional<usize>>,
    mediators: BTreeMap<(AugmentedState, usize), Conditional<usize>>,
    next_um: BTreeMap<(AugmentedState, usize, usize), Conditional<AugmentedState>>,
    next_u: BTreeMap<(AugmentedState, usize), Conditional<AugmentedState>>,
}

impl OfflineTables {
    /// Count-ratio tables from converted episodes, over the transitions
    /// `t = 0..H-1`. Mediator tables are built only when every episode
    /// carries mediators.
    pub fn from_dataset(converted: &EpisodeDataset, n_actions: usize) -> Result<Self> {
        if converted.form != DatasetForm::Converted {
            return Err(Error::Form("offline tables need converted episodes".into()));
        }
        let h = converted.horizon;
        let has_mediators = converted.has_mediators();
        let counts = converted
            .episodes
            .par_iter()
            .try_fold(TupleCounts::default, |mut acc, ep| {
                for t in 0..h {
                    let (y, u, yn) = (ep.augmented(t), ep.u[t], ep.augmented(t + 1));
                    if u >= n_actions {
                        return Err(Error::Encoding(format!(
                            "episode {}: action index {u} out of range",
                            ep.seed
                        )));
                    }
                    bump(&mut acc.actions, y, u, 1);
                    bump(&mut acc.next_u, (y, u), yn, 1);
                    if has_mediators {
                        let m = ep.m.as_ref().expect("checked above")[t];
                        bump(&mut acc.mediators, (y, u), m, 1);
                        bump(&mut acc.next_um, (y, u, m), yn, 1);
                    }
                }
                Ok(acc)
            })
            .try_reduce(TupleCounts::default, |a, b| Ok(a.merge(b)))?;
        Ok(Self {
            horizon: h,
            n_actions,
            has_mediators,
            actions: finish(counts.actions),
            mediators: finish(counts.mediators),
            next_um: finish(counts.next_um),
            next_u: finish(counts.next_u),
        })
    }

    /// Exact offline tables of the absorbing process for every `ŷ = (x, k)`
    /// with `k >= 1`.
    ///
    /// Rows at unsafe states use the behavioral action marginal at the frozen
    /// state and point-mass transitions. Mediator rows exist wherever the
    /// behavioral policy gives the action positive probability.
    pub fn exact(
        model: &ConfoundedMdpModel,
        mediator: Option<&MediatorModel>,
        behavioral: &TabularPolicy,
    ) -> Result<Self> {
        let (n, na, h) = (model.n_states(), model.n_actions(), model.horizon());
        let mut tables = Self {
            horizon: h,
            n_actions: na,
            has_mediators: mediator.is_some(),
            actions: BTreeMap::new(),
            mediators: BTreeMap::new(),
            next_um: BTreeMap::new(),
            next_u: BTreeMap::new(),
        };
        for x in 0..n {
            // joint[u][w] = P(w | x) π^b(u | x, w)
            let mut joint = vec![vec![0.0; model.n_latent()]; na];
            for (w, &pw) in model.latent_row(x).iter().enumerate() {
                for (u, &pu) in behavioral.aware_row(x, w)?.iter().enumerate() {
                    joint[u][w] = pw * pu;
                }
            }
            let p_u: Vec<f64> = joint.iter().map(|r| r.iter().sum()).collect();
            let safe = model.is_safe(x);
            for k in 1..=h {
                let y = AugmentedState::new(x, k);
                let frozen = AugmentedState::new(x, k - 1);
                tables
                    .actions
                    .insert(y, Conditional::exact(p_u.iter().copied().enumerate()));
                for u in (0..na).filter(|&u| p_u[u] > 0.0) {
                    let next_u = if safe {
                        let row = model.offline_row(behavioral, x, u)?;
                        Conditional::exact(
                            row.into_iter()
                                .enumerate()
                                .map(|(xn, p)| (AugmentedState::new(xn, k - 1), p)),
                        )
                    } else {
                        Conditional::exact([(frozen, 1.0)])
                    };
                    tables.next_u.insert((y, u), next_u);
                    let Some(med) = mediator else { continue };
                    let m_row = med.mediator_row(x, u);
                    tables
                        .mediators
                        .insert((y, u), Conditional::exact(m_row.iter().copied().enumerate()));
                    for m in (0..med.n_mediators()).filter(|&m| m_row[m] > 0.0) {
                        let next = if safe {
                            let mut row = vec![0.0; n];
                            for (w, &pj) in joint[u].iter().enumerate() {
                                for (acc, &p) in row.iter_mut().zip(med.mediated_row(x, m, w)) {
                                    *acc += pj * p;
                                }
                            }
                            Conditional::exact(
                                row.into_iter()
                                    .enumerate()
                                    .map(|(xn, p)| (AugmentedState::new(xn, k - 1), p / p_u[u])),
                            )
                        } else {
                            Conditional::exact([(frozen, 1.0)])
                        };
                        tables.next_um.insert((y, u, m), next);
                    }
                }
            }
        }
        Ok(tables)
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn has_mediators(&self) -> bool {
        self.has_mediators
    }

    /// `P(u | ŷ)`.
    pub fn action_dist(&self, y: AugmentedState) -> Result<&Conditional<usize>> {
        self.actions
            .get(&y)
            .ok_or_else(|| Error::Positivity(format!("no logged action at {y}")))
    }

    /// `P(m | u, ŷ)`.
    pub fn mediator_dist(&self, y: AugmentedState, u: usize) -> Result<&Conditional<usize>> {
        self.mediators
            .get(&(y, u))
            .ok_or_else(|| Error::Positivity(format!("no logged mediator for u={u} at {y}")))
    }

    /// `P(ŷ' | ŷ, u, m)`, if the cell was observed.
    pub fn next_given_um(&self, y: AugmentedState, u: usize, m: usize) -> Option<&Conditional<AugmentedState>> {
        self.next_um.get(&(y, u, m))
    }

    /// `P(ŷ' | ŷ, u)`.
    pub fn next_given_u(&self, y: AugmentedState, u: usize) -> Result<&Conditional<AugmentedState>> {
        self.next_u
            .get(&(y, u))
            .ok_or_else(|| Error::Positivity(format!("no logged transition for u={u} at {y}")))
    }

    /// Augmented states with an action row, in ascending order.
    pub fn states(&self) -> impl Iterator<Item = AugmentedState> + '_ {
        self.actions.keys().copied()
    }

    /// Observed `(ŷ, u, m)` cells, in ascending order.
    pub fn mediated_cells(&self) -> impl Iterator<Item = (AugmentedState, usize, usize)> + '_ {
        self.next_um.keys().copied()
    }

    /// Observed `(ŷ, u)` cells, in ascending order.
    pub fn action_cells(&self) -> impl Iterator<Item = (AugmentedState, usize)> + '_ {
        self.next_u.keys().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{convert_dataset, Episode};
    use crate::env::{build_mediator_toy_env, mismatch::mismatch_behavioral};

    fn converted(eps: Vec<Episode>, h: usize) -> EpisodeDataset {
        let raw = EpisodeDataset {
            form: DatasetForm::Raw,
            horizon: h,
            episodes: eps,
        };
        convert_dataset(&raw, |x| x == 0).unwrap()
    }

    #[test]
    fn repeated_episode_gives_point_masses() {
        let ep = Episode {
            seed: 3,
            x: vec![0, 0, 1],
            k: None,
            u: vec![1, 0, 1],
            m: Some(vec![1, 1, 0]),
        };
        let d = converted(vec![ep; 7], 2);
        let t = OfflineTables::from_dataset(&d, 2).unwrap();
        let y0 = AugmentedState::new(0, 2);
        assert_eq!(t.action_dist(y0).unwrap().probs, vec![(1, 1.0)]);
        assert_eq!(t.action_dist(y0).unwrap().support, Some(7));
        assert_eq!(t.mediator_dist(y0, 1).unwrap().probs, vec![(1, 1.0)]);
        let next = t.next_given_um(y0, 1, 1).unwrap();
        assert_eq!(next.probs, vec![(AugmentedState::new(0, 1), 1.0)]);
        assert!(matches!(t.mediator_dist(y0, 0), Err(Error::Positivity(_))));
        assert!(t.next_given_um(y0, 0, 0).is_none());
        // The terminal step is not a transition.
        assert!(t.action_dist(AugmentedState::new(1, 0)).is_err());
    }

    #[test]
    fn raw_input_is_rejected() {
        let raw = EpisodeDataset {
            form: DatasetForm::Raw,
            horizon: 1,
            episodes: vec![],
        };
        assert!(matches!(OfflineTables::from_dataset(&raw, 2), Err(Error::Form(_))));
    }

    #[test]
    fn exact_tables_are_normalized() {
        let (model, med) = build_mediator_toy_env(3).unwrap();
        let t = OfflineTables::exact(&model, Some(&med), &mismatch_behavioral().unwrap()).unwrap();
        for y in t.states() {
            let s: f64 = t.action_dist(y).unwrap().probs.iter().map(|p| p.1).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        for (y, u, m) in t.mediated_cells() {
            let s: f64 = t.next_given_um(y, u, m).unwrap().probs.iter().map(|p| p.1).sum();
            assert!((s - 1.0).abs() < 1e-12, "{y} {u} {m}");
        }
        let y = AugmentedState::new(0, 2);
        assert!((t.action_dist(y).unwrap().prob(1) - 0.25).abs() < 1e-15);
        assert!((t.mediator_dist(y, 1).unwrap().prob(1) - 0.8).abs() < 1e-15);
    }
}

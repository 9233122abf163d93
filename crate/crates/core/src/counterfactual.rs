//! Counterfactual databases: alternative persuader actions rolled out through
//! the learned transition model, plus balanced selection of whole databases.

use rand::seq::index::sample;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bicogan::{l2, BiCoGanModel, NoiseMode};
use crate::dataset::{Episode, TraitVector};
use crate::dppr::{DpprModel, ProgressiveEstimator};
use crate::error::{Error, Result};
use crate::rng::{derive_indexed, derive_seed, normal_vec, seeded};

/// Which real actions may be drawn as counterfactual actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Strategy {
    /// Every action of every dialogue.
    All,
    /// Drop each dialogue's first action.
    SkipFirst,
    /// Drop each dialogue's first three actions.
    SkipFirstThree,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::All, Strategy::SkipFirst, Strategy::SkipFirstThree];

    /// Leading actions of each dialogue left out of the pool.
    pub fn excluded_prefix(self) -> usize {
        match self {
            Strategy::All => 0,
            Strategy::SkipFirst => 1,
            Strategy::SkipFirstThree => 3,
        }
    }

    pub fn number(self) -> u8 {
        self.into()
    }
}

impl From<Strategy> for u8 {
    fn from(s: Strategy) -> u8 {
        match s {
            Strategy::All => 1,
            Strategy::SkipFirst => 2,
            Strategy::SkipFirstThree => 3,
        }
    }
}

impl TryFrom<u8> for Strategy {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Strategy::All),
            2 => Ok(Strategy::SkipFirst),
            3 => Ok(Strategy::SkipFirstThree),
            _ => Err(format!("strategy must be 1, 2 or 3, got {v}")),
        }
    }
}

/// How `L_t` is obtained while rolling out a counterfactual dialogue.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraitTracking {
    /// Re-estimated from the counterfactual prefix.
    #[default]
    Counterfactual,
    /// Copied from the progressive estimate over the factual prefix.
    FactualCopy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfSpec {
    pub strategy: Strategy,
    pub noise: NoiseMode,
    pub traits: TraitTracking,
    pub with_replacement: bool,
}

impl Default for CfSpec {
    fn default() -> Self {
        CfSpec {
            strategy: Strategy::SkipFirst,
            noise: NoiseMode::Abducted,
            traits: TraitTracking::Counterfactual,
            with_replacement: true,
        }
    }
}

/// Position of a real action: `actions[step]` of `episodes[episode]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionRef {
    pub episode: usize,
    pub step: usize,
}

/// Every action the strategy allows, in episode then step order.
pub fn action_pool(episodes: &[Episode], strategy: Strategy) -> Vec<ActionRef> {
    let skip = strategy.excluded_prefix();
    episodes
        .iter()
        .enumerate()
        .flat_map(|(e, ep)| (skip..ep.turns()).map(move |step| ActionRef { episode: e, step }))
        .collect()
}

/// One pool draw for every valid step of every episode. Without replacement,
/// draws are distinct within a dialogue.
pub fn select_counterfactual_actions(
    episodes: &[Episode],
    strategy: Strategy,
    with_replacement: bool,
    seed: u64,
) -> Result<Vec<Vec<ActionRef>>> {
    let pool = action_pool(episodes, strategy);
    if pool.is_empty() {
        return Err(Error::InvalidInput(format!(
            "strategy {} leaves no actions to sample: every dialogue has at most {} actions",
            strategy.number(),
            strategy.excluded_prefix()
        )));
    }
    let mut rng = seeded(derive_seed(seed, "cf.actions"));
    episodes
        .iter()
        .map(|ep| {
            let n = ep.turns();
            if with_replacement {
                Ok((0..n).map(|_| pool[rng.random_range(0..pool.len())]).collect())
            } else if n > pool.len() {
                Err(Error::InvalidInput(format!(
                    "episode `{}` needs {n} distinct actions but the pool holds {}",
                    ep.id,
                    pool.len()
                )))
            } else {
                Ok(sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]).collect())
            }
        })
        .collect()
}

/// A full rewrite of the source dialogues under alternative actions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CfDatabase {
    pub index: usize,
    pub strategy: Strategy,
    pub episodes: Vec<Episode>,
    /// Sum of reward-model predictions over all dialogues, once scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predicted_reward: Option<f64>,
}

fn check_dims(model: &BiCoGanModel, source: &[Episode], actions: &[Vec<Vec<f64>>]) -> Result<()> {
    if actions.len() != source.len() {
        return Err(Error::shape(
            "counterfactual",
            format!("{} action lists for {} episodes", actions.len(), source.len()),
        ));
    }
    for (ep, acts) in source.iter().zip(actions) {
        if ep.dim() != model.d {
            return Err(Error::shape(
                "counterfactual",
                format!("episode `{}` has dimension {}, model has d = {}", ep.id, ep.dim(), model.d),
            ));
        }
        if acts.len() != ep.turns() {
            return Err(Error::shape(
                "counterfactual",
                format!("episode `{}` has {} turns but {} actions were given", ep.id, ep.turns(), acts.len()),
            ));
        }
        if let Some(a) = acts.iter().find(|a| a.len() != model.d) {
            return Err(Error::shape(
                "counterfactual",
                format!("action of dimension {} for episode `{}`", a.len(), ep.id),
            ));
        }
    }
    Ok(())
}

/// Roll every source episode forward under the given actions, one step at a
/// time across all episodes. `s'_0 = s_0`; padding is carried over untouched.
pub fn rollout(
    model: &BiCoGanModel,
    dppr: &DpprModel,
    source: &[Episode],
    actions: &[Vec<Vec<f64>>],
    spec: &CfSpec,
    seed: u64,
) -> Result<Vec<Episode>> {
    check_dims(model, source, actions)?;
    let mut out: Vec<Episode> = source.to_vec();
    let mut est: Vec<ProgressiveEstimator<'_>> = source.iter().map(|_| ProgressiveEstimator::new(dppr)).collect();
    let horizon = source.iter().map(Episode::turns).max().unwrap_or(0);
    for t in 0..horizon {
        let active: Vec<usize> = (0..source.len()).filter(|&i| t < source[i].turns()).collect();
        let mut traits: Vec<TraitVector> = Vec::with_capacity(active.len());
        for &i in &active {
            let turn = match spec.traits {
                TraitTracking::Counterfactual => [out[i].states[t].as_slice(), actions[i][t].as_slice()].concat(),
                TraitTracking::FactualCopy => source[i].turn(t),
            };
            traits.push(est[i].push(turn)?);
        }
        let noise: Vec<Vec<f64>> = match &spec.noise {
            NoiseMode::Abducted => {
                let next: Vec<&[f64]> = active.iter().map(|&i| source[i].states[t + 1].as_slice()).collect();
                model.abduct_batch(&next)?
            }
            NoiseMode::Zero => vec![vec![0.0; model.d]; active.len()],
            NoiseMode::Sampled(s) => active
                .iter()
                .map(|&i| {
                    let ep_seed = derive_indexed(derive_seed(seed ^ s, "cf.noise"), "episode", i as u64);
                    normal_vec(&mut seeded(derive_indexed(ep_seed, "step", t as u64)), model.d, 1.0)
                })
                .collect(),
        };
        let states: Vec<&[f64]> = active.iter().map(|&i| out[i].states[t].as_slice()).collect();
        let acts: Vec<&[f64]> = active.iter().map(|&i| actions[i][t].as_slice()).collect();
        let eps: Vec<&[f64]> = noise.iter().map(Vec::as_slice).collect();
        let next = model.generate_batch(&states, &acts, &traits, &eps)?;
        for (&i, s) in active.iter().zip(next) {
            out[i].actions[t] = actions[i][t].clone();
            out[i].states[t + 1] = s;
        }
    }
    Ok(out)
}

/// Sample actions by `spec.strategy` and roll them out as database `index`.
pub fn build_cf_database(
    model: &BiCoGanModel,
    dppr: &DpprModel,
    source: &[Episode],
    spec: &CfSpec,
    index: usize,
    seed: u64,
) -> Result<CfDatabase> {
    let refs = select_counterfactual_actions(source, spec.strategy, spec.with_replacement, seed)?;
    let actions: Vec<Vec<Vec<f64>>> = refs
        .iter()
        .map(|row| row.iter().map(|r| source[r.episode].actions[r.step].clone()).collect())
        .collect();
    let mut episodes = rollout(model, dppr, source, &actions, spec, seed)?;
    for ep in &mut episodes {
        ep.database = Some(index);
    }
    Ok(CfDatabase {
        index,
        strategy: spec.strategy,
        episodes,
        predicted_reward: None,
    })
}

/// `n` databases in parallel; database `i` uses a seed derived from `(seed, i)`.
pub fn build_cf_databases(
    model: &BiCoGanModel,
    dppr: &DpprModel,
    source: &[Episode],
    spec: &CfSpec,
    n: usize,
    seed: u64,
) -> Result<Vec<CfDatabase>> {
    (0..n)
        .into_par_iter()
        .map(|i| build_cf_database(model, dppr, source, spec, i, derive_indexed(seed, "cf.database", i as u64)))
        .collect()
}

/// Mean L2 distance between `s'_{t+1}` and factual `s_{t+1}` over all valid steps.
pub fn alignment_error(cf: &[Episode], source: &[Episode]) -> Result<f64> {
    if cf.len() != source.len() {
        return Err(Error::shape(
            "alignment_error",
            format!("{} counterfactual episodes for {} source episodes", cf.len(), source.len()),
        ));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for (c, s) in cf.iter().zip(source) {
        let n = s.turns().min(c.turns());
        for t in 1..=n {
            total += l2(&c.states[t], &s.states[t]);
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { total / count as f64 })
}

/// Keep `⌈n/2⌉` databases above and `⌊n/2⌋` below the ground truth, nearest
/// first, ties broken by database index. Rewards equal to the ground truth
/// count on neither side. Returns database indices in ascending order.
pub fn balance_select(rewards: &[(usize, f64)], ground_truth: f64, n_keep: usize) -> Result<Vec<usize>> {
    if let Some((i, r)) = rewards.iter().find(|(_, r)| !r.is_finite()) {
        return Err(Error::NonFinite(format!("predicted reward {r} of database {i}")));
    }
    let side = |above: bool| {
        let mut v: Vec<(f64, usize)> = rewards
            .iter()
            .filter(|(_, r)| if above { *r > ground_truth } else { *r < ground_truth })
            .map(|&(i, r)| ((r - ground_truth).abs(), i))
            .collect();
        v.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        v
    };
    let (above, below) = (side(true), side(false));
    let (want_above, want_below) = (n_keep.div_ceil(2), n_keep / 2);
    if above.len() < want_above || below.len() < want_below {
        return Err(Error::InvalidInput(format!(
            "balanced selection of {n_keep} needs {want_above} above and {want_below} below ground truth \
             {ground_truth}; have {} above and {} below",
            above.len(),
            below.len()
        )));
    }
    let mut keep: Vec<usize> = above[..want_above]
        .iter()
        .chain(&below[..want_below])
        .map(|&(_, i)| i)
        .collect();
    keep.sort_unstable();
    Ok(keep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_first_example() {
        let r = [(0, 1.0), (1, 2.0), (2, 9.0), (3, 10.0)];
        assert_eq!(balance_select(&r, 5.0, 2).unwrap(), vec![1, 2]);
        assert_eq!(balance_select(&r, 5.0, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn one_sided_rewards_are_rejected() {
        let r = [(0, 6.0), (1, 7.0)];
        let err = balance_select(&r, 5.0, 2).unwrap_err().to_string();
        assert!(err.contains("2 above and 0 below"), "{err}");
    }

    #[test]
    fn ties_with_ground_truth_are_ineligible() {
        let r = [(0, 5.0), (1, 6.0), (2, 4.0)];
        assert_eq!(balance_select(&r, 5.0, 2).unwrap(), vec![1, 2]);
        assert!(balance_select(&r, 5.0, 3).is_err());
    }

    #[test]
    fn strategy_numbers_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::try_from(s.number()).unwrap(), s);
        }
        assert!(Strategy::try_from(4).is_err());
        assert_eq!(serde_json::to_string(&Strategy::SkipFirst).unwrap(), "2");
    }
}

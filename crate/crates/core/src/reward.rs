//! Terminal-only reward model.
//!
//! A recurrent cell reads `s_k ++ a_k` for every state of a dialogue (the
//! final state is paired with a zero action) and a linear readout of the last
//! hidden state predicts the outcome. Rewards are zero before the final
//! utterance.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Episode;
use crate::error::{Error, Result};
use crate::nn::{mse, AdamConfig, AdamState, CellKind, CellState, Graph, Linear, ParamSet, RecurrentCell, Tensor, Var};
use crate::rng::{derive_seed, seeded};
use crate::synthworld::MAX_OUTCOME;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub cell: CellKind,
    pub seed: u64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            hidden: 256,
            batch_size: 64,
            lr: 1e-4,
            epochs: 1000,
            cell: CellKind::Gated,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardModel {
    pub d: usize,
    pub cell: RecurrentCell,
    pub readout: Linear,
    pub params: ParamSet,
    /// Prediction is `offset + scale · readout(h)`.
    pub offset: f64,
    pub scale: f64,
}

const CHUNK: usize = 256;

impl RewardModel {
    pub fn new(d: usize, config: &RewardConfig) -> Result<Self> {
        if d == 0 || config.hidden == 0 {
            return Err(Error::InvalidInput("reward model widths must be positive".into()));
        }
        let mut rng = seeded(derive_seed(config.seed, "reward.init"));
        let mut params = ParamSet::new();
        let cell = RecurrentCell::new(&mut params, "rm.cell", config.cell, 2 * d, config.hidden, &mut rng)?;
        let readout = Linear::new(&mut params, "rm.readout", config.hidden, 1, &mut rng)?;
        Ok(RewardModel {
            d,
            cell,
            readout,
            params,
            offset: 0.0,
            scale: 1.0,
        })
    }

    fn check(&self, ep: &Episode) -> Result<()> {
        if ep.dim() != self.d {
            return Err(Error::shape(
                "reward",
                format!("episode `{}` has dimension {}, model has d = {}", ep.id, ep.dim(), self.d),
            ));
        }
        Ok(())
    }

    /// Unclamped predictions `[B, 1]` for a batch, under `params`.
    pub fn forward(&self, g: &mut Graph, params: &ParamSet, episodes: &[&Episode]) -> Result<Var> {
        for ep in episodes {
            self.check(ep)?;
        }
        let b = episodes.len();
        let steps = episodes.iter().map(|e| e.valid_states()).max().unwrap_or(0);
        let zero_action = vec![0.0; self.d];
        let mut state = self.cell.zero_state(g, b);
        for k in 0..steps {
            let rows: Vec<Vec<f64>> = episodes
                .iter()
                .map(|e| {
                    let n = e.valid_states();
                    if k >= n {
                        return vec![0.0; 2 * self.d];
                    }
                    let a = if k + 1 < n { &e.actions[k] } else { &zero_action };
                    [e.states[k].as_slice(), a.as_slice()].concat()
                })
                .collect();
            let x = g.input(Tensor::from_rows(&rows)?);
            let next = self.cell.step(g, params, state, x)?;
            state = if episodes.iter().all(|e| k < e.valid_states()) {
                next
            } else {
                let mask: Vec<f64> = episodes.iter().map(|e| f64::from(u8::from(k < e.valid_states()))).collect();
                let m = g.input(Tensor::matrix(b, 1, mask)?);
                let keep = |g: &mut Graph, old: Var, new: Var| -> Result<Var> {
                    let delta = g.sub(new, old)?;
                    let masked = g.row_scale(delta, m)?;
                    g.add(old, masked)
                };
                CellState {
                    hidden: keep(g, state.hidden, next.hidden)?,
                    memory: match (state.memory, next.memory) {
                        (Some(o), Some(n)) => Some(keep(g, o, n)?),
                        _ => None,
                    },
                }
            };
        }
        let out = self.readout.forward(g, params, state.hidden)?;
        let out = g.scale(out, self.scale);
        Ok(g.add_scalar(out, self.offset))
    }

    /// Squared error against recorded outcomes under `params`.
    pub fn batch_loss(&self, g: &mut Graph, params: &ParamSet, episodes: &[&Episode]) -> Result<Var> {
        let y = self.forward(g, params, episodes)?;
        let t: Vec<f64> = episodes.iter().map(|e| e.outcome).collect();
        let t = g.input(Tensor::matrix(episodes.len(), 1, t)?);
        mse(g, y, t)
    }

    /// Raw outcome predictions, unclamped.
    pub fn predict_raw(&self, episodes: &[Episode]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(episodes.len());
        for chunk in episodes.chunks(CHUNK) {
            let refs: Vec<&Episode> = chunk.iter().collect();
            let mut g = Graph::new();
            let y = self.forward(&mut g, &self.params, &refs)?;
            out.extend_from_slice(g.value(y).data());
        }
        Ok(out)
    }

    /// Outcome predictions clamped to `[0, MAX_OUTCOME]`.
    pub fn score(&self, episodes: &[Episode]) -> Result<Vec<f64>> {
        Ok(self.predict_raw(episodes)?.into_iter().map(clamp_outcome).collect())
    }
}

pub fn clamp_outcome(v: f64) -> f64 {
    v.clamp(0.0, MAX_OUTCOME)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardHistory {
    pub epoch_loss: Vec<f64>,
    /// Mean squared error on the validation episodes after each epoch.
    pub validation_loss: Vec<f64>,
}

/// Mean squared error of raw predictions against recorded outcomes.
pub fn outcome_mse(model: &RewardModel, episodes: &[Episode]) -> Result<f64> {
    if episodes.is_empty() {
        return Err(Error::InvalidInput("no episodes to evaluate".into()));
    }
    let p = model.predict_raw(episodes)?;
    Ok(p.iter().zip(episodes).map(|(p, e)| (p - e.outcome).powi(2)).sum::<f64>() / episodes.len() as f64)
}

/// Minibatch Adam on squared outcome error. Predictions are centred on the
/// training mean and scaled by the training standard deviation.
pub fn train_reward(
    episodes: &[Episode],
    validation: &[Episode],
    config: &RewardConfig,
) -> Result<(RewardModel, RewardHistory)> {
    let first = episodes
        .first()
        .ok_or_else(|| Error::InvalidInput("no episodes to train the reward model on".into()))?;
    let mut model = RewardModel::new(first.dim(), config)?;
    let n = episodes.len() as f64;
    let mean = episodes.iter().map(|e| e.outcome).sum::<f64>() / n;
    let var = episodes.iter().map(|e| (e.outcome - mean).powi(2)).sum::<f64>() / n;
    model.offset = mean;
    model.scale = if var > 0.0 { var.sqrt() } else { 1.0 };

    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &model.params);
    let mut rng = seeded(derive_seed(config.seed, "reward.shuffle"));
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut history = RewardHistory::default();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let batch: Vec<&Episode> = chunk.iter().map(|&i| &episodes[i]).collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &model.params, &batch)?;
            total += g.value(loss).item()? * chunk.len() as f64;
            g.backward_into(loss, &mut model.params)?;
            adam.step(&mut model.params)?;
        }
        history.epoch_loss.push(total / n);
        if !validation.is_empty() {
            history.validation_loss.push(outcome_mse(&model, validation)?);
        }
    }
    Ok((model, history))
}

/// Reward at utterance `t` of a dialogue with `T` utterances: zero for
/// `t < T − 1`, the clamped prediction at `t = T − 1`.
pub fn step_reward(model: &RewardModel, episode: &Episode, t: usize) -> Result<f64> {
    let last = episode.valid_len().checked_sub(1).ok_or_else(|| {
        Error::InvalidInput(format!("episode `{}` has no utterances", episode.id))
    })?;
    if t > last {
        return Err(Error::OutOfRange {
            index: t,
            valid: format!("0..={last}"),
        });
    }
    if t < last {
        return Ok(0.0);
    }
    Ok(model.score(std::slice::from_ref(episode))?[0])
}

/// Running sums of every dialogue's terminal reward, in order.
pub fn cumulative_rewards(model: &RewardModel, episodes: &[Episode]) -> Result<Vec<f64>> {
    Ok(cumsum(&model.score(episodes)?))
}

pub fn cumsum(values: &[f64]) -> Vec<f64> {
    values
        .iter()
        .scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        })
        .collect()
}

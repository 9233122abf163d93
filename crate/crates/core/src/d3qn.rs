//! Dueling double DQN over candidate action sets.
//!
//! At every step the policy scores a finite set of candidate actions with
//! `Q(s, a) = V(s) + A(s, a) − mean_j A(s, a_j)` and picks the argmax. The
//! main network chooses the next action inside the TD target and the target
//! network evaluates it.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::counterfactual::CfDatabase;
use crate::dataset::{Episode, Source};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Graph, Linear, Mlp, ParamSet, Tensor, Var};
use crate::reward::RewardModel;
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Case {
    /// One update at the end of each dialogue.
    #[default]
    PerDialogue,
    /// One update after every step.
    PerState,
}

/// How a dialogue's squared TD errors are combined under [`Case::PerDialogue`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TdReduction {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub gamma: f64,
    pub case: Case,
    pub reduction: TdReduction,
    pub hidden: usize,
    pub lr: f64,
    pub epochs: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    /// Optimizer updates between hard target syncs.
    pub sync_every: usize,
    /// Steps after which a dialogue is cut off without a terminal flag.
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            gamma: 0.9,
            case: Case::PerDialogue,
            reduction: TdReduction::Mean,
            hidden: 256,
            lr: 1e-3,
            epochs: 20,
            epsilon_start: 0.3,
            epsilon_end: 0.01,
            sync_every: 50,
            max_steps: 100,
            seed: 0,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidInput(format!("policy.gamma must lie in [0, 1], got {}", self.gamma)));
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_end", self.epsilon_end)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("policy.{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.hidden == 0 || self.sync_every == 0 || self.max_steps == 0 {
            return Err(Error::InvalidInput("policy.hidden, sync_every and max_steps must be positive".into()));
        }
        Ok(())
    }

    /// Exploration rate for `epoch`, linear from start to end.
    pub fn epsilon(&self, epoch: usize) -> f64 {
        if self.epochs <= 1 {
            return self.epsilon_start;
        }
        let f = epoch as f64 / (self.epochs - 1) as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QNet {
    pub state_dim: usize,
    pub action_dim: usize,
    pub trunk: Mlp,
    pub value: Linear,
    pub advantage: Linear,
    pub params: ParamSet,
    /// Target copy of `params`.
    pub target: ParamSet,
}

/// `V + A_i − mean(A)` for each candidate.
pub fn dueling(value: f64, advantages: &[f64]) -> Vec<f64> {
    let mean = advantages.iter().sum::<f64>() / advantages.len() as f64;
    advantages.iter().map(|a| value + a - mean).collect()
}

/// Lowest index of the largest value.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// One scored decision: a state, its candidates and the chosen index.
struct Scored {
    value: Var,
    advantage: Var,
}

impl QNet {
    pub fn new(state_dim: usize, action_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 || hidden == 0 {
            return Err(Error::InvalidInput("Q-network widths must be positive".into()));
        }
        let mut rng = seeded(derive_seed(seed, "d3qn.init"));
        let mut params = ParamSet::new();
        let trunk = Mlp::new(
            &mut params,
            "q.trunk",
            &[state_dim + action_dim, hidden, hidden],
            Activation::Tanh,
            Activation::Tanh,
            &mut rng,
        )?;
        let value = Linear::new(&mut params, "q.value", hidden, 1, &mut rng)?;
        let advantage = Linear::new(&mut params, "q.advantage", hidden, 1, &mut rng)?;
        Ok(QNet {
            state_dim,
            action_dim,
            trunk,
            value,
            advantage,
            target: params.clone(),
            params,
        })
    }

    fn check(&self, state: &[f64], candidates: &[Vec<f64>]) -> Result<()> {
        if candidates.is_empty() {
            return Err(Error::InvalidInput("empty candidate set".into()));
        }
        if state.len() != self.state_dim || candidates.iter().any(|a| a.len() != self.action_dim) {
            return Err(Error::shape(
                "q_net",
                format!("state/action widths do not match {}/{}", self.state_dim, self.action_dim),
            ));
        }
        Ok(())
    }

    /// `V` as `[B, 1]` and `A` as `[B·N, 1]` for `B` states with `N` candidates each.
    fn score(&self, g: &mut Graph, params: &ParamSet, states: &[&[f64]], candidates: &[&[Vec<f64>]]) -> Result<Scored> {
        let n = candidates[0].len();
        let mut sa = Vec::with_capacity(states.len() * n);
        let mut s0 = Vec::with_capacity(states.len());
        for (s, cands) in states.iter().zip(candidates) {
            if cands.len() != n {
                return Err(Error::shape("q_net", "candidate sets in one batch must have equal size"));
            }
            self.check(s, cands)?;
            for a in cands.iter() {
                sa.push([*s, a.as_slice()].concat());
            }
            s0.push([*s, vec![0.0; self.action_dim].as_slice()].concat());
        }
        let x = g.input(Tensor::from_rows(&sa)?);
        let h = self.trunk.forward(g, params, x)?;
        let advantage = self.advantage.forward(g, params, h)?;
        let x0 = g.input(Tensor::from_rows(&s0)?);
        let h0 = self.trunk.forward(g, params, x0)?;
        let value = self.value.forward(g, params, h0)?;
        Ok(Scored { value, advantage })
    }

    fn q_with(&self, params: &ParamSet, state: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.check(state, candidates)?;
        let mut g = Graph::new();
        let s = self.score(&mut g, params, &[state], &[candidates])?;
        let v = g.value(s.value).item()?;
        Ok(dueling(v, g.value(s.advantage).data()))
    }

    /// Main-network Q for every candidate.
    pub fn q_values(&self, state: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.q_with(&self.params, state, candidates)
    }

    /// Target-network Q for every candidate.
    pub fn target_q_values(&self, state: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
        self.q_with(&self.target, state, candidates)
    }

    pub fn q_value(&self, state: &[f64], action_index: usize, candidates: &[Vec<f64>]) -> Result<f64> {
        let q = self.q_values(state, candidates)?;
        q.get(action_index).copied().ok_or_else(|| Error::OutOfRange {
            index: action_index,
            valid: format!("0..{}", q.len()),
        })
    }

    /// Greedy choice with ties to the lowest index.
    pub fn select_action(&self, state: &[f64], candidates: &[Vec<f64>]) -> Result<(usize, f64)> {
        let q = self.q_values(state, candidates)?;
        let k = argmax(&q);
        Ok((k, q[k]))
    }

    /// Double-DQN target: `r` if terminal, else `r + γ·Q_target(s', a⁺)` with
    /// `a⁺` the main network's argmax over `next_candidates`.
    pub fn td_target(&self, reward: f64, next: &[f64], next_candidates: &[Vec<f64>], gamma: f64, terminal: bool) -> Result<f64> {
        if terminal {
            return Ok(reward);
        }
        let (best, _) = self.select_action(next, next_candidates)?;
        let q = self.target_q_values(next, next_candidates)?;
        Ok(reward + gamma * q[best])
    }

    /// Mean squared error of `Q(s_i, a_{k_i})` against fixed targets under `params`.
    pub fn td_loss(&self, g: &mut Graph, params: &ParamSet, batch: &[TdSample]) -> Result<Var> {
        let first = batch.first().ok_or_else(|| Error::InvalidInput("empty TD batch".into()))?;
        let n = first.candidates.len();
        let states: Vec<&[f64]> = batch.iter().map(|t| t.state.as_slice()).collect();
        let cands: Vec<&[Vec<f64>]> = batch.iter().map(|t| t.candidates.as_slice()).collect();
        let s = self.score(g, params, &states, &cands)?;
        let mut onehot = vec![0.0; batch.len() * n];
        for (i, t) in batch.iter().enumerate() {
            if t.choice >= n {
                return Err(Error::OutOfRange {
                    index: t.choice,
                    valid: format!("0..{n}"),
                });
            }
            onehot[i * n + t.choice] = 1.0;
        }
        let mask = g.input(Tensor::matrix(batch.len() * n, 1, onehot)?);
        let picked = g.mul(s.advantage, mask)?;
        let chosen = g.segment_sum(picked, n)?;
        let total = g.segment_sum(s.advantage, n)?;
        let mean = g.scale(total, 1.0 / n as f64);
        let centred = g.sub(chosen, mean)?;
        let q = g.add(s.value, centred)?;
        let y: Vec<f64> = batch.iter().map(|t| t.target).collect();
        let y = g.input(Tensor::matrix(batch.len(), 1, y)?);
        crate::nn::mse(g, q, y)
    }

    pub fn sync_target(&mut self) -> Result<()> {
        self.target.copy_values_from(&self.params)
    }
}

/// One decision with its TD target already fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct TdSample {
    pub state: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
    pub choice: usize,
    pub target: f64,
}

/// States and chosen actions of one dialogue so far.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Path {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub choices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub next: Vec<f64>,
    pub reward: f64,
    pub terminal: bool,
}

/// A set of dialogues the policy rolls out through by picking candidates.
pub trait RolloutEnv: Sync {
    fn dialogues(&self) -> usize;
    fn initial_state(&self, dialogue: usize) -> Vec<f64>;
    fn candidates(&self, dialogue: usize, step: usize, state: &[f64]) -> Vec<Vec<f64>>;
    /// Take candidate `choice` at `step`; `path` holds everything before it.
    fn step(&self, dialogue: usize, step: usize, path: &Path, choice: usize) -> Result<StepOutcome>;
}

struct Decision {
    state: Vec<f64>,
    candidates: Vec<Vec<f64>>,
    choice: usize,
    reward: f64,
    next: Vec<f64>,
    next_candidates: Vec<Vec<f64>>,
    terminal: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PolicyHistory {
    /// Mean squared TD error of each dialogue, in training order.
    pub dialogue_loss: Vec<f64>,
    pub updates: usize,
}

struct Trainer<'a> {
    config: &'a PolicyConfig,
    net: QNet,
    adam: AdamState,
    updates: usize,
}

impl Trainer<'_> {
    fn update(&mut self, decisions: &[Decision]) -> Result<f64> {
        let batch: Vec<TdSample> = decisions
            .iter()
            .map(|d| {
                Ok(TdSample {
                    state: d.state.clone(),
                    candidates: d.candidates.clone(),
                    choice: d.choice,
                    target: self.net.td_target(d.reward, &d.next, &d.next_candidates, self.config.gamma, d.terminal)?,
                })
            })
            .collect::<Result<_>>()?;
        let mut g = Graph::new();
        let mut loss = self.net.td_loss(&mut g, &self.net.params, &batch)?;
        let value = g.value(loss).item()?;
        if self.config.reduction == TdReduction::Sum {
            loss = g.scale(loss, batch.len() as f64);
        }
        g.backward_into(loss, &mut self.net.params)?;
        self.adam.step(&mut self.net.params)?;
        self.updates += 1;
        if self.updates.is_multiple_of(self.config.sync_every) {
            self.net.sync_target()?;
        }
        Ok(value)
    }
}

/// Online ε-greedy training over every dialogue of `env` per epoch, in a
/// seeded order. [`Case`] decides whether updates happen per dialogue or per step.
pub fn train_policy<E: RolloutEnv>(env: &E, net: QNet, config: &PolicyConfig) -> Result<(QNet, PolicyHistory)> {
    config.validate()?;
    if env.dialogues() == 0 {
        return Err(Error::InvalidInput("no dialogues to train the policy on".into()));
    }
    let adam = AdamState::new(AdamConfig::with_lr(config.lr), &net.params);
    let mut tr = Trainer { config, net, adam, updates: 0 };
    let mut rng = seeded(derive_seed(config.seed, "d3qn.train"));
    let mut order: Vec<usize> = (0..env.dialogues()).collect();
    let mut history = PolicyHistory::default();
    for epoch in 0..config.epochs {
        let eps = config.epsilon(epoch);
        order.shuffle(&mut rng);
        for &j in &order {
            let mut state = env.initial_state(j);
            let mut path = Path { states: vec![state.clone()], ..Default::default() };
            let mut candidates = env.candidates(j, 0, &state);
            let mut pending = Vec::new();
            let mut losses = Vec::new();
            for t in 0..config.max_steps {
                let choice = if rng.random::<f64>() < eps {
                    rng.random_range(0..candidates.len().max(1))
                } else {
                    tr.net.select_action(&state, &candidates)?.0
                };
                let out = env.step(j, t, &path, choice)?;
                let next_candidates = if out.terminal { Vec::new() } else { env.candidates(j, t + 1, &out.next) };
                path.actions.push(candidates[choice].clone());
                path.choices.push(choice);
                path.states.push(out.next.clone());
                let d = Decision {
                    state,
                    candidates,
                    choice,
                    reward: out.reward,
                    next: out.next.clone(),
                    next_candidates: next_candidates.clone(),
                    terminal: out.terminal,
                };
                match config.case {
                    Case::PerState => losses.push(tr.update(std::slice::from_ref(&d))?),
                    Case::PerDialogue => pending.push(d),
                }
                if out.terminal {
                    break;
                }
                state = out.next;
                candidates = next_candidates;
            }
            if !pending.is_empty() {
                losses.push(tr.update(&pending)?);
            }
            if !losses.is_empty() {
                history.dialogue_loss.push(losses.iter().sum::<f64>() / losses.len() as f64);
            }
        }
    }
    history.updates = tr.updates;
    Ok((tr.net, history))
}

/// Greedy rollout of one dialogue with its Q statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueEval {
    pub dialogue: usize,
    pub reward: f64,
    pub max_q: f64,
    pub mean_q: f64,
    pub choices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyEval {
    pub dialogues: Vec<DialogueEval>,
    /// Running sum of `reward` over dialogues.
    pub cumulative: Vec<f64>,
}

fn greedy_dialogue<E: RolloutEnv>(env: &E, net: &QNet, j: usize, max_steps: usize) -> Result<DialogueEval> {
    let mut state = env.initial_state(j);
    let mut path = Path { states: vec![state.clone()], ..Default::default() };
    let mut reward = 0.0;
    let mut qs = Vec::new();
    for t in 0..max_steps {
        let candidates = env.candidates(j, t, &state);
        let (k, q) = net.select_action(&state, &candidates)?;
        qs.push(q);
        let out = env.step(j, t, &path, k)?;
        reward += out.reward;
        path.actions.push(candidates[k].clone());
        path.choices.push(k);
        path.states.push(out.next.clone());
        if out.terminal {
            break;
        }
        state = out.next;
    }
    Ok(DialogueEval {
        dialogue: j,
        reward,
        max_q: qs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        mean_q: qs.iter().sum::<f64>() / qs.len() as f64,
        choices: path.choices,
    })
}

/// Greedy rollout of every dialogue, in parallel, without exploration.
pub fn evaluate_policy<E: RolloutEnv>(env: &E, net: &QNet, max_steps: usize) -> Result<PolicyEval> {
    let dialogues: Vec<DialogueEval> = (0..env.dialogues())
        .into_par_iter()
        .map(|j| greedy_dialogue(env, net, j, max_steps.max(1)))
        .collect::<Result<_>>()?;
    let rewards: Vec<f64> = dialogues.iter().map(|d| d.reward).collect();
    Ok(PolicyEval {
        cumulative: crate::reward::cumsum(&rewards),
        dialogues,
    })
}

/// Five-state chain: move left or right, reward 1 on entering the last state,
/// which ends the dialogue. States and actions are one-hot.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainEnv {
    pub states: usize,
    pub starts: Vec<usize>,
}

impl ChainEnv {
    pub const LEFT: usize = 0;
    pub const RIGHT: usize = 1;

    /// `dialogues` starts cycling over the non-terminal states.
    pub fn new(dialogues: usize) -> Self {
        ChainEnv {
            states: 5,
            starts: (0..dialogues).map(|j| j % 4).collect(),
        }
    }

    pub fn one_hot(&self, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.states];
        v[i] = 1.0;
        v
    }

    pub fn actions() -> Vec<Vec<f64>> {
        vec![vec![1.0, 0.0], vec![0.0, 1.0]]
    }

    pub fn index(state: &[f64]) -> usize {
        argmax(state)
    }

    /// Next state index after `action` from `state`.
    pub fn next_index(&self, state: usize, action: usize) -> usize {
        if action == Self::LEFT {
            state.saturating_sub(1)
        } else {
            (state + 1).min(self.states - 1)
        }
    }
}

impl RolloutEnv for ChainEnv {
    fn dialogues(&self) -> usize {
        self.starts.len()
    }

    fn initial_state(&self, dialogue: usize) -> Vec<f64> {
        self.one_hot(self.starts[dialogue])
    }

    fn candidates(&self, _: usize, _: usize, _: &[f64]) -> Vec<Vec<f64>> {
        Self::actions()
    }

    fn step(&self, _: usize, _: usize, path: &Path, choice: usize) -> Result<StepOutcome> {
        let s = Self::index(&path.states[path.states.len() - 1]);
        let n = self.next_index(s, choice);
        let terminal = n == self.states - 1;
        Ok(StepOutcome {
            next: self.one_hot(n),
            reward: if terminal { 1.0 } else { 0.0 },
            terminal,
        })
    }
}

/// Candidate actions are the `N` databases' actions for the same dialogue and
/// step; choosing database `k` moves to its next state. The reward is zero
/// until the last step, then the reward model's clamped score of the
/// assembled dialogue.
pub struct DatabaseEnv<'a> {
    pub databases: &'a [CfDatabase],
    pub reward: &'a RewardModel,
}

impl<'a> DatabaseEnv<'a> {
    pub fn new(databases: &'a [CfDatabase], reward: &'a RewardModel) -> Result<Self> {
        let first = databases
            .first()
            .ok_or_else(|| Error::InvalidInput("no counterfactual databases".into()))?;
        for db in databases {
            if db.episodes.len() != first.episodes.len()
                || db.episodes.iter().zip(&first.episodes).any(|(a, b)| a.turns() != b.turns())
            {
                return Err(Error::shape(
                    "database_env",
                    format!("database {} does not match the dialogue layout of database {}", db.index, first.index),
                ));
            }
        }
        Ok(DatabaseEnv { databases, reward })
    }

    fn episode(&self, k: usize, j: usize) -> &Episode {
        &self.databases[k].episodes[j]
    }
}

impl RolloutEnv for DatabaseEnv<'_> {
    fn dialogues(&self) -> usize {
        self.databases[0].episodes.len()
    }

    fn initial_state(&self, dialogue: usize) -> Vec<f64> {
        self.episode(0, dialogue).states[0].clone()
    }

    fn candidates(&self, dialogue: usize, step: usize, _: &[f64]) -> Vec<Vec<f64>> {
        (0..self.databases.len()).map(|k| self.episode(k, dialogue).actions[step].clone()).collect()
    }

    fn step(&self, dialogue: usize, step: usize, path: &Path, choice: usize) -> Result<StepOutcome> {
        let ep = self.episode(choice, dialogue);
        let next = ep.states[step + 1].clone();
        let terminal = step + 1 == ep.turns();
        let reward = if terminal {
            let mut states = path.states.clone();
            states.push(next.clone());
            let mut actions = path.actions.clone();
            actions.push(ep.actions[step].clone());
            let assembled = Episode {
                id: ep.id.clone(),
                states,
                actions,
                traits: None,
                outcome: 0.0,
                source: Source::Synthetic,
                valid_len: None,
                database: None,
            };
            self.reward.score(std::slice::from_ref(&assembled))?[0]
        } else {
            0.0
        };
        Ok(StepOutcome { next, reward, terminal })
    }
}

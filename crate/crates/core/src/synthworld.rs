//! A persuasion world with a known transition mechanism.
//!
//! ```text
//! s_{t+1} = φ(gain · (A_s s_t + A_a a_t + A_L (L − 3))) + ε_{t+1}
//! ```
//!
//! The noise sits outside the nonlinearity, so the exact noise of any factual
//! transition is `s_{t+1} − φ(·)` and counterfactual next states can be
//! computed exactly from the recorded noise.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Episode, Source, TraitVector, TRAIT_DIM};
use crate::error::{Error, Result};
use crate::nn::sigmoid;
use crate::rng::{derive_indexed, derive_seed, normal_vec, seeded, standard_normal, Rng};

/// Largest Frobenius norm allowed for `A_s`; bounds its spectral radius too.
pub const MAX_STATE_NORM: f64 = 0.95;
pub const MAX_OUTCOME: f64 = 20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Tanh,
    Linear,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Nonlinearity::Tanh => x.tanh(),
            Nonlinearity::Linear => x,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    /// `a = P_s s + P_L (L − 3) + noise`
    #[default]
    Linear,
    /// Action coordinates 0 and 1 carry fresh standard-normal gates `x, y`
    /// and the trait term is multiplied by `sign(x·y)`, so its sign is visible
    /// only inside the turn and no linear score of a turn isolates one sign.
    SignGated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    pub d: usize,
    /// Total utterances per dialogue.
    #[serde(rename = "T")]
    pub horizon: usize,
    pub noise_scale: f64,
    pub nonlinearity_gain: f64,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
    /// Frobenius norm of `A_s`, at most [`MAX_STATE_NORM`].
    pub state_persistence: f64,
    /// Scale of `A_L`, the trait pull on states.
    pub state_trait_coupling: f64,
    /// Standard deviation of traits around the midpoint before clamping.
    pub trait_spread: f64,
    pub user_bias_scale: f64,
    pub policy: PolicyKind,
    pub policy_trait_coupling: f64,
    pub policy_noise: f64,
    pub outcome_gain: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            d: 8,
            horizon: 9,
            noise_scale: 0.1,
            nonlinearity_gain: 1.0,
            nonlinearity: Nonlinearity::Tanh,
            seed: 0,
            state_persistence: 0.6,
            state_trait_coupling: 0.5,
            trait_spread: 0.8,
            user_bias_scale: 0.1,
            policy: PolicyKind::Linear,
            policy_trait_coupling: 0.5,
            policy_noise: 0.1,
            outcome_gain: 2.0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if self.d == 0 {
            return bad("world.d must be positive".into());
        }
        if self.horizon < 3 {
            return bad(format!("world.T must be at least 3, got {}", self.horizon));
        }
        for (name, v) in [
            ("noise_scale", self.noise_scale),
            ("trait_spread", self.trait_spread),
            ("policy_noise", self.policy_noise),
            ("user_bias_scale", self.user_bias_scale),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("world.{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(self.state_persistence >= 0.0 && self.state_persistence <= MAX_STATE_NORM) {
            return bad(format!(
                "world.state_persistence must lie in [0, {MAX_STATE_NORM}], got {}",
                self.state_persistence
            ));
        }
        Ok(())
    }

    pub fn states_per_episode(&self) -> usize {
        self.horizon.div_ceil(2)
    }

    pub fn actions_per_episode(&self) -> usize {
        self.states_per_episode() - 1
    }
}

fn matvec(m: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    for (i, o) in out.iter_mut().enumerate().take(rows) {
        *o += m[i * cols..(i + 1) * cols].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Vec<f64> {
    normal_vec(rng, rows * cols, scale / (cols as f64).sqrt())
}

/// The world's transition mechanism. Matrices are row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthScm {
    pub d: usize,
    pub a_s: Vec<f64>,
    pub a_a: Vec<f64>,
    pub a_l: Vec<f64>,
    pub gain: f64,
    pub nonlinearity: Nonlinearity,
    pub noise_scale: f64,
    pub w: Vec<f64>,
}

impl GroundTruthScm {
    pub fn sample(config: &WorldConfig, rng: &mut Rng) -> Self {
        let d = config.d;
        let mut a_s = normal_vec(rng, d * d, 1.0);
        let norm = a_s.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            let k = config.state_persistence / norm;
            a_s.iter_mut().for_each(|v| *v *= k);
        }
        GroundTruthScm {
            d,
            a_s,
            a_a: gaussian_matrix(rng, d, d, 1.0),
            a_l: gaussian_matrix(rng, d, TRAIT_DIM, config.state_trait_coupling),
            gain: config.nonlinearity_gain,
            nonlinearity: config.nonlinearity,
            noise_scale: config.noise_scale,
            w: normal_vec(rng, d, config.outcome_gain / (d as f64).sqrt()),
        }
    }

    /// Build from explicit matrices, all `d×d` except `a_l` (`d×5`).
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        d: usize,
        a_s: Vec<f64>,
        a_a: Vec<f64>,
        a_l: Vec<f64>,
        gain: f64,
        nonlinearity: Nonlinearity,
        noise_scale: f64,
        w: Vec<f64>,
    ) -> Result<Self> {
        if a_s.len() != d * d || a_a.len() != d * d || a_l.len() != d * TRAIT_DIM || w.len() != d {
            return Err(Error::shape("ground_truth_scm", format!("matrices do not fit d = {d}")));
        }
        Ok(GroundTruthScm {
            d,
            a_s,
            a_a,
            a_l,
            gain,
            nonlinearity,
            noise_scale,
            w,
        })
    }

    /// `φ(gain · (A_s s + A_a a + A_L (L − 3)))`, the noise-free next state.
    pub fn mean_next(&self, s: &[f64], a: &[f64], traits: &TraitVector) -> Vec<f64> {
        let d = self.d;
        let mut pre = vec![0.0; d];
        matvec(&self.a_s, d, d, s, &mut pre);
        matvec(&self.a_a, d, d, a, &mut pre);
        matvec(&self.a_l, d, TRAIT_DIM, &traits.centered(), &mut pre);
        pre.iter().map(|&x| self.nonlinearity.apply(self.gain * x)).collect()
    }

    pub fn step(&self, s: &[f64], a: &[f64], traits: &TraitVector, noise: &[f64]) -> Vec<f64> {
        self.mean_next(s, a, traits)
            .into_iter()
            .zip(noise)
            .map(|(m, e)| m + e)
            .collect()
    }

    /// Donation-like outcome `20 · σ(w·s)`.
    pub fn outcome(&self, s: &[f64]) -> f64 {
        let z: f64 = self.w.iter().zip(s).map(|(a, b)| a * b).sum();
        MAX_OUTCOME * sigmoid(z)
    }

    /// Largest singular value of `A_s` by power iteration on `A_sᵀ A_s`.
    pub fn state_operator_norm(&self) -> f64 {
        let d = self.d;
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        let mut sigma = 0.0;
        for _ in 0..500 {
            let mut av = vec![0.0; d];
            matvec(&self.a_s, d, d, &v, &mut av);
            let mut atav = vec![0.0; d];
            for i in 0..d {
                for j in 0..d {
                    atav[j] += self.a_s[i * d + j] * av[i];
                }
            }
            let n = atav.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n == 0.0 {
                return 0.0;
            }
            sigma = n.sqrt();
            v = atav.into_iter().map(|x| x / n).collect();
        }
        sigma
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthUser {
    pub traits: TraitVector,
    pub bias: Vec<f64>,
}

/// Traits `clamp(3 + N(0, spread²), 1, 5)` and a small state bias.
pub fn sample_user(config: &WorldConfig, rng: &mut Rng) -> SynthUser {
    let traits = TraitVector(std::array::from_fn(|_| {
        (3.0 + config.trait_spread * standard_normal(rng)).clamp(1.0, 5.0)
    }));
    SynthUser {
        traits,
        bias: normal_vec(rng, config.d, config.user_bias_scale),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub kind: PolicyKind,
    pub p_s: Vec<f64>,
    pub p_l: Vec<f64>,
    pub noise: f64,
    d: usize,
}

impl BehaviorPolicy {
    pub fn sample(config: &WorldConfig, rng: &mut Rng) -> Self {
        let d = config.d;
        BehaviorPolicy {
            kind: config.policy,
            p_s: gaussian_matrix(rng, d, d, 0.5),
            p_l: gaussian_matrix(rng, d, TRAIT_DIM, config.policy_trait_coupling),
            noise: config.policy_noise,
            d,
        }
    }

    pub fn act(&self, s: &[f64], traits: &TraitVector, rng: &mut Rng) -> Vec<f64> {
        let d = self.d;
        let mut trait_term = vec![0.0; d];
        matvec(&self.p_l, d, TRAIT_DIM, &traits.centered(), &mut trait_term);
        let flags = match self.kind {
            PolicyKind::Linear => None,
            PolicyKind::SignGated => {
                Some([standard_normal(rng), standard_normal(rng)])
            }
        };
        let sign = flags.map_or(1.0, |[x, y]: [f64; 2]| if x * y >= 0.0 { 1.0 } else { -1.0 });
        let mut a = vec![0.0; d];
        matvec(&self.p_s, d, d, s, &mut a);
        let jitter = normal_vec(rng, d, self.noise);
        a.iter_mut()
            .zip(trait_term)
            .zip(jitter)
            .for_each(|((a, t), j)| *a += sign * t + j);
        if let Some(f) = flags {
            for (k, v) in f.into_iter().enumerate().take(d) {
                a[k] = v;
            }
        }
        a
    }
}

/// An episode together with everything needed to replay it exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthEpisode {
    pub episode: Episode,
    pub user: SynthUser,
    /// `noises[t]` is the `ε_{t+1}` that produced `states[t + 1]`.
    pub noises: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub scm: GroundTruthScm,
    pub policy: BehaviorPolicy,
}

impl World {
    pub fn new(config: WorldConfig) -> Result<Self> {
        config.validate()?;
        let scm = GroundTruthScm::sample(&config, &mut seeded(derive_seed(config.seed, "scm")));
        let policy = BehaviorPolicy::sample(&config, &mut seeded(derive_seed(config.seed, "policy")));
        Ok(World { config, scm, policy })
    }

    pub fn with_scm(config: WorldConfig, scm: GroundTruthScm) -> Result<Self> {
        config.validate()?;
        if scm.d != config.d {
            return Err(Error::shape("world", format!("scm d = {} vs config d = {}", scm.d, config.d)));
        }
        let policy = BehaviorPolicy::sample(&config, &mut seeded(derive_seed(config.seed, "policy")));
        Ok(World { config, scm, policy })
    }

    /// A linear world whose traits reach the dialogue only through the
    /// gated action term of [`PolicyKind::SignGated`].
    pub fn single_turn_signal(config: WorldConfig) -> Result<Self> {
        if config.d < 3 {
            return Err(Error::InvalidInput("the gated task needs d >= 3".into()));
        }
        World::new(WorldConfig {
            policy: PolicyKind::SignGated,
            nonlinearity: Nonlinearity::Linear,
            state_trait_coupling: 0.0,
            ..config
        })
    }

    pub fn initial_state(&self, user: &SynthUser, rng: &mut Rng) -> Vec<f64> {
        let d = self.config.d;
        let mut pre = user.bias.clone();
        matvec(&self.scm.a_l, d, TRAIT_DIM, &user.traits.centered(), &mut pre);
        let noise = normal_vec(rng, d, self.config.noise_scale);
        pre.iter()
            .zip(noise)
            .map(|(&x, e)| self.scm.nonlinearity.apply(self.scm.gain * x) + e)
            .collect()
    }

    /// Roll out one dialogue under the behavior policy.
    pub fn rollout_episode(&self, id: String, user: SynthUser, rng: &mut Rng) -> SynthEpisode {
        let n_actions = self.config.actions_per_episode();
        let mut states = vec![self.initial_state(&user, rng)];
        let mut actions = Vec::with_capacity(n_actions);
        let mut noises = Vec::with_capacity(n_actions);
        for t in 0..n_actions {
            let a = self.policy.act(&states[t], &user.traits, rng);
            let eps = normal_vec(rng, self.config.d, self.config.noise_scale);
            let next = self.scm.step(&states[t], &a, &user.traits, &eps);
            actions.push(a);
            noises.push(eps);
            states.push(next);
        }
        let outcome = self.scm.outcome(&states[states.len() - 1]);
        SynthEpisode {
            episode: Episode {
                id,
                states,
                actions,
                traits: Some(user.traits),
                outcome,
                source: Source::Synthetic,
                valid_len: None,
                database: None,
            },
            user,
            noises,
        }
    }

    /// `n` dialogues with per-dialogue seeds derived from `(config.seed, label, i)`.
    pub fn generate(&self, n: usize, label: &str) -> Vec<SynthEpisode> {
        (0..n)
            .into_par_iter()
            .map(|i| {
                let mut rng = seeded(derive_indexed(self.config.seed, label, i as u64));
                let user = sample_user(&self.config, &mut rng);
                self.rollout_episode(format!("{label}-{i:05}"), user, &mut rng)
            })
            .collect()
    }

    /// Re-run the mechanism from `s_0` with given actions and noises.
    pub fn replay(
        &self,
        s0: &[f64],
        traits: &TraitVector,
        actions: &[Vec<f64>],
        noises: &[Vec<f64>],
    ) -> Vec<Vec<f64>> {
        let mut states = vec![s0.to_vec()];
        for (a, e) in actions.iter().zip(noises) {
            let next = self.scm.step(&states[states.len() - 1], a, traits, e);
            states.push(next);
        }
        states
    }

    /// Next state had `a_alt` been taken at step `t`, under the factual noise.
    pub fn oracle_counterfactual(&self, ep: &SynthEpisode, t: usize, a_alt: &[f64]) -> Result<Vec<f64>> {
        let n = ep.noises.len();
        if t >= n {
            return Err(Error::OutOfRange {
                index: t,
                valid: format!("0..{n}"),
            });
        }
        if a_alt.len() != self.config.d {
            return Err(Error::shape(
                "oracle_counterfactual",
                format!("action of dimension {}, expected {}", a_alt.len(), self.config.d),
            ));
        }
        let traits = ep.user.traits;
        Ok(self.scm.step(&ep.episode.states[t], a_alt, &traits, &ep.noises[t]))
    }

    /// Exact noise of a factual transition.
    pub fn abduct(&self, s: &[f64], a: &[f64], traits: &TraitVector, next: &[f64]) -> Vec<f64> {
        self.scm
            .mean_next(s, a, traits)
            .into_iter()
            .zip(next)
            .map(|(m, n)| n - m)
            .collect()
    }
}

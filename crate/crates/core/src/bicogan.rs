//! Transition learning with a bidirectional conditional GAN.
//!
//! The generator maps `z = (s_t, a_t, L_t, ε)` to a next state, the encoder
//! maps a next state back to `(ŝ_t, â_t, L̂_t, ε̂)`, and the discriminator
//! scores `(z, s_{t+1})` pairs. Encoder pairs are the "real" side and
//! generator pairs the "fake" side of the minimax game.
//!
//! Counterfactuals follow abduction, action and prediction: the encoder
//! recovers `ε̂` from the factual next state, the action is swapped, and the
//! generator is run again.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{Episode, TraitVector, TRAIT_DIM};
use crate::dppr::{DpprModel, ProgressiveEstimator};
use crate::error::{Error, Result};
use crate::nn::{Activation, AdamConfig, AdamState, Graph, Mlp, ParamSet, Tensor, Var};
use crate::rng::{derive_seed, normal_vec, seeded, Rng};
use crate::synthworld::SynthEpisode;

/// One `(s_t, a_t, L_t) → s_{t+1}` step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmTransition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub traits: TraitVector,
    pub next: Vec<f64>,
    /// The true `ε_{t+1}`, known only for synthetic data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<Vec<f64>>,
}

/// Where `L_t` comes from when cutting episodes into transitions.
#[derive(Clone, Copy, Debug)]
pub enum TraitSource<'a> {
    /// Running DPPR estimate over turns `0..=t`.
    Progressive(&'a DpprModel),
    /// The episode's own labels.
    Labels,
}

/// All valid transitions of `episodes`, in episode then step order.
pub fn transitions(episodes: &[Episode], source: TraitSource<'_>) -> Result<Vec<ScmTransition>> {
    let mut out = Vec::new();
    for ep in episodes {
        let mut est = match source {
            TraitSource::Progressive(m) => Some(ProgressiveEstimator::new(m)),
            TraitSource::Labels => None,
        };
        for t in 0..ep.turns() {
            let traits = match est.as_mut() {
                Some(e) => e.push(ep.turn(t))?,
                None => ep.traits.ok_or_else(|| {
                    Error::InvalidInput(format!("episode `{}` has no trait labels", ep.id))
                })?,
            };
            out.push(ScmTransition {
                state: ep.states[t].clone(),
                action: ep.actions[t].clone(),
                traits,
                next: ep.states[t + 1].clone(),
                noise: None,
            });
        }
    }
    Ok(out)
}

/// Transitions of synthetic episodes with their true traits and noise.
pub fn synthetic_transitions(episodes: &[SynthEpisode]) -> Vec<ScmTransition> {
    let mut out = Vec::new();
    for ep in episodes {
        let e = &ep.episode;
        for t in 0..e.turns() {
            out.push(ScmTransition {
                state: e.states[t].clone(),
                action: e.actions[t].clone(),
                traits: ep.user.traits,
                next: e.states[t + 1].clone(),
                noise: Some(ep.noises[t].clone()),
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCoupling {
    /// `G = μ(s, a, L) + exp(log_scale) ⊙ ε`
    #[default]
    Additive,
    /// `G = MLP(s, a, L, ε)`
    Joint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorLoss {
    /// Generator and encoder minimize the same value the discriminator maximizes.
    #[default]
    Minimax,
    /// Generator and encoder maximize the log-probability of the opposite label.
    NonSaturating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BicoganConfig {
    pub hidden: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    /// Weight of the regularizer `R`.
    pub lambda: f64,
    /// Weight of `‖G(s, a, L, ε̂) − s_{t+1}‖²` inside `R`.
    pub reconstruction_weight: f64,
    /// Weight of `‖G(s, a, L, 0) − s_{t+1}‖²` inside `R`.
    pub mean_fit_weight: f64,
    pub noise_coupling: NoiseCoupling,
    pub generator_loss: GeneratorLoss,
    pub leaky_slope: f64,
    /// Quantile of training consistency errors used as the tolerance.
    pub tolerance_quantile: f64,
    pub seed: u64,
}

impl Default for BicoganConfig {
    fn default() -> Self {
        BicoganConfig {
            hidden: 100,
            batch_size: 100,
            lr: 1e-4,
            epochs: 10,
            lambda: 1.0,
            reconstruction_weight: 1.0,
            mean_fit_weight: 1.0,
            noise_coupling: NoiseCoupling::Additive,
            generator_loss: GeneratorLoss::Minimax,
            leaky_slope: 0.2,
            tolerance_quantile: 0.95,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "seed")]
pub enum NoiseMode {
    /// `ε̂` from the encoder applied to the factual next state.
    Abducted,
    Zero,
    Sampled(u64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiCoGanModel {
    pub d: usize,
    pub noise_coupling: NoiseCoupling,
    pub generator: Mlp,
    pub encoder: Mlp,
    pub discriminator: Mlp,
    pub g_params: ParamSet,
    pub e_params: ParamSet,
    pub d_params: ParamSet,
    /// Consistency tolerance fitted on the training transitions.
    pub tolerance: Option<f64>,
}

const LOG_SCALE: &str = "g.log_scale";
/// Probabilities reported by the discriminator stay inside this margin of 0 and 1.
const PROB_EPS: f64 = 1e-15;

fn centered(traits: &TraitVector) -> [f64; TRAIT_DIM] {
    traits.centered()
}

fn concat_rows(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

impl BiCoGanModel {
    pub fn new(d: usize, config: &BicoganConfig) -> Result<Self> {
        if d == 0 || config.hidden == 0 {
            return Err(Error::InvalidInput("BiCoGAN widths must be positive".into()));
        }
        let mut rng = seeded(derive_seed(config.seed, "bicogan.init"));
        let h = config.hidden;
        let z = 3 * d + TRAIT_DIM;
        let mut g_params = ParamSet::new();
        let g_in = match config.noise_coupling {
            NoiseCoupling::Additive => 2 * d + TRAIT_DIM,
            NoiseCoupling::Joint => z,
        };
        let generator = Mlp::new(&mut g_params, "g", &[g_in, h, h, d], Activation::Tanh, Activation::Identity, &mut rng)?;
        if config.noise_coupling == NoiseCoupling::Additive {
            g_params.insert(LOG_SCALE, Tensor::filled(&[d], (0.1f64).ln()))?;
        }
        let mut e_params = ParamSet::new();
        let encoder = Mlp::new(&mut e_params, "e", &[d, h, h, z], Activation::Tanh, Activation::Identity, &mut rng)?;
        let mut d_params = ParamSet::new();
        let discriminator = Mlp::new(
            &mut d_params,
            "d",
            &[z + d, h, h, 1],
            Activation::LeakyRelu(config.leaky_slope),
            Activation::Identity,
            &mut rng,
        )?;
        Ok(BiCoGanModel {
            d,
            noise_coupling: config.noise_coupling,
            generator,
            encoder,
            discriminator,
            g_params,
            e_params,
            d_params,
            tolerance: None,
        })
    }

    fn check_width(&self, what: &str, v: &[f64]) -> Result<()> {
        if v.len() != self.d {
            return Err(Error::shape(
                "bicogan",
                format!("{what} of dimension {}, model has d = {}", v.len(), self.d),
            ));
        }
        Ok(())
    }

    /// Generator on a batch: `cond` is `[B, 2d+5]` (s, a, L−3), `noise` is `[B, d]`.
    fn gen(&self, g: &mut Graph, cond: Var, noise: Var) -> Result<Var> {
        match self.noise_coupling {
            NoiseCoupling::Additive => {
                let mean = self.generator.forward(g, &self.g_params, cond)?;
                let log_scale = g.param(&self.g_params, LOG_SCALE)?;
                let scale = g.exp(log_scale);
                let scaled = g.scale_cols(noise, scale)?;
                g.add(mean, scaled)
            }
            NoiseCoupling::Joint => {
                let z = g.concat(&[cond, noise])?;
                self.generator.forward(g, &self.g_params, z)
            }
        }
    }

    fn enc(&self, g: &mut Graph, next: Var) -> Result<Var> {
        self.encoder.forward(g, &self.e_params, next)
    }

    fn disc(&self, g: &mut Graph, z: Var, next: Var) -> Result<Var> {
        let x = g.concat(&[z, next])?;
        self.discriminator.forward(g, &self.d_params, x)
    }

    fn cond_tensor(&self, states: &[&[f64]], actions: &[&[f64]], traits: &[TraitVector]) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = states
            .iter()
            .zip(actions)
            .zip(traits)
            .map(|((s, a), l)| concat_rows(&[s, a, &centered(l)]))
            .collect();
        Tensor::from_rows(&rows)
    }

    /// Encoder output split into `(ŝ, â, L̂, ε̂)` for one next state.
    pub fn encode(&self, next: &[f64]) -> Result<(Vec<f64>, Vec<f64>, TraitVector, Vec<f64>)> {
        self.check_width("next state", next)?;
        let mut g = Graph::new();
        let x = g.input(Tensor::row(next));
        let out = self.enc(&mut g, x)?;
        let v = g.value(out).data();
        let d = self.d;
        let mut l = [0.0; TRAIT_DIM];
        for (k, x) in l.iter_mut().enumerate() {
            *x = v[2 * d + k] + 3.0;
        }
        Ok((
            v[..d].to_vec(),
            v[d..2 * d].to_vec(),
            TraitVector(l),
            v[2 * d + TRAIT_DIM..].to_vec(),
        ))
    }

    /// `ε̂` for each factual next state.
    pub fn abduct_batch(&self, next: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
        if next.is_empty() {
            return Ok(Vec::new());
        }
        for n in next {
            self.check_width("next state", n)?;
        }
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(next)?);
        let out = self.enc(&mut g, x)?;
        let off = 2 * self.d + TRAIT_DIM;
        Ok(g.value(out).to_rows().into_iter().map(|r| r[off..].to_vec()).collect())
    }

    pub fn abduct_noise(&self, t: &ScmTransition) -> Result<Vec<f64>> {
        Ok(self.abduct_batch(&[&t.next])?.remove(0))
    }

    /// `G(s, a, L, ε)` for a batch with explicit noise rows.
    pub fn generate_batch(
        &self,
        states: &[&[f64]],
        actions: &[&[f64]],
        traits: &[TraitVector],
        noise: &[&[f64]],
    ) -> Result<Vec<Vec<f64>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        if actions.len() != states.len() || traits.len() != states.len() || noise.len() != states.len() {
            return Err(Error::shape("bicogan", "batch parts have different lengths"));
        }
        for ((s, a), e) in states.iter().zip(actions).zip(noise) {
            self.check_width("state", s)?;
            self.check_width("action", a)?;
            self.check_width("noise", e)?;
        }
        let mut g = Graph::new();
        let c = g.input(self.cond_tensor(states, actions, traits)?);
        let n = g.input(Tensor::from_rows(noise)?);
        let out = self.gen(&mut g, c, n)?;
        Ok(g.value(out).to_rows())
    }

    /// Counterfactual next state under `a_alt`. `factual_next` is required
    /// for [`NoiseMode::Abducted`].
    pub fn generate_counterfactual(
        &self,
        state: &[f64],
        a_alt: &[f64],
        traits: &TraitVector,
        mode: &NoiseMode,
        factual_next: Option<&[f64]>,
    ) -> Result<Vec<f64>> {
        let noise = match mode {
            NoiseMode::Abducted => {
                let next = factual_next.ok_or_else(|| {
                    Error::Contract("abducted noise needs the factual next state".into())
                })?;
                self.abduct_batch(&[next])?.remove(0)
            }
            NoiseMode::Zero => vec![0.0; self.d],
            NoiseMode::Sampled(seed) => normal_vec(&mut seeded(*seed), self.d, 1.0),
        };
        Ok(self.generate_batch(&[state], &[a_alt], &[*traits], &[&noise])?.remove(0))
    }

    /// `D(z, s_{t+1})` as a probability clamped inside `(0, 1)`.
    pub fn discriminate(&self, z: &[f64], next: &[f64]) -> Result<f64> {
        let mut g = Graph::new();
        let zi = g.input(Tensor::row(z));
        let ni = g.input(Tensor::row(next));
        let logit = self.disc(&mut g, zi, ni)?;
        let p = crate::nn::sigmoid(g.value(logit).item()?);
        Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
    }

    /// `‖G(s, a, L, ε̂(s_{t+1})) − s_{t+1}‖` for each transition.
    pub fn consistency_errors(&self, ts: &[ScmTransition]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(ts.len());
        for chunk in ts.chunks(512) {
            let next: Vec<&[f64]> = chunk.iter().map(|t| t.next.as_slice()).collect();
            let eps = self.abduct_batch(&next)?;
            let s: Vec<&[f64]> = chunk.iter().map(|t| t.state.as_slice()).collect();
            let a: Vec<&[f64]> = chunk.iter().map(|t| t.action.as_slice()).collect();
            let l: Vec<TraitVector> = chunk.iter().map(|t| t.traits).collect();
            let e: Vec<&[f64]> = eps.iter().map(Vec::as_slice).collect();
            let gen = self.generate_batch(&s, &a, &l, &e)?;
            for (g, t) in gen.iter().zip(chunk) {
                out.push(l2(g, &t.next));
            }
        }
        Ok(out)
    }
}

pub fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Linear-interpolated quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BicoganHistory {
    pub d_loss: Vec<f64>,
    pub g_loss: Vec<f64>,
    pub r_loss: Vec<f64>,
}

/// One minibatch with the generator noise already drawn.
#[derive(Clone, Debug)]
pub struct Batch {
    cond: Tensor,
    next: Tensor,
    state_action: Tensor,
    noise: Tensor,
}

impl Batch {
    pub fn sample(model: &BiCoGanModel, ts: &[&ScmTransition], rng: &mut Rng) -> Result<Self> {
        make_batch(model, ts, rng)
    }
}

fn make_batch(model: &BiCoGanModel, ts: &[&ScmTransition], rng: &mut Rng) -> Result<Batch> {
    let s: Vec<&[f64]> = ts.iter().map(|t| t.state.as_slice()).collect();
    let a: Vec<&[f64]> = ts.iter().map(|t| t.action.as_slice()).collect();
    let l: Vec<TraitVector> = ts.iter().map(|t| t.traits).collect();
    let next: Vec<&[f64]> = ts.iter().map(|t| t.next.as_slice()).collect();
    let sa: Vec<Vec<f64>> = ts.iter().map(|t| concat_rows(&[&t.state, &t.action])).collect();
    let noise = normal_vec(rng, ts.len() * model.d, 1.0);
    Ok(Batch {
        cond: model.cond_tensor(&s, &a, &l)?,
        next: Tensor::from_rows(&next)?,
        state_action: Tensor::from_rows(&sa)?,
        noise: Tensor::matrix(ts.len(), model.d, noise)?,
    })
}

/// Real and fake discriminator logits for one batch.
struct Sides {
    real: Var,
    fake: Var,
    encoded: Var,
    next: Var,
    cond: Var,
}

fn sides(model: &BiCoGanModel, g: &mut Graph, b: &Batch) -> Result<Sides> {
    let cond = g.input(b.cond.clone());
    let next = g.input(b.next.clone());
    let noise = g.input(b.noise.clone());
    let encoded = model.enc(g, next)?;
    let real = model.disc(g, encoded, next)?;
    let fake_next = model.gen(g, cond, noise)?;
    let z = g.concat(&[cond, noise])?;
    let fake = model.disc(g, z, fake_next)?;
    Ok(Sides {
        real,
        fake,
        encoded,
        next,
        cond,
    })
}

fn mean_sq(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let diff = g.sub(a, b)?;
    let sq = g.square(diff);
    let rows = g.sum_cols(sq);
    Ok(g.mean(rows))
}

/// `−mean(log D(real) + log(1 − D(fake)))`, minimized by the discriminator.
pub fn discriminator_loss(model: &BiCoGanModel, g: &mut Graph, b: &Batch) -> Result<Var> {
    let s = sides(model, g, b)?;
    let v = value_fn(g, &s)?;
    Ok(g.scale(v, -1.0))
}

/// `mean(log D(real) + log(1 − D(fake)))`.
fn value_fn(g: &mut Graph, s: &Sides) -> Result<Var> {
    let lr = g.log_sigmoid(s.real);
    let neg_fake = g.scale(s.fake, -1.0);
    let lf = g.log_sigmoid(neg_fake);
    let v = g.add(lr, lf)?;
    Ok(g.mean(v))
}

/// Terms of the generator/encoder objective on one graph.
#[derive(Clone, Copy, Debug)]
pub struct GeLoss {
    pub adversarial: Var,
    pub regularizer: Var,
    /// `adversarial + λ·regularizer`
    pub total: Var,
}

pub fn generator_encoder_loss(model: &BiCoGanModel, g: &mut Graph, b: &Batch, config: &BicoganConfig) -> Result<GeLoss> {
    let d = model.d;
    let s = sides(model, g, b)?;
    let adversarial = match config.generator_loss {
        GeneratorLoss::Minimax => value_fn(g, &s)?,
        GeneratorLoss::NonSaturating => {
            let lf = g.log_sigmoid(s.fake);
            let neg_real = g.scale(s.real, -1.0);
            let lr = g.log_sigmoid(neg_real);
            let v = g.add(lf, lr)?;
            let v = g.mean(v);
            g.scale(v, -1.0)
        }
    };
    let sa_hat = g.slice_cols(s.encoded, 0, 2 * d)?;
    let sa = g.input(b.state_action.clone());
    let mut r = mean_sq(g, sa_hat, sa)?;
    if config.reconstruction_weight != 0.0 {
        let eps_hat = g.slice_cols(s.encoded, 2 * d + TRAIT_DIM, d)?;
        let recon = model.gen(g, s.cond, eps_hat)?;
        let term = mean_sq(g, recon, s.next)?;
        let term = g.scale(term, config.reconstruction_weight);
        r = g.add(r, term)?;
    }
    if config.mean_fit_weight != 0.0 {
        let rows = g.value(s.cond).rows();
        let zero = g.input(Tensor::zeros(&[rows, d]));
        let fit = model.gen(g, s.cond, zero)?;
        let term = mean_sq(g, fit, s.next)?;
        let term = g.scale(term, config.mean_fit_weight);
        r = g.add(r, term)?;
    }
    let weighted = g.scale(r, config.lambda);
    let total = g.add(adversarial, weighted)?;
    Ok(GeLoss { adversarial, regularizer: r, total })
}

/// Alternating updates: one discriminator step then one generator/encoder step per batch.
pub fn train_bicogan(ts: &[ScmTransition], config: &BicoganConfig) -> Result<(BiCoGanModel, BicoganHistory)> {
    let first = ts.first().ok_or_else(|| Error::InvalidInput("no transitions to train on".into()))?;
    let d = first.state.len();
    let mut model = BiCoGanModel::new(d, config)?;
    for (i, t) in ts.iter().enumerate() {
        if t.state.len() != d || t.action.len() != d || t.next.len() != d {
            return Err(Error::shape("bicogan", format!("transition {i} does not have dimension {d}")));
        }
    }
    let adam = AdamConfig::with_lr(config.lr);
    let mut opt_g = AdamState::new(adam, &model.g_params);
    let mut opt_e = AdamState::new(adam, &model.e_params);
    let mut opt_d = AdamState::new(adam, &model.d_params);
    let mut rng = seeded(derive_seed(config.seed, "bicogan.train"));
    let mut order: Vec<usize> = (0..ts.len()).collect();
    let mut history = BicoganHistory::default();
    let batch = config.batch_size.max(1);
    let mut step = 0usize;
    let diag = |step: usize, what: &str, e: Error| {
        Error::NonFinite(format!("{what} at step {step}: {e}"))
    };
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let items: Vec<&ScmTransition> = chunk.iter().map(|&i| &ts[i]).collect();
            let b = make_batch(&model, &items, &mut rng)?;

            let mut g = Graph::new();
            let d_loss = discriminator_loss(&model, &mut g, &b)?;
            let grads = g.backward(d_loss).map_err(|e| diag(step, "discriminator loss", e))?;
            model.d_params.accumulate(&grads);
            opt_d.step(&mut model.d_params)?;
            history.d_loss.push(g.value(d_loss).item()?);

            let mut g = Graph::new();
            let ge = generator_encoder_loss(&model, &mut g, &b, config)?;
            let grads = g.backward(ge.total).map_err(|e| diag(step, "generator/encoder loss", e))?;
            model.g_params.accumulate(&grads);
            model.e_params.accumulate(&grads);
            opt_g.step(&mut model.g_params)?;
            opt_e.step(&mut model.e_params)?;
            history.g_loss.push(g.value(ge.adversarial).item()?);
            history.r_loss.push(g.value(ge.regularizer).item()?);
            step += 1;
        }
    }
    let errs = model.consistency_errors(ts)?;
    model.tolerance = Some(quantile(&errs, config.tolerance_quantile));
    Ok((model, history))
}

/// Fraction of correct real/fake calls at threshold 0.5 on one batch of
/// encoder (real) and generator (fake) pairs.
pub fn discriminator_accuracy(model: &BiCoGanModel, ts: &[ScmTransition], seed: u64) -> Result<f64> {
    let items: Vec<&ScmTransition> = ts.iter().collect();
    let b = make_batch(model, &items, &mut seeded(seed))?;
    let mut g = Graph::new();
    let s = sides(model, &mut g, &b)?;
    let real = g.value(s.real).data().iter().filter(|&&l| l > 0.0).count();
    let fake = g.value(s.fake).data().iter().filter(|&&l| l <= 0.0).count();
    Ok((real + fake) as f64 / (2 * ts.len()) as f64)
}

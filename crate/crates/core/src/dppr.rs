//! Trait regression from dialogue turns.
//!
//! A window of `w` turns (`s_t ++ a_t` rows) is pooled by single-head
//! scaled dot-product attention and mapped to five trait values by three
//! dense layers. [`ProgressiveEstimator`] keeps the running mean of per-turn
//! predictions that downstream stages use as `L_t`.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{TraitVector, TurnWindow, TRAIT_DIM};
use crate::error::{Error, Result};
use crate::nn::{mse, Activation, AdamConfig, AdamState, Graph, Mlp, ParamSet, Tensor, Var};
use crate::rng::{derive_seed, seeded};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpprConfig {
    pub hidden: usize,
    pub attention_dim: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub window: usize,
    pub folds: usize,
    pub seed: u64,
}

impl Default for DpprConfig {
    fn default() -> Self {
        DpprConfig {
            hidden: 1024,
            attention_dim: 32,
            batch_size: 64,
            lr: 1e-4,
            epochs: 100,
            window: 1,
            folds: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpprModel {
    pub input_dim: usize,
    pub attention_dim: usize,
    pub window: usize,
    pub head: Mlp,
    pub params: ParamSet,
}

const KEY: &str = "dppr.key";
const QUERY: &str = "dppr.query";
const VALUE_W: &str = "dppr.value.w";
const VALUE_B: &str = "dppr.value.b";

impl DpprModel {
    /// `input_dim` is the width of one turn row (`2d`).
    pub fn new(input_dim: usize, config: &DpprConfig) -> Result<Self> {
        if input_dim == 0 || config.attention_dim == 0 || config.hidden == 0 {
            return Err(Error::InvalidInput("DPPR widths must be positive".into()));
        }
        let mut rng = seeded(derive_seed(config.seed, "dppr.init"));
        let mut params = ParamSet::new();
        let k = config.attention_dim;
        params.insert_uniform(KEY, &[input_dim, k], input_dim, &mut rng)?;
        params.insert_uniform(QUERY, &[k, 1], k, &mut rng)?;
        params.insert_uniform(VALUE_W, &[input_dim, k], input_dim, &mut rng)?;
        params.insert_uniform(VALUE_B, &[k], input_dim, &mut rng)?;
        let h = config.hidden;
        let head = Mlp::new(
            &mut params,
            "dppr.head",
            &[k, h, h, TRAIT_DIM],
            Activation::Tanh,
            Activation::Identity,
            &mut rng,
        )?;
        // Start every output at the scale midpoint.
        params
            .get_mut(&head.last().bias)
            .expect("head bias registered")
            .data_mut()
            .iter_mut()
            .for_each(|b| *b = TraitVector::PRIOR.0[0]);
        Ok(DpprModel {
            input_dim,
            attention_dim: k,
            window: config.window,
            head,
            params,
        })
    }

    /// Forward a batch of equally sized windows stacked as `[batch·w, input_dim]`.
    fn forward(&self, g: &mut Graph, p: &ParamSet, rows: Tensor, w: usize) -> Result<Var> {
        if rows.cols() != self.input_dim {
            return Err(Error::shape(
                "dppr",
                format!("turn width {}, model expects {}", rows.cols(), self.input_dim),
            ));
        }
        let x = g.input(rows);
        let wk = g.param(p, KEY)?;
        let q = g.param(p, QUERY)?;
        let wv = g.param(p, VALUE_W)?;
        let bv = g.param(p, VALUE_B)?;
        let keys = g.matmul(x, wk)?;
        let scores = g.matmul(keys, q)?;
        let scores = g.scale(scores, 1.0 / (self.attention_dim as f64).sqrt());
        let weights = g.segment_softmax(scores, w)?;
        let values = g.matmul(x, wv)?;
        let values = g.add_bias(values, bv)?;
        let weighted = g.row_scale(values, weights)?;
        let pooled = g.segment_sum(weighted, w)?;
        self.head.forward(g, p, pooled)
    }

    fn stack(windows: &[&[Vec<f64>]]) -> Result<(Tensor, usize)> {
        let w = windows.first().map_or(0, |x| x.len());
        if w == 0 || windows.iter().any(|x| x.len() != w) {
            return Err(Error::InvalidInput("windows in one batch must share a positive size".into()));
        }
        let rows: Vec<&Vec<f64>> = windows.iter().flat_map(|x| x.iter()).collect();
        Ok((Tensor::from_rows(&rows)?, w))
    }

    /// Mean squared trait error of equally sized windows under `params`.
    pub fn batch_loss(&self, g: &mut Graph, params: &ParamSet, windows: &[&TurnWindow]) -> Result<Var> {
        let refs: Vec<&[Vec<f64>]> = windows.iter().map(|w| w.turns.as_slice()).collect();
        let (rows, w) = Self::stack(&refs)?;
        let targets: Vec<&[f64]> = windows.iter().map(|w| w.target.as_slice()).collect();
        let y = self.forward(g, params, rows, w)?;
        let t = g.input(Tensor::from_rows(&targets)?);
        mse(g, y, t)
    }

    /// Trait estimate for one window of any positive size.
    pub fn predict_turns(&self, turns: &[Vec<f64>]) -> Result<TraitVector> {
        let (rows, w) = Self::stack(&[turns])?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, &self.params, rows, w)?;
        TraitVector::from_slice(g.value(out).data())
    }

    pub fn predict(&self, window: &TurnWindow) -> Result<TraitVector> {
        self.predict_turns(&window.turns)
    }

    /// Predictions for equally sized windows, evaluated in chunks.
    pub fn predict_batch(&self, windows: &[TurnWindow]) -> Result<Vec<TraitVector>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let refs: Vec<&[Vec<f64>]> = chunk.iter().map(|w| w.turns.as_slice()).collect();
            let (rows, w) = Self::stack(&refs)?;
            let mut g = Graph::new();
            let y = self.forward(&mut g, &self.params, rows, w)?;
            for r in g.value(y).to_rows() {
                out.push(TraitVector::from_slice(&r)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DpprHistory {
    pub epoch_loss: Vec<f64>,
}

/// Minibatch Adam on mean squared trait error.
pub fn train_dppr(windows: &[TurnWindow], config: &DpprConfig) -> Result<(DpprModel, DpprHistory)> {
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidInput("no training windows".into()))?;
    let input_dim = first.turns[0].len();
    let w = first.size();
    for (i, win) in windows.iter().enumerate() {
        if win.size() != w || win.turns.iter().any(|t| t.len() != input_dim) {
            return Err(Error::InvalidInput(format!(
                "window {i} does not match size {w} and turn width {input_dim}"
            )));
        }
    }
    let mut model = DpprModel::new(input_dim, &DpprConfig { window: w, ..config.clone() })?;
    let mut adam = AdamState::new(AdamConfig::with_lr(config.lr), &model.params);
    let mut rng = seeded(derive_seed(config.seed, "dppr.shuffle"));
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = DpprHistory::default();
    let batch = config.batch_size.max(1);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(batch) {
            let batch: Vec<&TurnWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let mut g = Graph::new();
            let loss = model.batch_loss(&mut g, &model.params, &batch)?;
            total += g.value(loss).item()? * chunk.len() as f64;
            g.backward_into(loss, &mut model.params)?;
            adam.step(&mut model.params)?;
        }
        history.epoch_loss.push(total / windows.len() as f64);
    }
    Ok((model, history))
}

/// Running mean of per-turn predictions; turn `t` sees the last `w` turns up
/// to and including itself.
#[derive(Clone, Debug)]
pub struct ProgressiveEstimator<'a> {
    model: &'a DpprModel,
    turns: Vec<Vec<f64>>,
    sum: [f64; TRAIT_DIM],
    per_turn: Vec<TraitVector>,
}

impl<'a> ProgressiveEstimator<'a> {
    pub fn new(model: &'a DpprModel) -> Self {
        ProgressiveEstimator {
            model,
            turns: Vec::new(),
            sum: [0.0; TRAIT_DIM],
            per_turn: Vec::new(),
        }
    }

    /// Current `L_t`; the prior before any turn.
    pub fn estimate(&self) -> TraitVector {
        let n = self.per_turn.len();
        if n == 0 {
            return TraitVector::PRIOR;
        }
        TraitVector(self.sum.map(|s| s / n as f64))
    }

    /// Add one turn (`s_t ++ a_t`) and return the updated estimate.
    pub fn push(&mut self, turn: Vec<f64>) -> Result<TraitVector> {
        self.turns.push(turn);
        let start = self.turns.len().saturating_sub(self.model.window.max(1));
        let v = self.model.predict_turns(&self.turns[start..])?;
        for (s, x) in self.sum.iter_mut().zip(v.0) {
            *s += x;
        }
        self.per_turn.push(v);
        Ok(self.estimate())
    }

    pub fn per_turn(&self) -> &[TraitVector] {
        &self.per_turn
    }
}

/// `L_t` after the first `count` turns of `turns`.
pub fn progressive_estimate(model: &DpprModel, turns: &[Vec<f64>], count: usize) -> Result<TraitVector> {
    if count > turns.len() {
        return Err(Error::OutOfRange {
            index: count,
            valid: format!("0..={}", turns.len()),
        });
    }
    let mut est = ProgressiveEstimator::new(model);
    for t in &turns[..count] {
        est.push(t.clone())?;
    }
    Ok(est.estimate())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionMetrics {
    pub mse: f64,
    pub rmse: f64,
    pub mape: f64,
    pub r2: f64,
    pub mae: f64,
}

/// MSE, RMSE, MAPE, R² and MAE pooled over every sample and dimension.
/// R² uses per-dimension target means.
pub fn regression_metrics<P: AsRef<[f64]>, T: AsRef<[f64]>>(
    predictions: &[P],
    targets: &[T],
) -> Result<RegressionMetrics> {
    if predictions.len() != targets.len() || targets.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least two paired samples, got {} predictions and {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let k = targets[0].as_ref().len();
    let mut means = vec![0.0; k];
    for (p, t) in predictions.iter().zip(targets) {
        if p.as_ref().len() != k || t.as_ref().len() != k {
            return Err(Error::shape("regression_metrics", "rows of different widths"));
        }
        for (m, v) in means.iter_mut().zip(t.as_ref()) {
            *m += v;
        }
    }
    let n = targets.len() as f64;
    means.iter_mut().for_each(|m| *m /= n);
    let (mut sq, mut abs, mut pct, mut tot) = (0.0, 0.0, 0.0, 0.0);
    for (p, t) in predictions.iter().zip(targets) {
        for ((&pv, &tv), m) in p.as_ref().iter().zip(t.as_ref()).zip(&means) {
            if tv == 0.0 {
                return Err(Error::InvalidInput(
                    "MAPE is undefined for a zero target; exclude or offset such samples".into(),
                ));
            }
            let e = pv - tv;
            sq += e * e;
            abs += e.abs();
            pct += e.abs() / tv.abs();
            tot += (tv - m) * (tv - m);
        }
    }
    if tot == 0.0 {
        return Err(Error::InvalidInput("R2 is undefined when all targets are identical".into()));
    }
    let count = n * k as f64;
    let mse = sq / count;
    Ok(RegressionMetrics {
        mse,
        rmse: mse.sqrt(),
        mape: pct / count,
        r2: 1.0 - sq / tot,
        mae: abs / count,
    })
}

/// Fold index of every window; all windows of one episode share a fold.
pub fn episode_folds(windows: &[TurnWindow], folds: usize, seed: u64) -> Result<Vec<usize>> {
    let mut episodes: Vec<usize> = windows.iter().map(|w| w.episode).collect();
    episodes.sort_unstable();
    episodes.dedup();
    if folds < 2 || episodes.len() < folds {
        return Err(Error::InvalidInput(format!(
            "{} episodes cannot fill {folds} folds",
            episodes.len()
        )));
    }
    episodes.shuffle(&mut seeded(derive_seed(seed, "dppr.folds")));
    let fold: std::collections::HashMap<usize, usize> =
        episodes.iter().enumerate().map(|(i, &e)| (e, i % folds)).collect();
    Ok(windows.iter().map(|w| fold[&w.episode]).collect())
}

/// Metrics of `k`-fold cross-validation with folds split by episode.
pub fn cross_validate(windows: &[TurnWindow], config: &DpprConfig) -> Result<Vec<RegressionMetrics>> {
    let assignment = episode_folds(windows, config.folds, config.seed)?;
    let mut out = Vec::with_capacity(config.folds);
    for f in 0..config.folds {
        let pick = |want: bool| -> Vec<TurnWindow> {
            windows
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| (a == f) == want)
                .map(|(w, _)| w.clone())
                .collect()
        };
        let (test, train) = (pick(true), pick(false));
        let (model, _) = train_dppr(&train, config)?;
        let preds = model.predict_batch(&test)?;
        let p: Vec<&[f64]> = preds.iter().map(TraitVector::as_slice).collect();
        let t: Vec<&[f64]> = test.iter().map(|w| w.target.as_slice()).collect();
        out.push(regression_metrics(&p, &t)?);
    }
    Ok(out)
}

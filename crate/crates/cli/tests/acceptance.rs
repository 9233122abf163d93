//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p cfdialog-cli --test acceptance`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use cfdialog_cli::config::ExperimentConfig;
use cfdialog_cli::pipeline::{load_summary, run_all, Run};
use cfdialog_core::bicogan::{
    discriminator_loss, generator_encoder_loss, l2, synthetic_transitions, train_bicogan, Batch, BiCoGanModel,
    BicoganConfig, NoiseMode, ScmTransition,
};
use cfdialog_core::counterfactual::balance_select;
use cfdialog_core::d3qn::{evaluate_policy, train_policy, Case, ChainEnv, PolicyConfig, QNet, TdSample};
use cfdialog_core::dataset::{pad_episodes, split, split_indices, window_turns, Episode, TraitVector, TurnWindow};
use cfdialog_core::dppr::{regression_metrics, train_dppr, DpprConfig, DpprModel, RegressionMetrics};
use cfdialog_core::metrics::cca_top_components;
use cfdialog_core::nn::{
    max_relative_error, mse, Activation, CellKind, Mlp, ParamSet, RecurrentCell, Tensor,
};
use cfdialog_core::reward::{step_reward, RewardConfig, RewardModel};
use cfdialog_core::rng::{normal_vec, seeded, Rng};
use cfdialog_core::synthworld::{SynthEpisode, World, WorldConfig};
use rand::seq::SliceRandom;
use rand::Rng as _;

const FD_STEP: f64 = 1e-3;
/// Keeps the stencil from straddling a leaky-ReLU kink.
const FD_STEP_PIECEWISE: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const FD_INSTANCES: u64 = 20;
const CONSISTENCY_MIN: f64 = 0.9;
const RECOVERY_R2_MIN: f64 = 0.9;
const CONTROL_R2_BAND: (f64, f64) = (-0.1, 0.1);
const WINDOWS: [usize; 4] = [1, 2, 4, 8];
const CHAIN_Q_TOL: f64 = 0.05;
const CHAIN_MAX_EPOCHS: usize = 20;
const POLICY_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const CCA_PLANTED: [f64; 2] = [0.9, 0.5];
const CCA_PLANTED_TOL: f64 = 0.05;
const CCA_EXACT_TOL: f64 = 1e-6;

const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const BICOGAN_BUDGET: Duration = Duration::from_secs(5 * 60);
const DPPR_BUDGET: Duration = Duration::from_secs(5 * 60);
const CHAIN_BUDGET: Duration = Duration::from_secs(2 * 60);
const POLICY_BUDGET: Duration = Duration::from_secs(30 * 60);

struct Line {
    name: &'static str,
    pass: bool,
}

fn check(lines: &mut Vec<Line>, name: &'static str, budget: Option<Duration>, f: impl FnOnce() -> (bool, String)) {
    let start = Instant::now();
    let (ok, detail) = f();
    let elapsed = start.elapsed();
    let in_time = budget.is_none_or(|b| elapsed <= b);
    let pass = ok && in_time;
    let budget_note = match budget {
        Some(b) if !in_time => format!(" over budget {:.0}s", b.as_secs_f64()),
        _ => String::new(),
    };
    println!(
        "{} {name}: {detail} [{:.1}s{budget_note}]",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64()
    );
    lines.push(Line { name, pass });
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(rng, n, 1.0)).unwrap()
}

fn traits(rng: &mut Rng) -> TraitVector {
    TraitVector(std::array::from_fn(|_| rng.random_range(1.0..5.0)))
}

// Gradient checks.

type Fd = (&'static str, f64);

fn fd_nn_ops(seed: u64) -> Fd {
    let mut rng = seeded(1000 + seed);
    let mut p = ParamSet::new();
    p.insert("a", tensor(&mut rng, &[6, 3])).unwrap();
    p.insert("b", tensor(&mut rng, &[6, 3])).unwrap();
    p.insert("r", tensor(&mut rng, &[3])).unwrap();
    p.insert("q", tensor(&mut rng, &[3, 1])).unwrap();
    let err = max_relative_error(&p, FD_STEP, |g, p| {
        let a = g.param(p, "a")?;
        let b = g.param(p, "b")?;
        let r = g.param(p, "r")?;
        let q = g.param(p, "q")?;
        let s = g.sigmoid(a);
        let l = g.log_sigmoid(b);
        let e = g.exp(a);
        let m = g.mul(s, l)?;
        let m = g.add(m, e)?;
        let sc = g.scale_cols(m, r)?;
        let sub = g.sub(sc, b)?;
        let scores = g.matmul(sub, q)?;
        let w = g.segment_softmax(scores, 3)?;
        let weighted = g.row_scale(a, w)?;
        let pooled = g.segment_sum(weighted, 3)?;
        let cat = g.concat(&[pooled, pooled])?;
        let sl = g.slice_cols(cat, 2, 3)?;
        let rs = g.reshape(sl, &[3, 2])?;
        let sq = g.square(rs);
        let rows = g.sum_cols(sq);
        let t = g.tanh(rows);
        let t = g.add_scalar(t, 0.5);
        let t = g.scale(t, 1.7);
        Ok(g.mean(t))
    })
    .unwrap();
    ("tape ops", err)
}

fn fd_mlp(seed: u64) -> Fd {
    let mut rng = seeded(2000 + seed);
    let mut p = ParamSet::new();
    let net = Mlp::new(&mut p, "net", &[4, 6, 5, 3], Activation::Tanh, Activation::Sigmoid, &mut rng).unwrap();
    let x = tensor(&mut rng, &[5, 4]);
    let y = tensor(&mut rng, &[5, 3]);
    let err = max_relative_error(&p, FD_STEP, |g, p| {
        let xi = g.input(x.clone());
        let yi = g.input(y.clone());
        let out = net.forward(g, p, xi)?;
        mse(g, out, yi)
    })
    .unwrap();
    ("mlp", err)
}

fn fd_cell(kind: CellKind, seed: u64) -> Fd {
    let mut rng = seeded(3000 + seed);
    let mut p = ParamSet::new();
    let cell = RecurrentCell::new(&mut p, "cell", kind, 3, 4, &mut rng).unwrap();
    let xs: Vec<Tensor> = (0..5).map(|_| tensor(&mut rng, &[2, 3])).collect();
    let err = max_relative_error(&p, FD_STEP, |g, p| {
        let mut s = cell.zero_state(g, 2);
        for x in &xs {
            let xi = g.input(x.clone());
            s = cell.step(g, p, s, xi)?;
        }
        let sq = g.square(s.hidden);
        Ok(g.sum(sq))
    })
    .unwrap();
    (if kind == CellKind::Gated { "gated cell" } else { "lstm cell" }, err)
}

fn fd_dppr(seed: u64) -> Fd {
    let mut rng = seeded(4000 + seed);
    let d = 3;
    let cfg = DpprConfig { hidden: 6, attention_dim: 4, seed, ..Default::default() };
    let model = DpprModel::new(2 * d, &cfg).unwrap();
    let windows: Vec<TurnWindow> = (0..4)
        .map(|i| TurnWindow {
            episode: i,
            start: 0,
            turns: (0..1 + seed as usize % 3).map(|_| normal_vec(&mut rng, 2 * d, 1.0)).collect(),
            target: traits(&mut rng),
        })
        .collect();
    let refs: Vec<&TurnWindow> = windows.iter().collect();
    let err = max_relative_error(&model.params, FD_STEP, |g, p| model.batch_loss(g, p, &refs)).unwrap();
    ("dppr", err)
}

fn bicogan_fixture(seed: u64) -> (BiCoGanModel, Batch, BicoganConfig) {
    let mut rng = seeded(5000 + seed);
    let d = 3;
    let cfg = BicoganConfig {
        hidden: 5,
        reconstruction_weight: 0.5,
        mean_fit_weight: 0.5,
        seed,
        ..Default::default()
    };
    let model = BiCoGanModel::new(d, &cfg).unwrap();
    let ts: Vec<ScmTransition> = (0..4)
        .map(|_| ScmTransition {
            state: normal_vec(&mut rng, d, 1.0),
            action: normal_vec(&mut rng, d, 1.0),
            traits: traits(&mut rng),
            next: normal_vec(&mut rng, d, 1.0),
            noise: None,
        })
        .collect();
    let refs: Vec<&ScmTransition> = ts.iter().collect();
    let batch = Batch::sample(&model, &refs, &mut rng).unwrap();
    (model, batch, cfg)
}

fn fd_bicogan_discriminator(seed: u64) -> Fd {
    let (model, batch, _) = bicogan_fixture(seed);
    let err = max_relative_error(&model.d_params, FD_STEP_PIECEWISE, |g, p| {
        let mut m = model.clone();
        m.d_params = p.clone();
        discriminator_loss(&m, g, &batch)
    })
    .unwrap();
    ("bicogan discriminator", err)
}

fn fd_bicogan_generator_encoder(seed: u64) -> Fd {
    let (model, batch, cfg) = bicogan_fixture(seed);
    let g_err = max_relative_error(&model.g_params, FD_STEP_PIECEWISE, |g, p| {
        let mut m = model.clone();
        m.g_params = p.clone();
        Ok(generator_encoder_loss(&m, g, &batch, &cfg)?.total)
    })
    .unwrap();
    let e_err = max_relative_error(&model.e_params, FD_STEP_PIECEWISE, |g, p| {
        let mut m = model.clone();
        m.e_params = p.clone();
        Ok(generator_encoder_loss(&m, g, &batch, &cfg)?.total)
    })
    .unwrap();
    ("bicogan generator/encoder", g_err.max(e_err))
}

fn fd_reward(cell: CellKind, seed: u64) -> Fd {
    let world = World::new(WorldConfig { d: 3, horizon: 7, seed, ..Default::default() }).unwrap();
    let short = World::new(WorldConfig { d: 3, horizon: 5, seed: seed + 1, ..Default::default() }).unwrap();
    let mut eps: Vec<Episode> = world.generate(2, "fd").into_iter().map(|e| e.episode).collect();
    eps.extend(short.generate(2, "fd").into_iter().map(|e| e.episode));
    let eps = pad_episodes(eps, 7).unwrap();
    let refs: Vec<&Episode> = eps.iter().collect();
    let model = RewardModel::new(3, &RewardConfig { hidden: 4, cell, seed, ..Default::default() }).unwrap();
    let err = max_relative_error(&model.params, FD_STEP, |g, p| model.batch_loss(g, p, &refs)).unwrap();
    (if cell == CellKind::Gated { "reward (gated)" } else { "reward (lstm)" }, err)
}

fn fd_td(seed: u64) -> Fd {
    let mut rng = seeded(6000 + seed);
    let net = QNet::new(3, 2, 5, seed).unwrap();
    let batch: Vec<TdSample> = (0..4)
        .map(|_| TdSample {
            state: normal_vec(&mut rng, 3, 1.0),
            candidates: (0..3).map(|_| normal_vec(&mut rng, 2, 1.0)).collect(),
            choice: rng.random_range(0..3),
            target: rng.random_range(-1.0..1.0),
        })
        .collect();
    let err = max_relative_error(&net.params, FD_STEP, |g, p| net.td_loss(g, p, &batch)).unwrap();
    ("q-network td loss", err)
}

fn gradient_correctness() -> (bool, String) {
    let checks: [fn(u64) -> Fd; 10] = [
        fd_nn_ops,
        fd_mlp,
        |s| fd_cell(CellKind::Gated, s),
        |s| fd_cell(CellKind::Lstm, s),
        fd_dppr,
        fd_bicogan_discriminator,
        fd_bicogan_generator_encoder,
        |s| fd_reward(CellKind::Gated, s),
        |s| fd_reward(CellKind::Lstm, s),
        fd_td,
    ];
    let mut worst: Vec<(&str, f64)> = Vec::new();
    for f in checks {
        let mut name = "";
        let mut w: f64 = 0.0;
        for seed in 0..FD_INSTANCES {
            let (n, e) = f(seed);
            name = n;
            w = w.max(e);
        }
        worst.push((name, w));
    }
    let ok = worst.iter().all(|(_, e)| *e < FD_TOL);
    let detail = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect::<Vec<_>>().join(", ");
    (ok, format!("{FD_INSTANCES} instances each, max rel err < {FD_TOL:e}: {detail}"))
}

// Terminal reward gate.

fn reward_gate() -> (bool, String) {
    let mut rng = seeded(7);
    let (mut episodes, mut checked, mut nonzero) = (0, 0, 0);
    for group in 0..50u64 {
        let horizon = [3, 5, 7, 9][group as usize % 4];
        let world = World::new(WorldConfig { d: 4, horizon, seed: rng.random(), ..Default::default() }).unwrap();
        let eps: Vec<Episode> = world.generate(20, "gate").into_iter().map(|e| e.episode).collect();
        let eps = pad_episodes(eps, 11).unwrap();
        let cell = if group % 2 == 0 { CellKind::Gated } else { CellKind::Lstm };
        let model = RewardModel::new(4, &RewardConfig { hidden: 8, cell, seed: rng.random(), ..Default::default() })
            .unwrap();
        for ep in &eps {
            episodes += 1;
            for t in 0..ep.valid_len() - 1 {
                checked += 1;
                if step_reward(&model, ep, t).unwrap() != 0.0 {
                    nonzero += 1;
                }
            }
        }
    }
    (
        episodes == 1000 && nonzero == 0,
        format!("{episodes} episodes, {checked} non-terminal steps, {nonzero} nonzero"),
    )
}

// Counterfactual generation.

struct BicoganFit {
    world: World,
    test: Vec<SynthEpisode>,
    model: BiCoGanModel,
}

fn fit_bicogan() -> BicoganFit {
    let world = World::new(WorldConfig { d: 8, horizon: 9, seed: 1, noise_scale: 0.1, ..Default::default() }).unwrap();
    let all = world.generate(400, "bicogan");
    let (tr, te) = split_indices(all.len(), 0.8, 7).unwrap();
    let train: Vec<SynthEpisode> = tr.iter().map(|&i| all[i].clone()).collect();
    let test: Vec<SynthEpisode> = te.iter().map(|&i| all[i].clone()).collect();
    let cfg = BicoganConfig { hidden: 64, lr: 1e-3, epochs: 30, seed: 3, ..Default::default() };
    let (model, _) = train_bicogan(&synthetic_transitions(&train), &cfg).unwrap();
    BicoganFit { world, test, model }
}

fn consistency(fit: &BicoganFit) -> (bool, String) {
    let tol = fit.model.tolerance.unwrap();
    let errs = fit.model.consistency_errors(&synthetic_transitions(&fit.test)).unwrap();
    let within = errs.iter().filter(|&&e| e <= tol).count() as f64 / errs.len() as f64;
    (
        within >= CONSISTENCY_MIN,
        format!("{:.3} of {} held-out transitions within tolerance {tol:.4} (need >= {CONSISTENCY_MIN})", within, errs.len()),
    )
}

fn fidelity(fit: &BicoganFit) -> (bool, String) {
    let (mut cf_err, mut copy_err, mut n) = (0.0, 0.0, 0usize);
    let test = &fit.test;
    for (i, ep) in test.iter().enumerate() {
        let donor = &test[(i + 1) % test.len()];
        for t in 0..ep.episode.turns() {
            let alt = &donor.episode.actions[t];
            let oracle = fit.world.oracle_counterfactual(ep, t, alt).unwrap();
            let factual = &ep.episode.states[t + 1];
            let cf = fit
                .model
                .generate_counterfactual(&ep.episode.states[t], alt, &ep.user.traits, &NoiseMode::Abducted, Some(factual))
                .unwrap();
            cf_err += l2(&cf, &oracle);
            copy_err += l2(factual, &oracle);
            n += 1;
        }
    }
    let (cf, copy) = (cf_err / n as f64, copy_err / n as f64);
    (cf < copy, format!("mean L2 to oracle {cf:.4} vs copy baseline {copy:.4} over {n} swaps"))
}

// Personality regression.

fn dppr_config(window: usize) -> DpprConfig {
    DpprConfig {
        hidden: 64,
        attention_dim: 16,
        batch_size: 32,
        lr: 1e-3,
        epochs: 40,
        window,
        folds: 5,
        seed: 3,
    }
}

fn dppr_metrics(model: &DpprModel, windows: &[TurnWindow]) -> RegressionMetrics {
    let preds = model.predict_batch(windows).unwrap();
    let p: Vec<&[f64]> = preds.iter().map(TraitVector::as_slice).collect();
    let t: Vec<&[f64]> = windows.iter().map(|w| w.target.as_slice()).collect();
    regression_metrics(&p, &t).unwrap()
}

fn episodes_of(world: &World, n: usize) -> Vec<Episode> {
    world.generate(n, "dppr").into_iter().map(|e| e.episode).collect()
}

fn dppr_recovery() -> (bool, String) {
    let world = World::new(WorldConfig { seed: 1, policy_trait_coupling: 1.0, policy_noise: 0.05, ..Default::default() })
        .unwrap();
    let (train, test) = split(&episodes_of(&world, 400), 0.8, 5).unwrap();
    let test_w = window_turns(&test, 1).unwrap();
    let (model, _) = train_dppr(&window_turns(&train, 1).unwrap(), &dppr_config(1)).unwrap();
    let r2 = dppr_metrics(&model, &test_w).r2;

    let mut shuffled = train.clone();
    let mut labels: Vec<_> = shuffled.iter().map(|e| e.traits).collect();
    labels.shuffle(&mut seeded(17));
    for (e, l) in shuffled.iter_mut().zip(labels) {
        e.traits = l;
    }
    let (control, _) = train_dppr(&window_turns(&shuffled, 1).unwrap(), &dppr_config(1)).unwrap();
    let c = dppr_metrics(&control, &test_w).r2;
    let ok = r2 > RECOVERY_R2_MIN && (CONTROL_R2_BAND.0..=CONTROL_R2_BAND.1).contains(&c);
    (ok, format!("test R2 {r2:.4} (need > {RECOVERY_R2_MIN}), shuffled-label R2 {c:.4} (need in {CONTROL_R2_BAND:?})"))
}

fn window_direction() -> (bool, String) {
    let world = World::single_turn_signal(WorldConfig {
        seed: 3,
        horizon: 17,
        policy_trait_coupling: 1.0,
        policy_noise: 0.05,
        ..Default::default()
    })
    .unwrap();
    let (train, test) = split(&episodes_of(&world, 400), 0.8, 5).unwrap();
    let mut mses = Vec::new();
    for w in WINDOWS {
        let cfg = DpprConfig { hidden: 128, epochs: 80, ..dppr_config(w) };
        let (model, _) = train_dppr(&window_turns(&train, w).unwrap(), &cfg).unwrap();
        mses.push(dppr_metrics(&model, &window_turns(&test, w).unwrap()).mse);
    }
    let ok = mses.windows(2).all(|p| p[1] >= p[0]);
    let detail = WINDOWS.iter().zip(&mses).map(|(w, m)| format!("w{w} {m:.4}")).collect::<Vec<_>>().join(", ");
    (ok, format!("test MSE {detail}"))
}

// Policy learning.

/// Value iteration on the five-state chain, independent of the environment code.
fn chain_oracle(gamma: f64) -> Vec<[f64; 2]> {
    let n = 5;
    let mut q = vec![[0.0f64; 2]; n];
    for _ in 0..200 {
        let v: Vec<f64> = q.iter().map(|r| r[0].max(r[1])).collect();
        for s in 0..n - 1 {
            for (a, slot) in q[s].iter_mut().enumerate() {
                let next = if a == 0 { s.saturating_sub(1) } else { s + 1 };
                *slot = if next == n - 1 { 1.0 } else { gamma * v[next] };
            }
        }
    }
    q
}

fn chain_oracle_equivalence() -> (bool, String) {
    let gamma = 0.9;
    let oracle = chain_oracle(gamma);
    let env = ChainEnv::new(40);
    let mut ok = true;
    let mut parts = Vec::new();
    for case in [Case::PerDialogue, Case::PerState] {
        let cfg = PolicyConfig {
            case,
            gamma,
            hidden: 32,
            lr: if case == Case::PerDialogue { 1e-2 } else { 1e-3 },
            epochs: CHAIN_MAX_EPOCHS,
            epsilon_start: 0.5,
            sync_every: 10,
            max_steps: 30,
            seed: 1,
            ..Default::default()
        };
        let net = QNet::new(5, 2, cfg.hidden, cfg.seed).unwrap();
        let (net, _) = train_policy(&env, net, &cfg).unwrap();
        let mut gap: f64 = 0.0;
        let mut greedy_matches = true;
        for (s, q_star) in oracle.iter().enumerate().take(4) {
            let q = net.q_values(&env.one_hot(s), &ChainEnv::actions()).unwrap();
            gap = gap.max((q[0] - q_star[0]).abs()).max((q[1] - q_star[1]).abs());
            let best = if q_star[1] > q_star[0] { ChainEnv::RIGHT } else { ChainEnv::LEFT };
            greedy_matches &= net.select_action(&env.one_hot(s), &ChainEnv::actions()).unwrap().0 == best;
        }
        let eval = evaluate_policy(&env, &net, cfg.max_steps).unwrap();
        let all_reach = eval.dialogues.iter().all(|d| d.reward == 1.0);
        ok &= gap < CHAIN_Q_TOL && greedy_matches && all_reach;
        parts.push(format!("{case:?} max|Q-Q*| {gap:.4} greedy optimal {greedy_matches}"));
    }
    (ok, format!("{} (need < {CHAIN_Q_TOL} within {CHAIN_MAX_EPOCHS} epochs)", parts.join("; ")))
}

fn tiny_config(seed: u64) -> ExperimentConfig {
    ExperimentConfig::load(&workspace_root().join("configs/tiny.toml"), &[format!("seed={seed}")]).unwrap()
}

fn policy_improvement() -> (bool, String) {
    let (mut learned, mut behavior) = (0.0, 0.0);
    let mut per_seed = Vec::new();
    for seed in POLICY_SEEDS {
        let cfg = tiny_config(seed);
        assert_eq!(cfg.counterfactual.databases, 10);
        assert_eq!(cfg.counterfactual.strategy.number(), 2);
        let dir = tempfile::tempdir().unwrap();
        run_all(&Run::new(dir.path(), &cfg, false)).unwrap();
        let s = load_summary(dir.path()).unwrap();
        learned += s.learned / POLICY_SEEDS.len() as f64;
        behavior += s.behavior_predicted / POLICY_SEEDS.len() as f64;
        per_seed.push(format!("{:+.1}", s.learned - s.behavior_predicted));
    }
    (
        learned > behavior,
        format!(
            "mean cumulative predicted reward learned {learned:.2} vs behavior {behavior:.2} over {} seeds (per seed {})",
            POLICY_SEEDS.len(),
            per_seed.join(" ")
        ),
    )
}

// Balanced selection.

fn brute_force_selection(rewards: &[(usize, f64)], gt: f64, n: usize) -> Option<Vec<usize>> {
    let m = rewards.len();
    let key = |k: usize| ((rewards[k].1 - gt).abs(), rewards[k].0);
    let mut found = Vec::new();
    for mask in 0u32..(1 << m) {
        let chosen: Vec<usize> = (0..m).filter(|&k| mask >> k & 1 == 1).collect();
        if chosen.iter().any(|&k| rewards[k].1 == gt) {
            continue;
        }
        let above = chosen.iter().filter(|&&k| rewards[k].1 > gt).count();
        if above != n.div_ceil(2) || chosen.len() - above != n / 2 {
            continue;
        }
        let nearest_kept = (0..m).filter(|k| !chosen.contains(k) && rewards[*k].1 != gt).all(|skip| {
            let up = rewards[skip].1 > gt;
            chosen
                .iter()
                .filter(|&&c| (rewards[c].1 > gt) == up)
                .all(|&c| key(c).partial_cmp(&key(skip)) == Some(std::cmp::Ordering::Less))
        });
        if nearest_kept {
            let mut ids: Vec<usize> = chosen.iter().map(|&k| rewards[k].0).collect();
            ids.sort_unstable();
            found.push(ids);
        }
    }
    found.pop()
}

fn balance_selection() -> (bool, String) {
    let grid = [1.0, 4.0, 5.0, 6.0, 9.0];
    let gt = 5.0;
    let mut rng = seeded(3);
    let (mut cases, mut mismatches, mut split_errors, mut order_dependent) = (0, 0, 0, 0);
    for m in 0..=6usize {
        for code in 0..grid.len().pow(m as u32) {
            let rewards: Vec<(usize, f64)> =
                (0..m).map(|k| (k, grid[code / grid.len().pow(k as u32) % grid.len()])).collect();
            for n in 0..=m {
                cases += 1;
                let got = balance_select(&rewards, gt, n).ok();
                if got != brute_force_selection(&rewards, gt, n) {
                    mismatches += 1;
                }
                if let Some(g) = &got {
                    let above = g.iter().filter(|&&i| rewards[i].1 > gt).count();
                    let below = g.iter().filter(|&&i| rewards[i].1 < gt).count();
                    if above != n.div_ceil(2) || below != n / 2 {
                        split_errors += 1;
                    }
                }
                let mut permuted = rewards.clone();
                permuted.shuffle(&mut rng);
                if balance_select(&permuted, gt, n).ok() != got {
                    order_dependent += 1;
                }
            }
        }
    }
    (
        mismatches == 0 && split_errors == 0 && order_dependent == 0,
        format!(
            "{cases} cases: {mismatches} brute-force mismatches, {split_errors} split errors, {order_dependent} permutation changes"
        ),
    )
}

// Canonical correlation.

/// Columns of `x` are latent pairs mixed by a random map; `y` shares the
/// latents with correlation `rho`.
fn planted_views(rho: &[f64], n: usize, p: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = seeded(seed);
    let mix_x: Vec<Vec<f64>> = (0..p).map(|_| normal_vec(&mut rng, p, 1.0)).collect();
    let mix_y: Vec<Vec<f64>> = (0..p).map(|_| normal_vec(&mut rng, p, 1.0)).collect();
    let mut xs = Vec::with_capacity(n);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let zx = normal_vec(&mut rng, p, 1.0);
        let noise = normal_vec(&mut rng, p, 1.0);
        let zy: Vec<f64> = (0..p)
            .map(|j| {
                let r = rho.get(j).copied().unwrap_or(0.0);
                r * zx[j] + (1.0 - r * r).sqrt() * noise[j]
            })
            .collect();
        let apply = |m: &[Vec<f64>], z: &[f64]| -> Vec<f64> {
            m.iter().map(|row| row.iter().zip(z).map(|(a, b)| a * b).sum()).collect()
        };
        xs.push(apply(&mix_x, &zx));
        ys.push(apply(&mix_y, &zy));
    }
    (xs, ys)
}

fn cca() -> (bool, String) {
    let mut worst_planted: f64 = 0.0;
    for seed in 0..5 {
        let (x, y) = planted_views(&CCA_PLANTED, 2000, 8, 40 + seed);
        let r = cca_top_components(&x, &y, 2).unwrap();
        for (got, want) in r.correlations.iter().zip(CCA_PLANTED) {
            worst_planted = worst_planted.max((got - want).abs());
        }
    }

    let mut rng = seeded(9);
    let x: Vec<Vec<f64>> = (0..2000).map(|_| normal_vec(&mut rng, 6, 1.0)).collect();
    let copy = cca_top_components(&x, &x, 2).unwrap();
    let copy_gap = copy.correlations.iter().map(|c| (c - 1.0).abs()).fold(0.0, f64::max);

    let (x, y) = planted_views(&CCA_PLANTED, 2000, 8, 77);
    let base = cca_top_components(&x, &y, 5).unwrap();
    let shift: Vec<f64> = normal_vec(&mut rng, 8, 3.0);
    let mix: Vec<Vec<f64>> = (0..8)
        .map(|i| (0..8).map(|j| if i == j { 2.0 + i as f64 } else if j == i + 1 { 0.7 } else { 0.0 }).collect())
        .collect();
    let x_aff: Vec<Vec<f64>> = x
        .iter()
        .map(|r| (0..8).map(|j| (0..8).map(|i| r[i] * mix[i][j]).sum::<f64>() + shift[j]).collect())
        .collect();
    let y_aff: Vec<Vec<f64>> = y.iter().map(|r| r.iter().map(|v| -0.5 * v + 4.0).collect()).collect();
    let moved = cca_top_components(&x_aff, &y_aff, 5).unwrap();
    let affine_gap =
        base.correlations.iter().zip(&moved.correlations).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);

    let ok = worst_planted <= CCA_PLANTED_TOL && copy_gap <= CCA_EXACT_TOL && affine_gap <= CCA_EXACT_TOL;
    (
        ok,
        format!(
            "planted max error {worst_planted:.4} (need <= {CCA_PLANTED_TOL}), copy |rho-1| {copy_gap:.1e}, \
             affine change {affine_gap:.1e} (need <= {CCA_EXACT_TOL:e})"
        ),
    )
}

// Reproducibility.

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism() -> (bool, String) {
    let cfg = tiny_config(11);
    let runs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            run_all(&Run::new(dir.path(), &cfg, false)).unwrap();
            let files = tree(&dir.path().join("report"));
            (dir, files)
        })
        .collect();
    let (a, b) = (&runs[0].1, &runs[1].1);
    let differing: Vec<String> = a
        .iter()
        .zip(b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.display().to_string())
        .collect();
    let ok = !a.is_empty() && a.len() == b.len() && differing.is_empty();
    (ok, format!("{} report files compared, {} differ {:?}", a.len(), differing.len(), differing))
}

fn main() {
    let mut lines = Vec::new();
    check(&mut lines, "gradient correctness", Some(GRADIENT_BUDGET), gradient_correctness);
    check(&mut lines, "terminal reward gate", None, reward_gate);
    let mut fit = None;
    check(&mut lines, "counterfactual consistency", Some(BICOGAN_BUDGET), || {
        let f = fit_bicogan();
        let out = consistency(&f);
        fit = Some(f);
        out
    });
    check(&mut lines, "counterfactual fidelity vs oracle", None, || fidelity(fit.as_ref().unwrap()));
    check(&mut lines, "personality recovery", Some(DPPR_BUDGET), dppr_recovery);
    check(&mut lines, "window-size direction", None, window_direction);
    check(&mut lines, "q-learning oracle equivalence", Some(CHAIN_BUDGET), chain_oracle_equivalence);
    check(&mut lines, "policy improvement", Some(POLICY_BUDGET), policy_improvement);
    check(&mut lines, "balanced selection", None, balance_selection);
    check(&mut lines, "canonical correlation", None, cca);
    check(&mut lines, "determinism", None, determinism);
    let failed: Vec<&str> = lines.iter().filter(|l| !l.pass).map(|l| l.name).collect();
    println!("{} of {} criteria passed", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        eprintln!("failed: {failed:?}");
        std::process::exit(1);
    }
}

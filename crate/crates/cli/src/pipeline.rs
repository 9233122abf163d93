//! Pipeline stages and their on-disk artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use cfdialog_core::bicogan::{train_bicogan, transitions, BiCoGanModel, TraitSource};
use cfdialog_core::counterfactual::{
    alignment_error, balance_select, build_cf_databases, CfDatabase, CfSpec, Strategy,
};
use cfdialog_core::d3qn::{evaluate_policy, train_policy, DatabaseEnv, QNet};
use cfdialog_core::dataset::{split_indices, window_turns, Episode, EpisodeFile};
use cfdialog_core::dppr::{regression_metrics, train_dppr, DpprConfig, DpprModel};
use cfdialog_core::metrics::cca_top_components;
use cfdialog_core::report::{assemble_report, fmt_num, regression_table, Table};
use cfdialog_core::reward::{cumsum, train_reward, RewardModel};
use cfdialog_core::synthworld::World;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::{BalanceReference, ExperimentConfig};
use crate::manifest::{sha256_file, Manifest, MANIFEST_FILE};
use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    GenWorld,
    TrainDppr,
    TrainBicogan,
    GenCf,
    TrainReward,
    TrainPolicy,
    Evaluate,
    Report,
}

impl Stage {
    /// Pipeline order.
    pub const ALL: [Stage; 8] = [
        Stage::GenWorld,
        Stage::TrainDppr,
        Stage::TrainBicogan,
        Stage::GenCf,
        Stage::TrainReward,
        Stage::TrainPolicy,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenWorld => "gen-world",
            Stage::TrainDppr => "train-dppr",
            Stage::TrainBicogan => "train-bicogan",
            Stage::GenCf => "gen-cf",
            Stage::TrainReward => "train-reward",
            Stage::TrainPolicy => "train-policy",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }

    pub fn dir(self) -> &'static str {
        match self {
            Stage::GenWorld => "world",
            Stage::TrainDppr => "dppr",
            Stage::TrainBicogan => "bicogan",
            Stage::GenCf => "cf",
            Stage::TrainReward => "reward",
            Stage::TrainPolicy => "policy",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    fn product(self) -> &'static str {
        match self {
            Stage::GenWorld => "generated dialogues",
            Stage::TrainDppr => "a trained trait regressor",
            Stage::TrainBicogan => "a trained transition model",
            Stage::GenCf => "counterfactual databases",
            Stage::TrainReward => "a trained reward model",
            Stage::TrainPolicy => "a trained policy",
            Stage::Evaluate => "policy evaluation results",
            Stage::Report => "a report",
        }
    }

    pub fn requires(self) -> &'static [Stage] {
        match self {
            Stage::GenWorld | Stage::Report => &[],
            Stage::TrainDppr => &[Stage::GenWorld],
            Stage::TrainBicogan => &[Stage::GenWorld, Stage::TrainDppr],
            Stage::GenCf => &[Stage::GenWorld, Stage::TrainDppr, Stage::TrainBicogan],
            Stage::TrainReward => &[Stage::GenWorld, Stage::GenCf],
            Stage::TrainPolicy => &[Stage::GenWorld, Stage::GenCf, Stage::TrainReward],
            Stage::Evaluate => &[Stage::GenWorld, Stage::GenCf, Stage::TrainReward, Stage::TrainPolicy],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    UpToDate,
}

/// One run directory bound to one resolved config.
#[derive(Clone, Debug)]
pub struct Run {
    pub root: PathBuf,
    pub config: ExperimentConfig,
    pub fingerprint: String,
    /// Replace stage directories left by a different config or inputs.
    pub force: bool,
}

impl Run {
    pub fn new(root: impl Into<PathBuf>, config: &ExperimentConfig, force: bool) -> Self {
        Run {
            root: root.into(),
            config: config.resolved(),
            fingerprint: config.fingerprint(),
            force,
        }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.dir())
    }

    fn manifest(&self, stage: Stage) -> Result<Option<Manifest>, CliError> {
        let path = self.stage_dir(stage).join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(None);
        }
        Manifest::load(&path).map(Some).map_err(|e| CliError::Validation(format!("{e:#}")))
    }

    /// The manifest of `up`, checked against this run.
    fn upstream(&self, stage: Stage, up: Stage) -> Result<Manifest, CliError> {
        let m = self.manifest(up)?.ok_or_else(|| {
            CliError::Validation(format!(
                "{} requires {}: run `{}` first (no {} under {})",
                stage.name(),
                up.product(),
                up.name(),
                Path::new(up.dir()).join(MANIFEST_FILE).display(),
                self.root.display()
            ))
        })?;
        self.check_consistent(&m)?;
        Ok(m)
    }

    fn check_consistent(&self, m: &Manifest) -> Result<(), CliError> {
        if m.fingerprint != self.fingerprint {
            return Err(CliError::Validation(format!(
                "mixed artifacts: stage `{}` was produced with a different config or seed; rerun it with --force",
                m.stage
            )));
        }
        let stale = m.stale(&self.root);
        if !stale.is_empty() {
            return Err(CliError::Validation(format!(
                "mixed artifacts: files of stage `{}` changed after it completed: {}",
                m.stage,
                stale.join(", ")
            )));
        }
        Ok(())
    }

    fn path(&self, stage: Stage, file: &str) -> PathBuf {
        self.stage_dir(stage).join(file)
    }
}

fn save_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Runs one stage, skipping it when its directory already matches the
/// config and the current upstream artifacts.
pub fn run_stage(run: &Run, stage: Stage) -> Result<Outcome, CliError> {
    let mut inputs = BTreeMap::new();
    if stage == Stage::Report {
        for s in Stage::ALL.into_iter().filter(|&s| s != Stage::Report) {
            if let Some(m) = run.manifest(s)? {
                run.check_consistent(&m)?;
                inputs.extend(m.outputs);
            }
        }
    } else {
        for &up in stage.requires() {
            inputs.extend(run.upstream(stage, up)?.outputs);
        }
    }

    let dir = run.stage_dir(stage);
    if let Some(existing) = run.manifest(stage)? {
        if existing.fingerprint == run.fingerprint
            && existing.inputs == inputs
            && existing.stale(&run.root).is_empty()
            && !run.force
        {
            return Ok(Outcome::UpToDate);
        }
        if !run.force {
            return Err(CliError::Validation(format!(
                "{} already holds results of a different config or different inputs; pass --force to replace them",
                dir.display()
            )));
        }
    } else if dir.exists() && !run.force && fs::read_dir(&dir).map(|mut d| d.next().is_some()).unwrap_or(false) {
        return Err(CliError::Validation(format!(
            "{} exists without a manifest; pass --force to replace it",
            dir.display()
        )));
    }

    fs::create_dir_all(&run.root).with_context(|| format!("creating {}", run.root.display()))?;
    let partial = run.root.join(format!(".{}.partial", stage.dir()));
    if partial.exists() {
        fs::remove_dir_all(&partial).with_context(|| format!("removing {}", partial.display()))?;
    }
    fs::create_dir_all(&partial).with_context(|| format!("creating {}", partial.display()))?;

    let models = match stage {
        Stage::GenWorld => gen_world(run, &partial),
        Stage::TrainDppr => stage_dppr(run, &partial),
        Stage::TrainBicogan => stage_bicogan(run, &partial),
        Stage::GenCf => gen_cf(run, &partial),
        Stage::TrainReward => stage_reward(run, &partial),
        Stage::TrainPolicy => stage_policy(run, &partial),
        Stage::Evaluate => evaluate(run, &partial),
        Stage::Report => report(run, &partial),
    }
    .with_context(|| format!("stage {} failed", stage.name()))?;

    let mut names: Vec<String> = fs::read_dir(&partial)
        .with_context(|| format!("listing {}", partial.display()))?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()
        .context("listing stage outputs")?;
    names.sort();
    let mut outputs = BTreeMap::new();
    for name in names {
        outputs.insert(format!("{}/{name}", stage.dir()), sha256_file(&partial.join(&name))?);
    }
    let manifest = Manifest {
        stage: stage.name().into(),
        seed: run.config.seed,
        fingerprint: run.fingerprint.clone(),
        inputs,
        outputs,
        models,
    };
    manifest.save(&partial.join(MANIFEST_FILE))?;
    if dir.exists() {
        fs::remove_dir_all(&dir).with_context(|| format!("removing {}", dir.display()))?;
    }
    fs::rename(&partial, &dir).with_context(|| format!("moving results into {}", dir.display()))?;
    Ok(Outcome::Ran)
}

/// Every stage in pipeline order.
pub fn run_all(run: &Run) -> Result<Vec<(Stage, Outcome)>, CliError> {
    Stage::ALL.into_iter().map(|s| run_stage(run, s).map(|o| (s, o))).collect()
}

type Models = BTreeMap<String, String>;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const EPISODES: &str = "episodes.jsonl";
pub const MODEL: &str = "model.json";

fn episodes(run: &Run) -> anyhow::Result<EpisodeFile> {
    Ok(EpisodeFile::load(&run.path(Stage::GenWorld, EPISODES))?)
}

fn split_episodes(run: &Run, eps: &[Episode]) -> anyhow::Result<(Vec<Episode>, Vec<Episode>)> {
    let split: Split = load_json(&run.path(Stage::GenWorld, "split.json"))?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| eps[i].clone()).collect();
    Ok((pick(&split.train), pick(&split.test)))
}

fn gen_world(run: &Run, out: &Path) -> anyhow::Result<Models> {
    let cfg = &run.config;
    let world = World::new(cfg.world.clone())?;
    let eps: Vec<Episode> = world.generate(cfg.data.dialogues, "dialogues").into_iter().map(|s| s.episode).collect();
    EpisodeFile::new(cfg.world.d, cfg.world.horizon, eps).save(&out.join(EPISODES))?;
    save_json(&out.join("world.json"), &world)?;
    let (train, test) = split_indices(cfg.data.dialogues, cfg.data.train_ratio, cfg.stage_seed("split"))?;
    save_json(&out.join("split.json"), &Split { train, test })?;
    Ok(Models::new())
}

fn stage_dppr(run: &Run, out: &Path) -> anyhow::Result<Models> {
    let cfg = &run.config;
    let file = episodes(run)?;
    let (train, test) = split_episodes(run, &file.episodes)?;
    let turns = cfg.world.actions_per_episode();
    let mut windows = cfg.metrics.windows.clone();
    windows.retain(|&w| w <= turns);
    windows.sort_unstable();
    windows.dedup();
    let mut rows = Vec::new();
    let mut chosen = None;
    for w in windows {
        let wcfg = DpprConfig { window: w, ..cfg.dppr.clone() };
        let (model, _) = train_dppr(&window_turns(&train, w)?, &wcfg)?;
        let held_out = window_turns(&test, w)?;
        let preds: Vec<Vec<f64>> =
            model.predict_batch(&held_out)?.iter().map(|t| t.as_slice().to_vec()).collect();
        let targets: Vec<Vec<f64>> = held_out.iter().map(|h| h.target.as_slice().to_vec()).collect();
        rows.push((w, regression_metrics(&preds, &targets)?));
        if w == cfg.dppr.window {
            chosen = Some(model);
        }
    }
    let model = match chosen {
        Some(m) => m,
        None => train_dppr(&window_turns(&train, cfg.dppr.window)?, &cfg.dppr)?.0,
    };
    regression_table(&rows).save(&out.join("regression.tsv"))?;

    // Canonical correlation of single turns against the trait labels.
    let mut x = Vec::new();
    let mut y = Vec::new();
    for ep in &file.episodes {
        let traits = ep.traits.ok_or_else(|| anyhow!("episode `{}` has no trait labels", ep.id))?;
        for t in 0..ep.turns() {
            x.push(ep.turn(t));
            y.push(traits.as_slice().to_vec());
        }
    }
    let cca = cca_top_components(&x, &y, 2)?;
    let mut table = Table::new(&["component", "correlation"]);
    for (i, c) in cca.correlations.iter().enumerate() {
        table.push(vec![(i + 1).to_string(), fmt_num(*c)])?;
    }
    table.save(&out.join("cca.tsv"))?;
    save_json(&out.join(MODEL), &model)?;
    Ok([("dppr".to_string(), model.params.checksum())].into())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Consistency {
    pub tolerance: f64,
    pub within: f64,
    pub transitions: usize,
}

fn stage_bicogan(run: &Run, out: &Path) -> anyhow::Result<Models> {
    let file = episodes(run)?;
    let dppr: DpprModel = load_json(&run.path(Stage::TrainDppr, MODEL))?;
    let ts = transitions(&file.episodes, TraitSource::Progressive(&dppr))?;
    let (model, history) = train_bicogan(&ts, &run.config.bicogan)?;
    let tolerance = model.tolerance.ok_or_else(|| anyhow!("trained model has no tolerance"))?;
    let errors = model.consistency_errors(&ts)?;
    let within = errors.iter().filter(|&&e| e <= tolerance).count() as f64 / errors.len() as f64;
    save_json(&out.join("consistency.json"), &Consistency { tolerance, within, transitions: ts.len() })?;
    save_json(&out.join("history.json"), &history)?;
    save_json(&out.join(MODEL), &model)?;
    let sums = [
        ("bicogan.generator".to_string(), model.g_params.checksum()),
        ("bicogan.encoder".to_string(), model.e_params.checksum()),
        ("bicogan.discriminator".to_string(), model.d_params.checksum()),
    ];
    Ok(sums.into())
}

fn db_file(i: usize) -> String {
    format!("db_{i:04}.jsonl")
}

fn gen_cf(run: &Run, out: &Path) -> anyhow::Result<Models> {
    let cfg = &run.config;
    let file = episodes(run)?;
    let dppr: DpprModel = load_json(&run.path(Stage::TrainDppr, MODEL))?;
    let model: BiCoGanModel = load_json(&run.path(Stage::TrainBicogan, MODEL))?;
    let spec = cfg.counterfactual.spec();
    let dbs = build_cf_databases(&model, &dppr, &file.episodes, &spec, cfg.counterfactual.pool, cfg.stage_seed("cf"))?;
    let mut table = Table::new(&["set", "database", "strategy", "alignment"]);
    for db in dbs {
        let err = alignment_error(&db.episodes, &file.episodes)?;
        table.push(vec!["pool".into(), db.index.to_string(), db.strategy.number().to_string(), fmt_num(err)])?;
        EpisodeFile::new(file.d, file.horizon, db.episodes).save(&out.join(db_file(db.index)))?;
    }
    let turns = cfg.world.actions_per_episode();
    for strategy in Strategy::ALL.into_iter().filter(|s| s.excluded_prefix() < turns) {
        let probe = CfSpec { strategy, ..spec.clone() };
        let seed = cfg.stage_seed(&format!("cf.probe.{}", strategy.number()));
        for db in build_cf_databases(&model, &dppr, &file.episodes, &probe, cfg.counterfactual.strategy_probe, seed)? {
            let err = alignment_error(&db.episodes, &file.episodes)?;
            table.push(vec!["probe".into(), db.index.to_string(), strategy.number().to_string(), fmt_num(err)])?;
        }
    }
    table.save(&out.join("alignment.tsv"))?;
    Ok(Models::new())
}

fn load_database(run: &Run, index: usize) -> anyhow::Result<CfDatabase> {
    let f = EpisodeFile::load(&run.path(Stage::GenCf, &db_file(index)))?;
    Ok(CfDatabase {
        index,
        strategy: run.config.strategy(),
        episodes: f.episodes,
        predicted_reward: None,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Selection {
    pub reference: BalanceReference,
    pub reference_total: f64,
    /// Database indices kept for the policy, ascending.
    pub kept: Vec<usize>,
    pub predicted: Vec<f64>,
}

fn stage_reward(run: &Run, out: &Path) -> anyhow::Result<Models> {
    let cfg = &run.config;
    let file = episodes(run)?;
    let (train, test) = split_episodes(run, &file.episodes)?;
    let (rm, history) = train_reward(&train, &test, &cfg.reward)?;
    save_json(&out.join("history.json"), &history)?;
    save_json(&out.join(MODEL), &rm)?;

    let mut totals = Vec::with_capacity(cfg.counterfactual.pool);
    for i in 0..cfg.counterfactual.pool {
        let db = load_database(run, i)?;
        totals.push((i, rm.score(&db.episodes)?.iter().sum::<f64>()));
    }
    let reference_total = match cfg.counterfactual.balance_reference {
        BalanceReference::Predicted => rm.score(&file.episodes)?.iter().sum(),
        BalanceReference::Recorded => file.episodes.iter().map(|e| e.outcome).sum(),
    };
    let kept = balance_select(&totals, reference_total, cfg.counterfactual.databases)?;
    let mut table = Table::new(&["database", "predicted_total", "kept"]);
    for (i, r) in &totals {
        table.push(vec![i.to_string(), fmt_num(*r), u8::from(kept.contains(i)).to_string()])?;
    }
    table.save(&out.join("selection.tsv"))?;
    let predicted = kept.iter().map(|&i| totals[i].1).collect();
    save_json(
        &out.join("selection.json"),
        &Selection { reference: cfg.counterfactual.balance_reference, reference_total, kept, predicted },
    )?;
    Ok([("reward".to_string(), rm.params.checksum())].into())
}

fn kept_databases(run: &Run) -> anyhow::Result<Vec<CfDatabase>> {
    let sel: Selection = load_json(&run.path(Stage::TrainReward, "selection.json"))?;
    sel.kept
        .iter()
        .zip(&sel.predicted)
        .map(|(&i, &r)| {
            let mut db = load_database(run, i)?;
            db.predicted_reward = Some(r);
            Ok(db)
        })
        .collect()
}

fn stage_policy(run: &Run, out: &Path) -> anyhow::Result<Models> {
    let cfg = &run.config;
    let dbs = kept_databases(run)?;
    let rm: RewardModel = load_json(&run.path(Stage::TrainReward, MODEL))?;
    let env = DatabaseEnv::new(&dbs, &rm)?;
    let net = QNet::new(cfg.world.d, cfg.world.d, cfg.policy.hidden, cfg.policy.seed)?;
    let (net, history) = train_policy(&env, net, &cfg.policy)?;
    save_json(&out.join("history.json"), &history)?;
    save_json(&out.join(MODEL), &net)?;
    Ok([("policy".to_string(), net.params.checksum())].into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub learned: f64,
    pub behavior_predicted: f64,
    pub behavior_recorded: f64,
}

fn evaluate(run: &Run, out: &Path) -> anyhow::Result<Models> {
    let cfg = &run.config;
    let file = episodes(run)?;
    let dbs = kept_databases(run)?;
    let rm: RewardModel = load_json(&run.path(Stage::TrainReward, MODEL))?;
    let net: QNet = load_json(&run.path(Stage::TrainPolicy, MODEL))?;
    let env = DatabaseEnv::new(&dbs, &rm)?;
    let eval = evaluate_policy(&env, &net, cfg.policy.max_steps)?;
    let behavior = cumsum(&rm.score(&file.episodes)?);
    let recorded = cumsum(&file.episodes.iter().map(|e| e.outcome).collect::<Vec<_>>());

    let mut cumulative = Table::new(&["dialogue", "learned", "behavior_predicted", "behavior_recorded"]);
    let mut qstats = Table::new(&["dialogue", "max_q", "mean_q", "reward", "choices"]);
    for (j, d) in eval.dialogues.iter().enumerate() {
        cumulative.push(vec![j.to_string(), fmt_num(eval.cumulative[j]), fmt_num(behavior[j]), fmt_num(recorded[j])])?;
        let choices: Vec<String> = d.choices.iter().map(|&k| dbs[k].index.to_string()).collect();
        qstats.push(vec![j.to_string(), fmt_num(d.max_q), fmt_num(d.mean_q), fmt_num(d.reward), choices.join(",")])?;
    }
    cumulative.save(&out.join("cumulative.tsv"))?;
    qstats.save(&out.join("qstats.tsv"))?;
    let last = |v: &[f64]| v.last().copied().unwrap_or(0.0);
    save_json(
        &out.join("summary.json"),
        &EvalSummary {
            learned: last(&eval.cumulative),
            behavior_predicted: last(&behavior),
            behavior_recorded: last(&recorded),
        },
    )?;
    Ok(Models::new())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub models: BTreeMap<String, String>,
    pub stages: BTreeMap<String, BTreeMap<String, String>>,
}

fn report(run: &Run, out: &Path) -> anyhow::Result<Models> {
    let bundle = assemble_report(&run.root)?;
    bundle.write(out)?;
    let mut models = BTreeMap::new();
    let mut stages = BTreeMap::new();
    for s in Stage::ALL.into_iter().filter(|&s| s != Stage::Report) {
        let path = run.path(s, MANIFEST_FILE);
        if path.exists() {
            let m = Manifest::load(&path)?;
            models.extend(m.models);
            stages.insert(s.name().to_string(), m.outputs);
        }
    }
    save_json(
        &out.join("provenance.json"),
        &Provenance {
            seed: run.config.seed,
            fingerprint: run.fingerprint.clone(),
            config: run.config.clone(),
            models,
            stages,
        },
    )?;
    Ok(Models::new())
}

/// Reads the evaluation summary of a completed run.
pub fn load_summary(root: &Path) -> anyhow::Result<EvalSummary> {
    load_json(&root.join(Stage::Evaluate.dir()).join("summary.json"))
}

//! Episodes, padding, windowing, splits and the line-oriented episode file.
//!
//! An episode alternates persuadee states and persuader actions and always
//! starts and ends with a state, so a dialogue of `T` utterances holds
//! `⌈T/2⌉` states and one action fewer. One turn is the pair `(s_t, a_t)`.
//!
//! The file format is one JSON object per line. The first line is a header
//! carrying `schema_version`, `d` and `T`; each following line is one record.
//! Unknown keys are ignored so that exporters may attach provenance.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

pub const TRAIT_DIM: usize = 5;
pub const SCHEMA_VERSION: u32 = 1;
pub const EPISODE_FORMAT: &str = "cfdialog-episodes";

/// OCEAN trait vector: openness, conscientiousness, extroversion,
/// agreeableness, neuroticism.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TraitVector(pub [f64; TRAIT_DIM]);

impl TraitVector {
    /// Midpoint of the 1..5 scale, used before any turn has been seen.
    pub const PRIOR: TraitVector = TraitVector([3.0; TRAIT_DIM]);

    pub fn from_slice(v: &[f64]) -> Result<Self> {
        let arr: [f64; TRAIT_DIM] = v
            .try_into()
            .map_err(|_| Error::shape("trait_vector", format!("{} entries, expected 5", v.len())))?;
        Ok(TraitVector(arr))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Offsets from the scale midpoint.
    pub fn centered(&self) -> [f64; TRAIT_DIM] {
        self.0.map(|v| v - 3.0)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn in_scale(&self) -> bool {
        self.0.iter().all(|v| (1.0..=5.0).contains(v))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Synthetic,
    Corpus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub traits: Option<TraitVector>,
    pub outcome: f64,
    pub source: Source,
    /// Utterance count before padding; absent when the episode was never padded.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub valid_len: Option<usize>,
    /// Counterfactual database this episode belongs to.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub database: Option<usize>,
}

impl Episode {
    /// Utterances stored, padding included.
    pub fn len(&self) -> usize {
        self.states.len() + self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Utterances before padding.
    pub fn valid_len(&self) -> usize {
        self.valid_len.unwrap_or_else(|| self.len())
    }

    pub fn valid_states(&self) -> usize {
        self.valid_len().div_ceil(2)
    }

    /// Number of persuader/persuadee exchanges before padding.
    pub fn turns(&self) -> usize {
        self.valid_len() / 2
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// `s_t ++ a_t`.
    pub fn turn(&self, t: usize) -> Vec<f64> {
        let mut v = self.states[t].clone();
        v.extend_from_slice(&self.actions[t]);
        v
    }

    /// Check the alternation, dimension and finiteness invariants.
    pub fn validate(&self, d: usize) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::InvalidInput(format!("episode `{}` has no states", self.id)));
        }
        if self.states.len() != self.actions.len() + 1 {
            return Err(Error::InvalidInput(format!(
                "episode `{}` has {} states and {} actions; it must start and end with a state",
                self.id,
                self.states.len(),
                self.actions.len()
            )));
        }
        for (kind, vs) in [("state", &self.states), ("action", &self.actions)] {
            for (i, v) in vs.iter().enumerate() {
                if v.len() != d {
                    return Err(Error::shape(
                        "episode",
                        format!("`{}` {kind} {i} has dimension {}, expected {d}", self.id, v.len()),
                    ));
                }
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::NonFinite(format!("`{}` {kind} {i}", self.id)));
                }
            }
        }
        if !self.outcome.is_finite() || self.outcome < 0.0 {
            return Err(Error::InvalidInput(format!(
                "episode `{}` outcome {} must be finite and non-negative",
                self.id, self.outcome
            )));
        }
        if let Some(t) = &self.traits {
            if !t.is_finite() {
                return Err(Error::NonFinite(format!("`{}` traits", self.id)));
            }
        }
        if let Some(v) = self.valid_len {
            if v > self.len() || v % 2 == 0 {
                return Err(Error::InvalidInput(format!(
                    "episode `{}` valid length {v} does not fit {} utterances",
                    self.id,
                    self.len()
                )));
            }
        }
        Ok(())
    }
}

/// Stored utterance count for horizon `t`: `⌈T/2⌉` states and one action fewer.
pub fn padded_len(t: usize) -> usize {
    2 * t.div_ceil(2) - 1
}

/// Append zero state/action pairs until every episode spans horizon `t`.
pub fn pad_episodes(episodes: Vec<Episode>, t: usize) -> Result<Vec<Episode>> {
    let target_states = t.div_ceil(2);
    episodes
        .into_iter()
        .map(|mut ep| {
            if ep.len() > t {
                return Err(Error::InvalidInput(format!(
                    "episode `{}` has {} utterances, longer than T = {t}",
                    ep.id,
                    ep.len()
                )));
            }
            if ep.states.len() < target_states {
                let d = ep.dim();
                ep.valid_len = Some(ep.valid_len());
                while ep.states.len() < target_states {
                    ep.actions.push(vec![0.0; d]);
                    ep.states.push(vec![0.0; d]);
                }
            }
            Ok(ep)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Filtered {
    pub kept: Vec<Episode>,
    pub removed: usize,
    /// Set when the filter removed every episode of a non-empty input.
    pub emptied: bool,
}

/// Keep episodes whose outcome is at most `max_outcome`, in order.
pub fn filter_by_outcome(episodes: Vec<Episode>, max_outcome: f64) -> Result<Filtered> {
    if max_outcome.is_nan() || max_outcome <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "outcome threshold must be positive, got {max_outcome}"
        )));
    }
    let before = episodes.len();
    let kept: Vec<Episode> = episodes
        .into_iter()
        .filter(|e| e.outcome <= max_outcome)
        .collect();
    let removed = before - kept.len();
    Ok(Filtered {
        emptied: before > 0 && kept.is_empty(),
        removed,
        kept,
    })
}

/// `size` consecutive turns of one episode with that episode's trait target.
#[derive(Clone, Debug, PartialEq)]
pub struct TurnWindow {
    pub episode: usize,
    pub start: usize,
    /// One `2d` row per turn.
    pub turns: Vec<Vec<f64>>,
    pub target: TraitVector,
}

impl TurnWindow {
    pub fn size(&self) -> usize {
        self.turns.len()
    }
}

/// Sliding windows of `w` turns with stride one; windows never cross episodes
/// and never include padding.
pub fn window_turns(episodes: &[Episode], w: usize) -> Result<Vec<TurnWindow>> {
    if w == 0 {
        return Err(Error::InvalidInput("window size must be at least 1".into()));
    }
    let mut out = Vec::new();
    for (i, ep) in episodes.iter().enumerate() {
        let target = ep.traits.ok_or_else(|| {
            Error::InvalidInput(format!("episode `{}` has no trait labels to window against", ep.id))
        })?;
        let turns = ep.turns();
        if w > turns {
            continue;
        }
        for start in 0..=turns - w {
            out.push(TurnWindow {
                episode: i,
                start,
                turns: (start..start + w).map(|t| ep.turn(t)).collect(),
                target,
            });
        }
    }
    Ok(out)
}

/// Seeded shuffle of `0..n` cut at `⌊n·ratio⌋`.
pub fn split_indices(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::InvalidInput(format!("split ratio must lie in (0, 1), got {ratio}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed));
    let cut = (n as f64 * ratio).floor() as usize;
    let test = idx.split_off(cut);
    Ok((idx, test))
}

pub fn split(episodes: &[Episode], ratio: f64, seed: u64) -> Result<(Vec<Episode>, Vec<Episode>)> {
    let (tr, te) = split_indices(episodes.len(), ratio, seed)?;
    let pick = |ix: Vec<usize>| ix.into_iter().map(|i| episodes[i].clone()).collect();
    Ok((pick(tr), pick(te)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    #[serde(default = "default_format")]
    pub format: String,
    pub schema_version: u32,
    pub d: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

fn default_format() -> String {
    EPISODE_FORMAT.to_string()
}

/// A header plus its episodes.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeFile {
    pub d: usize,
    pub horizon: usize,
    pub episodes: Vec<Episode>,
}

impl EpisodeFile {
    pub fn new(d: usize, horizon: usize, episodes: Vec<Episode>) -> Self {
        EpisodeFile { d, horizon, episodes }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format: EPISODE_FORMAT.to_string(),
            schema_version: SCHEMA_VERSION,
            d: self.d,
            horizon: self.horizon,
            count: Some(self.episodes.len()),
        };
        let io = |e| Error::io("<episode stream>", e);
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n").map_err(io)?;
        for ep in &self.episodes {
            ep.validate(self.d)?;
            serde_json::to_writer(&mut w, ep)?;
            w.write_all(b"\n").map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_from(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let header: Header = match lines.next() {
            Some((_, line)) => {
                let line = line.map_err(|e| Error::io("<episode stream>", e))?;
                serde_json::from_str(&line).map_err(|e| Error::Record {
                    record: 0,
                    line: 1,
                    detail: format!("bad header: {e}"),
                })?
            }
            None => {
                return Err(Error::Record {
                    record: 0,
                    line: 1,
                    detail: "missing header".into(),
                })
            }
        };
        if header.format != EPISODE_FORMAT {
            return Err(Error::InvalidInput(format!("not an episode file (format `{}`)", header.format)));
        }
        if header.schema_version != SCHEMA_VERSION {
            return Err(Error::Version {
                found: header.schema_version,
                expected: SCHEMA_VERSION,
            });
        }
        let mut episodes = Vec::new();
        for (i, line) in lines {
            let line = line.map_err(|e| Error::io("<episode stream>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record = episodes.len();
            let bad = |detail: String| Error::Record {
                record,
                line: i + 1,
                detail,
            };
            let ep: Episode = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
            ep.validate(header.d).map_err(|e| bad(e.to_string()))?;
            if ep.len() > header.horizon {
                return Err(bad(format!("{} utterances exceed T = {}", ep.len(), header.horizon)));
            }
            episodes.push(ep);
        }
        if let Some(n) = header.count {
            if n != episodes.len() {
                return Err(Error::Record {
                    record: episodes.len(),
                    line: episodes.len() + 2,
                    detail: format!("header promises {n} records, found {}", episodes.len()),
                });
            }
        }
        Ok(EpisodeFile {
            d: header.d,
            horizon: header.horizon,
            episodes,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(id: &str, utterances: usize, d: usize) -> Episode {
        let states = utterances.div_ceil(2);
        Episode {
            id: id.into(),
            states: (0..states).map(|i| vec![i as f64 + 0.5; d]).collect(),
            actions: (0..states - 1).map(|i| vec![-(i as f64); d]).collect(),
            traits: Some(TraitVector([3.0, 3.2, 3.0, 3.6, 3.0])),
            outcome: 2.0,
            source: Source::Synthetic,
            valid_len: None,
            database: None,
        }
    }

    #[test]
    fn padding_appends_one_pair_for_two_missing_utterances() {
        let out = pad_episodes(vec![ep("a", 23, 2)], 25).unwrap();
        assert_eq!(out[0].states.len(), 13);
        assert_eq!(out[0].actions.len(), 12);
        assert_eq!(out[0].valid_len(), 23);
        assert_eq!(out[0].states[12], vec![0.0, 0.0]);
        assert_eq!(out[0].turns(), 11);
    }

    #[test]
    fn padding_full_length_is_a_no_op() {
        let e = ep("a", 25, 2);
        assert_eq!(pad_episodes(vec![e.clone()], 25).unwrap(), vec![e]);
        assert!(pad_episodes(vec![], 25).unwrap().is_empty());
        assert!(pad_episodes(vec![ep("a", 27, 2)], 25).is_err());
    }

    #[test]
    fn outcome_filter_keeps_order_and_flags_empty_result() {
        let mut v: Vec<Episode> = [0.0, 2.0, 25.0]
            .iter()
            .enumerate()
            .map(|(i, &o)| Episode { outcome: o, ..ep(&i.to_string(), 3, 1) })
            .collect();
        let f = filter_by_outcome(v.clone(), 20.0).unwrap();
        assert_eq!(f.kept.iter().map(|e| e.outcome).collect::<Vec<_>>(), vec![0.0, 2.0]);
        assert!(!f.emptied);
        assert_eq!(filter_by_outcome(v.clone(), f64::INFINITY).unwrap().kept, v);
        v.retain(|e| e.outcome > 20.0);
        let f = filter_by_outcome(v, 20.0).unwrap();
        assert!(f.kept.is_empty() && f.emptied);
    }

    #[test]
    fn window_counts() {
        let eps = vec![ep("a", 25, 2)];
        assert_eq!(window_turns(&eps, 1).unwrap().len(), 12);
        assert_eq!(window_turns(&eps, 4).unwrap().len(), 9);
        assert_eq!(window_turns(&eps, 13).unwrap().len(), 0);
        let w = &window_turns(&eps, 4).unwrap()[2];
        assert_eq!(w.turns[0], eps[0].turn(2));
        let unlabeled = vec![Episode { traits: None, ..ep("u", 5, 2) }];
        assert!(window_turns(&unlabeled, 1).is_err());
    }

    #[test]
    fn split_sizes() {
        let (a, b) = split_indices(997, 0.8, 1).unwrap();
        assert_eq!((a.len(), b.len()), (797, 200));
        let (a, b) = split_indices(2, 0.5, 1).unwrap();
        assert_eq!((a.len(), b.len()), (1, 1));
        assert_eq!(split_indices(50, 0.8, 9).unwrap(), split_indices(50, 0.8, 9).unwrap());
        assert!(split_indices(5, 1.0, 0).is_err());
    }

    #[test]
    fn truncated_file_names_the_record() {
        let file = EpisodeFile::new(2, 5, vec![ep("a", 5, 2), ep("b", 5, 2), ep("c", 5, 2)]);
        let mut buf = Vec::new();
        file.write_to(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let cut = &text[..text.len() - 20];
        match EpisodeFile::read_from(cut.as_bytes()) {
            Err(Error::Record { record, line, .. }) => assert_eq!((record, line), (2, 4)),
            other => panic!("expected a record error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_dimension_is_rejected_with_line() {
        let text = "{\"schema_version\":1,\"d\":3,\"T\":3}\n\
                    {\"id\":\"x\",\"states\":[[1,2],[3,4]],\"actions\":[[0,0]],\"traits\":null,\"outcome\":1.0,\"source\":\"corpus\"}\n";
        match EpisodeFile::read_from(text.as_bytes()) {
            Err(Error::Record { record: 0, line: 2, detail }) => assert!(detail.contains("dimension")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn version_mismatch_is_reported() {
        let text = "{\"schema_version\":7,\"d\":3,\"T\":3}\n";
        assert!(matches!(
            EpisodeFile::read_from(text.as_bytes()),
            Err(Error::Version { found: 7, .. })
        ));
    }
}

//! Interaction logs, video metadata, preprocessing and splitting.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A video and its duration in seconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Video {
    pub id: String,
    pub length: f64,
}

/// One logged view: `user` and `video` index into the dataset's [`Vocab`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub video: usize,
    pub view_time: f64,
}

/// Id tables shared by every split derived from the same source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "VocabRepr", into = "VocabRepr")]
pub struct Vocab {
    users: Vec<String>,
    videos: Vec<Video>,
    user_index: HashMap<String, usize>,
    video_index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabRepr {
    users: Vec<String>,
    videos: Vec<Video>,
}

impl From<VocabRepr> for Vocab {
    fn from(r: VocabRepr) -> Self {
        Vocab::new(r.users, r.videos)
    }
}

impl From<Vocab> for VocabRepr {
    fn from(v: Vocab) -> Self {
        VocabRepr {
            users: v.users,
            videos: v.videos,
        }
    }
}

impl Vocab {
    pub fn new(users: Vec<String>, videos: Vec<Video>) -> Self {
        let user_index = users.iter().enumerate().map(|(i, u)| (u.clone(), i)).collect();
        let video_index = videos.iter().enumerate().map(|(i, v)| (v.id.clone(), i)).collect();
        Vocab {
            users,
            videos,
            user_index,
            video_index,
        }
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn user_id(&self, user: usize) -> &str {
        &self.users[user]
    }

    pub fn video(&self, video: usize) -> &Video {
        &self.videos[video]
    }

    pub fn videos(&self) -> &[Video] {
        &self.videos
    }

    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.user_index.get(id).copied()
    }

    pub fn video_index(&self, id: &str) -> Option<usize> {
        self.video_index.get(id).copied()
    }
}

/// An immutable interaction log with its per-user index.
#[derive(Debug, Clone)]
pub struct Dataset {
    vocab: Arc<Vocab>,
    interactions: Vec<Interaction>,
    per_user: Vec<Vec<usize>>,
}

impl Dataset {
    /// Builds a dataset, checking that every interaction references the vocabulary.
    pub fn new(vocab: Arc<Vocab>, interactions: Vec<Interaction>) -> Result<Self> {
        let mut per_user = vec![Vec::new(); vocab.num_users()];
        for (i, x) in interactions.iter().enumerate() {
            if x.user >= vocab.num_users() {
                return Err(Error::UnknownId {
                    kind: "user",
                    index: x.user,
                    size: vocab.num_users(),
                });
            }
            if x.video >= vocab.num_videos() {
                return Err(Error::UnknownId {
                    kind: "video",
                    index: x.video,
                    size: vocab.num_videos(),
                });
            }
            if !(x.view_time >= 0.0) || !x.view_time.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "interaction {i} has invalid view time {}",
                    x.view_time
                )));
            }
            per_user[x.user].push(i);
        }
        Ok(Dataset {
            vocab,
            interactions,
            per_user,
        })
    }

    pub fn vocab(&self) -> &Arc<Vocab> {
        &self.vocab
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// Indices into [`Dataset::interactions`] for one user.
    pub fn user_interactions(&self, user: usize) -> &[usize] {
        &self.per_user[user]
    }

    pub fn video_length(&self, video: usize) -> f64 {
        self.vocab.video(video).length
    }

    /// Play progress `view_time / length` of interaction `i`.
    pub fn progress(&self, i: usize) -> f64 {
        let x = &self.interactions[i];
        x.view_time / self.video_length(x.video)
    }

    /// Users with at least one interaction, in index order.
    pub fn active_users(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.per_user.len()).filter(|&u| !self.per_user[u].is_empty())
    }

    /// Same vocabulary, different interactions.
    pub fn with_interactions(&self, interactions: Vec<Interaction>) -> Result<Self> {
        Dataset::new(self.vocab.clone(), interactions)
    }
}

/// How to treat ids missing from a fixed vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnknownIds {
    Error,
    Skip,
}

fn detect_delimiter(text: &str) -> u8 {
    let header = text.lines().next().unwrap_or("");
    if header.contains('\t') {
        b'\t'
    } else {
        b','
    }
}

fn read_table(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .delimiter(detect_delimiter(text))
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes())
}

fn column(headers: &csv::StringRecord, name: &str, source_name: &str) -> Result<usize> {
    headers.iter().position(|h| h == name).ok_or_else(|| Error::Parse {
        source_name: source_name.to_string(),
        line: 1,
        message: format!("missing column `{name}` in header"),
    })
}

fn parse_seconds(raw: &str, what: &str, source_name: &str, line: u64) -> Result<f64> {
    let parse_err = |message: String| Error::Parse {
        source_name: source_name.to_string(),
        line,
        message,
    };
    let value: f64 = raw
        .parse()
        .map_err(|_| parse_err(format!("{what} `{raw}` is not a number")))?;
    if !value.is_finite() {
        return Err(parse_err(format!("{what} `{raw}` is not finite")));
    }
    Ok(value)
}

fn read_to_string(mut reader: impl Read, source_name: &str) -> Result<String> {
    let mut text = String::new();
    reader
        .read_to_string(&mut text)
        .map_err(|e| Error::io(source_name, e))?;
    Ok(text)
}

/// Parses a `video_id,length` table.
pub fn read_videos(reader: impl Read, source_name: &str) -> Result<Vec<Video>> {
    let text = read_to_string(reader, source_name)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = read_table(&text);
    let headers = rdr.headers()?.clone();
    let id_col = column(&headers, "video_id", source_name)?;
    let len_col = column(&headers, "length", source_name)?;
    let mut seen = HashMap::new();
    let mut videos = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| {
            record.get(c).ok_or_else(|| Error::Parse {
                source_name: source_name.to_string(),
                line,
                message: "row has too few columns".into(),
            })
        };
        let id = field(id_col)?.to_string();
        let length = parse_seconds(field(len_col)?, "length", source_name, line)?;
        if length <= 0.0 {
            return Err(Error::InvalidLength { video_id: id, length });
        }
        if seen.insert(id.clone(), line).is_some() {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line,
                message: format!("duplicate video id `{id}`"),
            });
        }
        videos.push(Video { id, length });
    }
    Ok(videos)
}

struct RawInteraction {
    line: u64,
    user_id: String,
    video_id: String,
    view_time: f64,
}

fn read_interaction_rows(reader: impl Read, source_name: &str) -> Result<Vec<RawInteraction>> {
    let text = read_to_string(reader, source_name)?;
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut rdr = read_table(&text);
    let headers = rdr.headers()?.clone();
    let user_col = column(&headers, "user_id", source_name)?;
    let video_col = column(&headers, "video_id", source_name)?;
    let time_col = column(&headers, "view_time", source_name)?;
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |c: usize| {
            record.get(c).ok_or_else(|| Error::Parse {
                source_name: source_name.to_string(),
                line,
                message: "row has too few columns".into(),
            })
        };
        let view_time = parse_seconds(field(time_col)?, "view_time", source_name, line)?;
        if view_time < 0.0 {
            return Err(Error::Parse {
                source_name: source_name.to_string(),
                line,
                message: format!("view_time {view_time} is negative"),
            });
        }
        rows.push(RawInteraction {
            line,
            user_id: field(user_col)?.to_string(),
            video_id: field(video_col)?.to_string(),
            view_time,
        });
    }
    Ok(rows)
}

/// Builds a dataset from an interaction log and a video table.
///
/// Users are indexed in order of first appearance. Duplicate (user, video)
/// rows are kept as separate interactions.
pub fn ingest(
    interactions: impl Read,
    interactions_name: &str,
    videos: impl Read,
    videos_name: &str,
) -> Result<Dataset> {
    let videos = read_videos(videos, videos_name)?;
    let rows = read_interaction_rows(interactions, interactions_name)?;
    if rows.is_empty() {
        log::warn!("{interactions_name}: no interactions");
    }
    let video_index: HashMap<&str, usize> = videos.iter().enumerate().map(|(i, v)| (v.id.as_str(), i)).collect();
    let mut users = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let video = *video_index
            .get(row.video_id.as_str())
            .ok_or_else(|| Error::UnknownVideo {
                source_name: interactions_name.to_string(),
                line: row.line,
                video_id: row.video_id.clone(),
            })?;
        let user = match user_index.get(&row.user_id) {
            Some(&u) => u,
            None => {
                users.push(row.user_id.clone());
                user_index.insert(row.user_id, users.len() - 1);
                users.len() - 1
            }
        };
        out.push(Interaction {
            user,
            video,
            view_time: row.view_time,
        });
    }
    Dataset::new(Arc::new(Vocab::new(users, videos)), out)
}

/// Reads an interaction log against an existing vocabulary.
///
/// Returns the dataset and the number of rows dropped under [`UnknownIds::Skip`].
pub fn ingest_with_vocab(
    interactions: impl Read,
    interactions_name: &str,
    vocab: Arc<Vocab>,
    unknown: UnknownIds,
) -> Result<(Dataset, usize)> {
    let rows = read_interaction_rows(interactions, interactions_name)?;
    if rows.is_empty() {
        log::warn!("{interactions_name}: no interactions");
    }
    let mut out = Vec::with_capacity(rows.len());
    let mut skipped = 0;
    for row in rows {
        let video = vocab.video_index(&row.video_id);
        let user = vocab.user_index(&row.user_id);
        match (user, video) {
            (Some(user), Some(video)) => out.push(Interaction {
                user,
                video,
                view_time: row.view_time,
            }),
            _ if unknown == UnknownIds::Skip => skipped += 1,
            (_, None) => {
                return Err(Error::UnknownVideo {
                    source_name: interactions_name.to_string(),
                    line: row.line,
                    video_id: row.video_id,
                })
            }
            (None, _) => {
                return Err(Error::UnknownUser {
                    source_name: interactions_name.to_string(),
                    line: row.line,
                    user_id: row.user_id,
                })
            }
        }
    }
    if skipped > 0 {
        log::warn!("{interactions_name}: skipped {skipped} rows with ids outside the vocabulary");
    }
    Ok((Dataset::new(vocab, out)?, skipped))
}

/// [`ingest`] from file paths.
pub fn ingest_paths(interactions: &Path, videos: &Path) -> Result<Dataset> {
    let i = fs::File::open(interactions).map_err(|e| Error::io(interactions, e))?;
    let v = fs::File::open(videos).map_err(|e| Error::io(videos, e))?;
    ingest(i, &interactions.display().to_string(), v, &videos.display().to_string())
}

/// [`ingest_with_vocab`] from a file path.
pub fn ingest_path_with_vocab(interactions: &Path, vocab: Arc<Vocab>, unknown: UnknownIds) -> Result<(Dataset, usize)> {
    let i = fs::File::open(interactions).map_err(|e| Error::io(interactions, e))?;
    ingest_with_vocab(i, &interactions.display().to_string(), vocab, unknown)
}

/// Writes `user_id,video_id,view_time`.
pub fn write_interactions(d: &Dataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["user_id", "video_id", "view_time"])?;
    for x in d.interactions() {
        w.write_record([
            d.vocab().user_id(x.user),
            &d.vocab().video(x.video).id,
            &x.view_time.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<interactions>", e))?;
    Ok(())
}

/// Writes `video_id,length`.
pub fn write_videos(vocab: &Vocab, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["video_id", "length"])?;
    for v in vocab.videos() {
        w.write_record([v.id.as_str(), &v.length.to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<videos>", e))?;
    Ok(())
}

/// Caps applied before grouping and training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Interactions with play progress above this are dropped (repeat plays).
    pub max_progress: f64,
    /// Videos longer than this (seconds) are dropped with their interactions.
    pub max_length: f64,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        PreprocessConfig {
            max_progress: 3.0,
            max_length: 60.0,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PreprocessStats {
    pub removed_videos: usize,
    pub removed_by_length: usize,
    pub removed_by_progress: usize,
}

/// Applies the repeat-play and length caps.
pub fn preprocess(d: &Dataset, cfg: &PreprocessConfig) -> Result<(Dataset, PreprocessStats)> {
    if !(cfg.max_progress > 0.0) {
        return Err(Error::config("max_progress", "must be positive"));
    }
    if !(cfg.max_length > 0.0) {
        return Err(Error::config("max_length", "must be positive"));
    }
    let vocab = d.vocab();
    let mut remap = vec![None; vocab.num_videos()];
    let mut kept = Vec::new();
    for (i, v) in vocab.videos().iter().enumerate() {
        if v.length <= cfg.max_length {
            remap[i] = Some(kept.len());
            kept.push(v.clone());
        }
    }
    let mut stats = PreprocessStats {
        removed_videos: vocab.num_videos() - kept.len(),
        ..Default::default()
    };
    let mut out = Vec::with_capacity(d.len());
    for (i, x) in d.interactions().iter().enumerate() {
        let Some(video) = remap[x.video] else {
            stats.removed_by_length += 1;
            continue;
        };
        if d.progress(i) > cfg.max_progress {
            stats.removed_by_progress += 1;
            continue;
        }
        out.push(Interaction { video, ..*x });
    }
    let vocab = Arc::new(Vocab::new(vocab.users().to_vec(), kept));
    Ok((Dataset::new(vocab, out)?, stats))
}

/// Fractions of interactions held out for validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub validation_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            validation_fraction: 0.1,
            test_fraction: 0.2,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("validation_fraction", self.validation_fraction),
            ("test_fraction", self.test_fraction),
        ] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::config(name, format!("{f} is not in [0, 1]")));
            }
        }
        if self.validation_fraction + self.test_fraction >= 1.0 {
            return Err(Error::config(
                "test_fraction",
                "validation_fraction + test_fraction must be below 1",
            ));
        }
        Ok(())
    }
}

/// Train, validation and test partitions sharing one vocabulary.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Shuffles interactions with the seed and cuts exact quotas.
pub fn split(d: &Dataset, spec: &SplitSpec) -> Result<Splits> {
    spec.validate()?;
    if d.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty dataset".into()));
    }
    let n = d.len();
    let n_valid = (n as f64 * spec.validation_fraction).round() as usize;
    let n_test = ((n as f64 * spec.test_fraction).round() as usize).min(n - n_valid);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));

    let take = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        d.with_interactions(idx.into_iter().map(|i| d.interactions()[i]).collect())
    };
    Ok(Splits {
        validation: take(&order[..n_valid])?,
        test: take(&order[n_valid..n_valid + n_test])?,
        train: take(&order[n_valid + n_test..])?,
    })
}

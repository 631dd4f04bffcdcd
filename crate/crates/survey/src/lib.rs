//! Pairwise realism survey: serves randomized baseline/ours image pairs,
//! records votes in an append-only JSON-lines log and aggregates per-dataset
//! preference percentages.
//!
//! Content layout: `{content}/{dataset}/{baseline,ours}/{stem}.png`.

pub mod server;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SurveyError {
    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),
    #[error("no pairs left for this session in dataset {0:?}")]
    Exhausted(String),
    #[error("unknown pair {0:?}")]
    UnknownPair(String),
    #[error("pair {0:?} already voted in this session")]
    Duplicate(String),
    #[error("invalid vote record: {0}")]
    InvalidRecord(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path} line {line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
}

impl SurveyError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, SurveyError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

impl Side {
    pub fn flipped(self) -> Self {
        match self {
            Side::Left => Side::Right,
            Side::Right => Side::Left,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Model {
    Baseline,
    Ours,
}

impl Model {
    pub const ALL: [Model; 2] = [Model::Baseline, Model::Ours];

    pub fn dir_name(self) -> &'static str {
        match self {
            Model::Baseline => "baseline",
            Model::Ours => "ours",
        }
    }

    pub fn other(self) -> Self {
        match self {
            Model::Baseline => Model::Ours,
            Model::Ours => Model::Baseline,
        }
    }
}

/// One line of the vote log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub pair_id: String,
    pub dataset: String,
    pub left_model: Model,
    pub right_model: Model,
    pub chosen_side: Side,
    pub session: String,
    pub timestamp: String,
}

impl VoteRecord {
    pub fn validate(&self) -> Result<()> {
        if self.left_model == self.right_model {
            return Err(SurveyError::InvalidRecord(format!("pair {} shows the same model twice", self.pair_id)));
        }
        if self.pair_id.is_empty() || self.session.is_empty() {
            return Err(SurveyError::InvalidRecord("empty pair id or session".into()));
        }
        Ok(())
    }

    pub fn chosen_model(&self) -> Model {
        match self.chosen_side {
            Side::Left => self.left_model,
            Side::Right => self.right_model,
        }
    }
}

/// What the client sees: no model identity, only opaque URLs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDescriptor {
    pub pair_id: String,
    pub left_url: String,
    pub right_url: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServedPair {
    pub dataset: String,
    pub stem: String,
    pub left_model: Model,
    pub session: String,
}

impl ServedPair {
    pub fn model_at(&self, side: Side) -> Model {
        match side {
            Side::Left => self.left_model,
            Side::Right => self.left_model.other(),
        }
    }
}

/// Datasets with the stems present for both models.
#[derive(Debug, Clone, Default)]
pub struct Content {
    root: PathBuf,
    stems: BTreeMap<String, Vec<String>>,
}

fn png_stems(dir: &Path) -> Result<BTreeSet<String>> {
    let mut out = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(dir).map_err(|e| SurveyError::io(dir, e))? {
        let path = entry.map_err(|e| SurveyError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            if let Some(s) = path.file_stem() {
                out.insert(s.to_string_lossy().into_owned());
            }
        }
    }
    Ok(out)
}

impl Content {
    pub fn scan(root: &Path) -> Result<Self> {
        let mut stems = BTreeMap::new();
        if root.is_dir() {
            for entry in std::fs::read_dir(root).map_err(|e| SurveyError::io(root, e))? {
                let path = entry.map_err(|e| SurveyError::io(root, e))?.path();
                if !path.is_dir() {
                    continue;
                }
                let base = png_stems(&path.join(Model::Baseline.dir_name()))?;
                let ours = png_stems(&path.join(Model::Ours.dir_name()))?;
                let shared: Vec<String> = base.intersection(&ours).cloned().collect();
                if !shared.is_empty() {
                    stems.insert(path.file_name().unwrap_or_default().to_string_lossy().into_owned(), shared);
                }
            }
        }
        Ok(Self { root: root.to_path_buf(), stems })
    }

    pub fn datasets(&self) -> Vec<String> {
        self.stems.keys().cloned().collect()
    }

    pub fn stems(&self, dataset: &str) -> Option<&[String]> {
        self.stems.get(dataset).map(Vec::as_slice)
    }

    pub fn image_path(&self, dataset: &str, model: Model, stem: &str) -> PathBuf {
        self.root.join(dataset).join(model.dir_name()).join(format!("{stem}.png"))
    }
}

/// Append-only JSON-lines log of [`VoteRecord`]s.
#[derive(Debug)]
pub struct VoteLog {
    path: PathBuf,
    file: File,
}

impl VoteLog {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| SurveyError::io(parent, e))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| SurveyError::io(path, e))?;
        Ok(Self { path: path.to_path_buf(), file })
    }

    /// Writes the record as one line with a single write call, then syncs.
    pub fn append(&mut self, record: &VoteRecord) -> Result<()> {
        record.validate()?;
        let mut line = serde_json::to_string(record).map_err(|e| SurveyError::InvalidRecord(e.to_string()))?;
        line.push('\n');
        self.file.write_all(line.as_bytes()).map_err(|e| SurveyError::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| SurveyError::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every record of a log; a missing file is an empty log.
pub fn read_log(path: &Path) -> Result<Vec<VoteRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let f = File::open(path).map_err(|e| SurveyError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| SurveyError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| SurveyError::Parse { path: path.to_path_buf(), line: i + 1, message };
        let rec: VoteRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        rec.validate().map_err(|e| parse_err(e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetResult {
    pub dataset: String,
    pub votes: usize,
    pub ours_percent: f64,
    pub baseline_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Results {
    pub datasets: Vec<DatasetResult>,
    pub notices: Vec<String>,
}

/// Vote-level preference percentages per dataset. Datasets listed in `known`
/// without any vote are omitted and noted.
pub fn aggregate_results(records: &[VoteRecord], known: &[String]) -> Results {
    let mut counts: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for r in records {
        let c = counts.entry(r.dataset.as_str()).or_default();
        c.0 += 1;
        if r.chosen_model() == Model::Ours {
            c.1 += 1;
        }
    }
    let datasets = counts
        .iter()
        .map(|(d, &(n, ours))| {
            let ours_percent = 100.0 * ours as f64 / n as f64;
            DatasetResult { dataset: d.to_string(), votes: n, ours_percent, baseline_percent: 100.0 - ours_percent }
        })
        .collect();
    let notices = known
        .iter()
        .filter(|d| !counts.contains_key(d.as_str()))
        .map(|d| format!("no votes for {d}"))
        .collect();
    Results { datasets, notices }
}

/// Service state: content index, served pairs, per-session pools and the log.
#[derive(Debug)]
pub struct Survey {
    content: Content,
    rng: ChaCha8Rng,
    served: HashMap<String, ServedPair>,
    pools: HashMap<(String, String), Vec<String>>,
    voted: HashSet<(String, String)>,
    records: Vec<VoteRecord>,
    log: VoteLog,
}

impl Survey {
    /// Opens the service over `content_dir`, replaying any existing log.
    pub fn open(content_dir: &Path, log_path: &Path, seed: u64) -> Result<Self> {
        let content = Content::scan(content_dir)?;
        let records = read_log(log_path)?;
        let voted = records.iter().map(|r| (r.pair_id.clone(), r.session.clone())).collect();
        Ok(Self {
            content,
            rng: ChaCha8Rng::seed_from_u64(seed),
            served: HashMap::new(),
            pools: HashMap::new(),
            voted,
            records,
            log: VoteLog::open(log_path)?,
        })
    }

    pub fn content(&self) -> &Content {
        &self.content
    }

    pub fn datasets(&self) -> Vec<String> {
        self.content.datasets()
    }

    pub fn records(&self) -> &[VoteRecord] {
        &self.records
    }

    pub fn served(&self, pair_id: &str) -> Option<&ServedPair> {
        self.served.get(pair_id)
    }

    fn fresh_id(&mut self) -> String {
        loop {
            let id = format!("{:016x}", self.rng.random::<u64>());
            if !self.served.contains_key(&id) {
                return id;
            }
        }
    }

    /// Serves the next pair of `dataset` for `session`: stems are drawn without
    /// replacement per session, sides assigned by a fair coin.
    pub fn make_pair(&mut self, dataset: &str, session: &str) -> Result<PairDescriptor> {
        let stems = self.content.stems(dataset).ok_or_else(|| SurveyError::UnknownDataset(dataset.to_string()))?;
        let key = (session.to_string(), dataset.to_string());
        if !self.pools.contains_key(&key) {
            let mut pool = stems.to_vec();
            pool.shuffle(&mut self.rng);
            self.pools.insert(key.clone(), pool);
        }
        let stem = self.pools.get_mut(&key).and_then(Vec::pop).ok_or_else(|| SurveyError::Exhausted(dataset.to_string()))?;
        let left_model = if self.rng.random::<bool>() { Model::Ours } else { Model::Baseline };
        let pair_id = self.fresh_id();
        self.served.insert(
            pair_id.clone(),
            ServedPair { dataset: dataset.to_string(), stem, left_model, session: session.to_string() },
        );
        Ok(PairDescriptor {
            left_url: format!("/api/image/{pair_id}/left"),
            right_url: format!("/api/image/{pair_id}/right"),
            pair_id,
        })
    }

    pub fn image_path(&self, pair_id: &str, side: Side) -> Result<PathBuf> {
        let p = self.served.get(pair_id).ok_or_else(|| SurveyError::UnknownPair(pair_id.to_string()))?;
        Ok(self.content.image_path(&p.dataset, p.model_at(side), &p.stem))
    }

    /// Appends a vote after checking the pair was served and this session has
    /// not voted on it yet. Rejected votes leave the log untouched.
    pub fn record_vote(&mut self, pair_id: &str, chosen_side: Side, session: &str) -> Result<VoteRecord> {
        let p = self.served.get(pair_id).ok_or_else(|| SurveyError::UnknownPair(pair_id.to_string()))?;
        let key = (pair_id.to_string(), session.to_string());
        if self.voted.contains(&key) {
            return Err(SurveyError::Duplicate(pair_id.to_string()));
        }
        let record = VoteRecord {
            pair_id: pair_id.to_string(),
            dataset: p.dataset.clone(),
            left_model: p.left_model,
            right_model: p.left_model.other(),
            chosen_side,
            session: session.to_string(),
            timestamp: chrono::Utc::now().to_rfc3339(),
        };
        self.log.append(&record)?;
        self.voted.insert(key);
        self.records.push(record.clone());
        Ok(record)
    }

    pub fn results(&self) -> Results {
        aggregate_results(&self.records, &self.content.datasets())
    }
}

//! Dataset ingestion, feature vectorization, sequence tokenization,
//! holdout splitting, and synthetic data generation.
//!
//! File formats (all plain text, one record per line):
//!
//! - ratings: `user_id<TAB>item_id<TAB>rating[<TAB>timestamp]`
//! - embeddings: header `dim=<D>`, then `entity_id<TAB>v1,v2,...,vD`
//! - sequences: `entity_id<TAB>token1,token2,...` oldest first
//! - MovieLens-100k: the published layout (tab-separated `u.data`,
//!   pipe-separated `u.user` / `u.item`)

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::cf::InteractionMatrix;
use crate::error::{DhaError, Result};
use crate::math::DenseMatrix;
use crate::rng::SeededRng;
use crate::seq2seq::TokenSequence;

/// Interactions re-indexed to contiguous 0-based user/item indices.
///
/// `user_ids`/`item_ids` are the original identifiers in ascending order;
/// position in the vector is the index used everywhere downstream, so the
/// id ↔ index maps are bijections independent of input row order.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsDataset {
    pub user_ids: Vec<u32>,
    pub item_ids: Vec<u32>,
    /// (user_index, item_index, rating)
    pub triples: Vec<(u32, u32, f64)>,
    pub timestamps: Option<Vec<i64>>,
}

impl RatingsDataset {
    /// Build from raw-id triples, assigning indices by ascending id.
    pub fn from_raw(raw: &[(u32, u32, f64)], timestamps: Option<Vec<i64>>) -> Result<Self> {
        if raw.is_empty() {
            return Err(DhaError::EmptyData("no interactions".into()));
        }
        if let Some(ts) = &timestamps {
            if ts.len() != raw.len() {
                return Err(DhaError::DimensionMismatch(format!(
                    "{} timestamps for {} interactions",
                    ts.len(),
                    raw.len()
                )));
            }
        }
        let user_ids: Vec<u32> = raw
            .iter()
            .map(|&(u, _, _)| u)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let item_ids: Vec<u32> = raw
            .iter()
            .map(|&(_, i, _)| i)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let uindex: HashMap<u32, u32> = user_ids
            .iter()
            .enumerate()
            .map(|(k, &id)| (id, k as u32))
            .collect();
        let iindex: HashMap<u32, u32> = item_ids
            .iter()
            .enumerate()
            .map(|(k, &id)| (id, k as u32))
            .collect();
        let mut seen = BTreeSet::new();
        let mut triples = Vec::with_capacity(raw.len());
        for &(u, i, r) in raw {
            if r < 0.0 || !r.is_finite() {
                return Err(DhaError::NegativeRating(r));
            }
            let (ui, ii) = (uindex[&u], iindex[&i]);
            if !seen.insert((ui, ii)) {
                return Err(DhaError::DuplicateEntry { user: u, item: i });
            }
            triples.push((ui, ii, r));
        }
        Ok(RatingsDataset {
            user_ids,
            item_ids,
            triples,
            timestamps,
        })
    }

    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn user_index(&self, id: u32) -> Option<usize> {
        self.user_ids.binary_search(&id).ok()
    }

    pub fn item_index(&self, id: u32) -> Option<usize> {
        self.item_ids.binary_search(&id).ok()
    }

    /// Sparse matrix view over the index space.
    pub fn interactions(&self) -> Result<InteractionMatrix> {
        InteractionMatrix::from_triples(self.num_users(), self.num_items(), &self.triples)
    }
}

/// Where a side-information table came from, kept for logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    OneHot,
    BagOfWords,
    ExternalEmbedding,
}

/// Fixed-length feature vector per entity id.
#[derive(Debug, Clone, PartialEq)]
pub struct SideInfoTable {
    pub dim: usize,
    pub provenance: Provenance,
    pub rows: BTreeMap<u32, Vec<f64>>,
}

impl SideInfoTable {
    /// Stack rows for `ids` in order; entities absent from the table get a
    /// zero vector. Returns the matrix and how many were missing.
    pub fn align(&self, ids: &[u32]) -> (DenseMatrix, usize) {
        let mut out = DenseMatrix::zeros(ids.len(), self.dim);
        let mut missing = 0;
        for (k, id) in ids.iter().enumerate() {
            match self.rows.get(id) {
                Some(v) => out.row_mut(k).copy_from_slice(v),
                None => missing += 1,
            }
        }
        (out, missing)
    }
}

/// One sequence per entity, fitted to a fixed length, over a deterministic
/// vocabulary (tokens sorted before id assignment; ids 0/1 reserved).
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub time_steps: usize,
    /// token id → token string, starting at id 2.
    pub vocab: Vec<String>,
    pub sequences: BTreeMap<u32, TokenSequence>,
}

impl SequenceDataset {
    pub fn vocab_size(&self) -> usize {
        self.vocab.len() + 2
    }

    /// Sequences for `ids` in order; absent entities get an all-pad sequence.
    pub fn align(&self, ids: &[u32]) -> Vec<TokenSequence> {
        ids.iter()
            .map(|&id| {
                self.sequences
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| TokenSequence::fit_to(id, &[], self.time_steps))
            })
            .collect()
    }
}

/// A per-interaction holdout partition. Both halves keep the parent's
/// id ↔ index maps so factor rows stay aligned across train and test.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: RatingsDataset,
    pub test: RatingsDataset,
    pub seed: u64,
    pub ratio: f64,
}

/// Uniformly sample round(ratio·N) interactions into the test half.
pub fn split_holdout(ds: &RatingsDataset, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DhaError::RatioOutOfRange(ratio));
    }
    let n = ds.triples.len();
    let test_size = (ratio * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::labeled(seed, "split");
    rng.shuffle(&mut order);
    let mut is_test = vec![false; n];
    for &k in order.iter().take(test_size) {
        is_test[k] = true;
    }
    let pick = |want_test: bool| -> RatingsDataset {
        let triples: Vec<_> = ds
            .triples
            .iter()
            .zip(&is_test)
            .filter(|(_, &t)| t == want_test)
            .map(|(&tr, _)| tr)
            .collect();
        let timestamps = ds.timestamps.as_ref().map(|ts| {
            ts.iter()
                .zip(&is_test)
                .filter(|(_, &t)| t == want_test)
                .map(|(&v, _)| v)
                .collect()
        });
        RatingsDataset {
            user_ids: ds.user_ids.clone(),
            item_ids: ds.item_ids.clone(),
            triples,
            timestamps,
        }
    };
    Ok(Split {
        train: pick(false),
        test: pick(true),
        seed,
        ratio,
    })
}

fn open_lines(path: &Path) -> Result<impl Iterator<Item = std::io::Result<String>>> {
    if !path.exists() {
        return Err(DhaError::MissingFile(path.display().to_string()));
    }
    let file = std::fs::File::open(path)?;
    Ok(BufReader::new(file).lines())
}

fn malformed(path: &Path, line: usize, reason: impl Into<String>) -> DhaError {
    DhaError::MalformedLine {
        path: path.display().to_string(),
        line,
        reason: reason.into(),
    }
}

/// Load `user<TAB>item<TAB>rating[<TAB>timestamp]` triples. The timestamp
/// column must be consistently present or consistently absent.
pub fn load_ratings(path: &Path) -> Result<RatingsDataset> {
    let mut raw = Vec::new();
    let mut timestamps: Vec<i64> = Vec::new();
    let mut has_ts: Option<bool> = None;
    for (lineno, line) in open_lines(path)?.enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(malformed(
                path,
                lineno,
                format!(
                    "expected 3 or 4 tab-separated fields, found {}",
                    fields.len()
                ),
            ));
        }
        let with_ts = fields.len() == 4;
        match has_ts {
            None => has_ts = Some(with_ts),
            Some(prev) if prev != with_ts => {
                return Err(malformed(path, lineno, "inconsistent timestamp column"));
            }
            _ => {}
        }
        let user: u32 = fields[0]
            .parse()
            .map_err(|_| malformed(path, lineno, format!("bad user id '{}'", fields[0])))?;
        let item: u32 = fields[1]
            .parse()
            .map_err(|_| malformed(path, lineno, format!("bad item id '{}'", fields[1])))?;
        let rating: f64 = fields[2]
            .parse()
            .map_err(|_| malformed(path, lineno, format!("bad rating '{}'", fields[2])))?;
        if with_ts {
            let ts: i64 = fields[3]
                .parse()
                .map_err(|_| malformed(path, lineno, format!("bad timestamp '{}'", fields[3])))?;
            timestamps.push(ts);
        }
        raw.push((user, item, rating));
    }
    if raw.is_empty() {
        return Err(DhaError::EmptyData(path.display().to_string()));
    }
    let timestamps = if has_ts == Some(true) {
        Some(timestamps)
    } else {
        None
    };
    RatingsDataset::from_raw(&raw, timestamps)
}

/// Load an embedding table: header `dim=<D>`, rows `id<TAB>v1,v2,...`.
pub fn load_embeddings(path: &Path) -> Result<SideInfoTable> {
    let mut lines = open_lines(path)?;
    let header = match lines.next() {
        Some(h) => h?,
        None => return Err(DhaError::EmptyData(path.display().to_string())),
    };
    let dim: usize = header
        .trim()
        .strip_prefix("dim=")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| {
            DhaError::HeaderMismatch(format!("expected 'dim=<D>' header, found '{header}'"))
        })?;
    if dim == 0 {
        return Err(DhaError::HeaderMismatch("dim must be >= 1".into()));
    }
    let mut rows = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id_str, values) = line
            .split_once('\t')
            .ok_or_else(|| malformed(path, lineno, "expected 'id<TAB>v1,v2,...'"))?;
        let id: u32 = id_str
            .parse()
            .map_err(|_| malformed(path, lineno, format!("bad entity id '{id_str}'")))?;
        let parsed: Vec<f64> = values
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| malformed(path, lineno, "bad float value"))?;
        if parsed.len() != dim {
            return Err(DhaError::DimMismatch {
                line: lineno,
                expected: dim,
                found: parsed.len(),
            });
        }
        rows.insert(id, parsed);
    }
    Ok(SideInfoTable {
        dim,
        provenance: Provenance::ExternalEmbedding,
        rows,
    })
}

/// Load token sequences, keep the most recent `t` tokens per entity
/// (left-padding shorter ones), and build a deterministic vocabulary over
/// the sorted set of distinct tokens.
pub fn load_sequences(path: &Path, t: usize) -> Result<SequenceDataset> {
    if t == 0 {
        return Err(DhaError::ConfigInvalid("time_steps must be >= 1".into()));
    }
    let mut raw: Vec<(u32, Vec<String>)> = Vec::new();
    let mut tokens = BTreeSet::new();
    for (lineno, line) in open_lines(path)?.enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id_str, toks) = line
            .split_once('\t')
            .ok_or_else(|| malformed(path, lineno, "expected 'id<TAB>tok1,tok2,...'"))?;
        let id: u32 = id_str
            .parse()
            .map_err(|_| malformed(path, lineno, format!("bad entity id '{id_str}'")))?;
        let toks: Vec<String> = toks
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if toks.is_empty() {
            return Err(malformed(path, lineno, "no tokens"));
        }
        for tok in &toks {
            tokens.insert(tok.clone());
        }
        raw.push((id, toks));
    }
    let vocab: Vec<String> = tokens.into_iter().collect();
    let index: HashMap<&str, u32> = vocab
        .iter()
        .enumerate()
        .map(|(k, s)| (s.as_str(), k as u32 + 2))
        .collect();
    let mut sequences = BTreeMap::new();
    for (id, toks) in raw {
        let ids: Vec<u32> = toks.iter().map(|s| index[s.as_str()]).collect();
        sequences.insert(id, TokenSequence::fit_to(id, &ids, t));
    }
    Ok(SequenceDataset {
        time_steps: t,
        vocab,
        sequences,
    })
}

// ---- generic vectorization -------------------------------------------------

/// How a raw field turns into vector coordinates.
#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    /// Categorical value → one-hot over the values seen at build time, plus
    /// a trailing "unknown" slot for unseen or missing values.
    OneHot,
    /// Numeric value → one-hot over intervals: (−∞, e₀), [e₀, e₁), …, [eₖ, ∞).
    /// Missing or unparseable values leave all bins zero.
    Binned { edges: Vec<f64> },
    /// Whitespace-separated tokens → occurrence counts over the vocabulary
    /// seen at build time; unseen tokens are dropped.
    BagOfWords,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
}

/// One raw entity: an id plus string-valued fields.
#[derive(Debug, Clone, Default)]
pub struct RawEntity {
    pub id: u32,
    pub fields: HashMap<String, String>,
}

#[derive(Debug, Clone)]
enum FieldVocab {
    OneHot(Vec<String>),
    Binned(Vec<f64>),
    BagOfWords(Vec<String>),
}

impl FieldVocab {
    fn dim(&self) -> usize {
        match self {
            FieldVocab::OneHot(values) => values.len() + 1,
            FieldVocab::Binned(edges) => edges.len() + 1,
            FieldVocab::BagOfWords(vocab) => vocab.len(),
        }
    }
}

/// A frozen vectorization plan: vocabularies and bins are built once (from
/// training entities only, to avoid leakage) and then applied to anything.
#[derive(Debug, Clone)]
pub struct Vectorizer {
    fields: Vec<(FieldSchema, FieldVocab)>,
    pub dim: usize,
}

/// Learn vocabularies for every schema field from `entities`.
pub fn build_vectorizer(entities: &[RawEntity], schema: &[FieldSchema]) -> Result<Vectorizer> {
    if entities.is_empty() {
        return Err(DhaError::EmptyData("no entities to vectorize".into()));
    }
    let known: BTreeSet<&str> = schema.iter().map(|f| f.name.as_str()).collect();
    for e in entities {
        for name in e.fields.keys() {
            if !known.contains(name.as_str()) {
                return Err(DhaError::UnknownField(name.clone()));
            }
        }
    }
    let mut fields = Vec::with_capacity(schema.len());
    let mut dim = 0;
    for f in schema {
        let vocab = match &f.kind {
            FieldKind::OneHot => {
                let values: BTreeSet<String> = entities
                    .iter()
                    .filter_map(|e| e.fields.get(&f.name).cloned())
                    .collect();
                FieldVocab::OneHot(values.into_iter().collect())
            }
            FieldKind::Binned { edges } => {
                let mut sorted = edges.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite bin edges"));
                FieldVocab::Binned(sorted)
            }
            FieldKind::BagOfWords => {
                let tokens: BTreeSet<String> = entities
                    .iter()
                    .filter_map(|e| e.fields.get(&f.name))
                    .flat_map(|v| v.split_whitespace().map(str::to_string))
                    .collect();
                FieldVocab::BagOfWords(tokens.into_iter().collect())
            }
        };
        dim += vocab.dim();
        fields.push((f.clone(), vocab));
    }
    Ok(Vectorizer { fields, dim })
}

impl Vectorizer {
    /// Concatenate every field's encoding into one fixed-length vector per
    /// entity.
    pub fn vectorize(
        &self,
        entities: &[RawEntity],
        provenance: Provenance,
    ) -> Result<SideInfoTable> {
        let known: BTreeSet<&str> = self.fields.iter().map(|(f, _)| f.name.as_str()).collect();
        let mut rows = BTreeMap::new();
        for e in entities {
            for name in e.fields.keys() {
                if !known.contains(name.as_str()) {
                    return Err(DhaError::UnknownField(name.clone()));
                }
            }
            let mut row = Vec::with_capacity(self.dim);
            for (schema, vocab) in &self.fields {
                let value = e.fields.get(&schema.name);
                match vocab {
                    FieldVocab::OneHot(values) => {
                        let mut slot = values.len(); // unknown
                        if let Some(v) = value {
                            if let Ok(k) = values.binary_search(v) {
                                slot = k;
                            }
                        }
                        let base = row.len();
                        row.resize(base + values.len() + 1, 0.0);
                        row[base + slot] = 1.0;
                    }
                    FieldVocab::Binned(edges) => {
                        let base = row.len();
                        row.resize(base + edges.len() + 1, 0.0);
                        if let Some(x) = value.and_then(|v| v.trim().parse::<f64>().ok()) {
                            let bin = edges.iter().take_while(|&&e| x >= e).count();
                            row[base + bin] = 1.0;
                        }
                    }
                    FieldVocab::BagOfWords(vocab_tokens) => {
                        let base = row.len();
                        row.resize(base + vocab_tokens.len(), 0.0);
                        if let Some(v) = value {
                            for tok in v.split_whitespace() {
                                if let Ok(k) =
                                    vocab_tokens.binary_search_by(|t| t.as_str().cmp(tok))
                                {
                                    row[base + k] += 1.0;
                                }
                            }
                        }
                    }
                }
            }
            rows.insert(e.id, row);
        }
        Ok(SideInfoTable {
            dim: self.dim,
            provenance,
            rows,
        })
    }
}

// ---- MovieLens-100k ---------------------------------------------------------

/// Lowercase a title into bag-of-words tokens, stripping punctuation.
fn title_tokens(title: &str) -> String {
    title
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Load the canonical MovieLens-100k directory: `u.data` interactions plus
/// user demographics (age bins, gender, occupation, zip) and item content
/// (genre flags, title bag-of-words) vectorized into side tables.
pub fn load_movielens_100k(dir: &Path) -> Result<(RatingsDataset, SideInfoTable, SideInfoTable)> {
    let ratings = load_ratings(&dir.join("u.data"))?;

    // u.user: id|age|gender|occupation|zip
    let user_path = dir.join("u.user");
    let mut users = Vec::new();
    for (lineno, line) in open_lines(&user_path)?.enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('|').collect();
        if f.len() != 5 {
            return Err(malformed(
                &user_path,
                lineno,
                format!("expected 5 pipe-separated fields, found {}", f.len()),
            ));
        }
        let id: u32 = f[0]
            .parse()
            .map_err(|_| malformed(&user_path, lineno, format!("bad user id '{}'", f[0])))?;
        let mut fields = HashMap::new();
        fields.insert("age".to_string(), f[1].to_string());
        fields.insert("gender".to_string(), f[2].to_string());
        fields.insert("occupation".to_string(), f[3].to_string());
        fields.insert("zip".to_string(), f[4].to_string());
        users.push(RawEntity { id, fields });
    }
    let user_schema = vec![
        FieldSchema {
            name: "age".into(),
            kind: FieldKind::Binned {
                edges: vec![18.0, 25.0, 35.0, 45.0, 55.0],
            },
        },
        FieldSchema {
            name: "gender".into(),
            kind: FieldKind::OneHot,
        },
        FieldSchema {
            name: "occupation".into(),
            kind: FieldKind::OneHot,
        },
        FieldSchema {
            name: "zip".into(),
            kind: FieldKind::OneHot,
        },
    ];
    let user_side =
        build_vectorizer(&users, &user_schema)?.vectorize(&users, Provenance::OneHot)?;

    // u.item: id|title|release|video|url|19 genre flags
    let item_path = dir.join("u.item");
    let mut items = Vec::new();
    let mut genre_rows: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (lineno, line) in open_lines(&item_path)?.enumerate() {
        let lineno = lineno + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('|').collect();
        if f.len() != 24 {
            return Err(malformed(
                &item_path,
                lineno,
                format!("expected 24 pipe-separated fields, found {}", f.len()),
            ));
        }
        let id: u32 = f[0]
            .parse()
            .map_err(|_| malformed(&item_path, lineno, format!("bad item id '{}'", f[0])))?;
        let mut flags = Vec::with_capacity(19);
        for (k, v) in f[5..24].iter().enumerate() {
            let flag: f64 = v
                .trim()
                .parse()
                .map_err(|_| malformed(&item_path, lineno, format!("bad genre flag #{k} '{v}'")))?;
            flags.push(flag);
        }
        genre_rows.insert(id, flags);
        let mut fields = HashMap::new();
        fields.insert("title".to_string(), title_tokens(f[1]));
        items.push(RawEntity { id, fields });
    }
    let item_schema = vec![FieldSchema {
        name: "title".into(),
        kind: FieldKind::BagOfWords,
    }];
    let title_side =
        build_vectorizer(&items, &item_schema)?.vectorize(&items, Provenance::BagOfWords)?;

    // Genre flags prefixed onto the title bag-of-words.
    let mut rows = BTreeMap::new();
    for (id, flags) in genre_rows {
        let mut row = flags;
        if let Some(t) = title_side.rows.get(&id) {
            row.extend_from_slice(t);
        } else {
            row.resize(19 + title_side.dim, 0.0);
        }
        rows.insert(id, row);
    }
    let item_side = SideInfoTable {
        dim: 19 + title_side.dim,
        provenance: Provenance::BagOfWords,
        rows,
    };
    Ok((ratings, user_side, item_side))
}

// ---- synthetic data ----------------------------------------------------------

/// Knobs for the synthetic generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub users: usize,
    pub items: usize,
    /// Rank of the planted affinity matrix.
    pub d_true: usize,
    /// Standard deviation of the noise added to affinities before choosing
    /// positives.
    pub noise: f64,
    /// 1 = side vectors are exact linear images of the planted factors,
    /// 0 = pure noise.
    pub side_corr: f64,
    /// Observed positives per user (its top items by noisy affinity).
    pub positives_per_user: usize,
    pub user_side_dim: usize,
    pub item_side_dim: usize,
    /// Real tokens in the sequence vocabulary (ids 2..).
    pub vocab_tokens: usize,
    pub seq_len: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            users: 200,
            items: 100,
            d_true: 3,
            noise: 0.1,
            side_corr: 0.9,
            positives_per_user: 25,
            user_side_dim: 12,
            item_side_dim: 12,
            vocab_tokens: 8,
            seq_len: 6,
        }
    }
}

/// Synthetic dataset plus the planted ground truth that generated it.
#[derive(Debug, Clone)]
pub struct SynthData {
    pub ratings: RatingsDataset,
    pub user_side: SideInfoTable,
    pub item_side: SideInfoTable,
    pub user_seqs: SequenceDataset,
    /// Planted factors (users × d_true, items × d_true).
    pub true_u: DenseMatrix,
    pub true_v: DenseMatrix,
    /// Mixing matrices mapping planted factors to side vectors.
    pub user_mix: DenseMatrix,
    pub item_mix: DenseMatrix,
}

/// Plant a low-rank affinity structure and derive every data source from it:
/// each user's positives are their top items by (noisy) affinity, side
/// vectors are linear images of the planted factors blended with noise at
/// strength `side_corr`, and sequences sample tokens whose probabilities are
/// a softmax of a linear read-out of the user factor.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    if cfg.d_true == 0 {
        return Err(DhaError::ConfigInvalid("d_true must be >= 1".into()));
    }
    if cfg.users == 0 || cfg.items == 0 {
        return Err(DhaError::ConfigInvalid(
            "users and items must be >= 1".into(),
        ));
    }
    if cfg.positives_per_user == 0 || cfg.positives_per_user > cfg.items {
        return Err(DhaError::ConfigInvalid(format!(
            "positives_per_user must be in 1..={}",
            cfg.items
        )));
    }
    let mut rng = SeededRng::labeled(seed, "synth");
    let gauss_matrix = |rows: usize, cols: usize, rng: &mut SeededRng| {
        let mut m = DenseMatrix::zeros(rows, cols);
        for v in m.as_mut_slice() {
            *v = rng.next_gaussian();
        }
        m
    };
    let true_u = gauss_matrix(cfg.users, cfg.d_true, &mut rng);
    let true_v = gauss_matrix(cfg.items, cfg.d_true, &mut rng);

    // Positives: top-P items by noisy affinity, rating 1.
    let mut triples = Vec::with_capacity(cfg.users * cfg.positives_per_user);
    for i in 0..cfg.users {
        let ui = true_u.row_vector(i);
        let mut scored: Vec<(usize, f64)> = (0..cfg.items)
            .map(|j| {
                let s = crate::math::dot_slices(ui.as_slice(), true_v.row(j))
                    + cfg.noise * rng.next_gaussian();
                (j, s)
            })
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .expect("finite affinities")
                .then(a.0.cmp(&b.0))
        });
        for &(j, _) in scored.iter().take(cfg.positives_per_user) {
            triples.push((i as u32, j as u32, 1.0));
        }
    }
    triples.sort_unstable_by_key(|t| (t.0, t.1));
    let ratings = RatingsDataset::from_raw(&triples, None)?;

    // Side vectors: side_corr · (mix · factor) + (1 − side_corr) · noise.
    let user_mix = gauss_matrix(cfg.user_side_dim, cfg.d_true, &mut rng);
    let item_mix = gauss_matrix(cfg.item_side_dim, cfg.d_true, &mut rng);
    let side_rows = |factors: &DenseMatrix, mix: &DenseMatrix, rng: &mut SeededRng| {
        let mut rows = BTreeMap::new();
        for e in 0..factors.rows() {
            let img = mix.matvec(&factors.row_vector(e)).expect("shapes fixed");
            let row: Vec<f64> = img
                .as_slice()
                .iter()
                .map(|&v| cfg.side_corr * v + (1.0 - cfg.side_corr) * rng.next_gaussian())
                .collect();
            rows.insert(e as u32, row);
        }
        rows
    };
    let user_side = SideInfoTable {
        dim: cfg.user_side_dim,
        provenance: Provenance::ExternalEmbedding,
        rows: side_rows(&true_u, &user_mix, &mut rng),
    };
    let item_side = SideInfoTable {
        dim: cfg.item_side_dim,
        provenance: Provenance::ExternalEmbedding,
        rows: side_rows(&true_v, &item_mix, &mut rng),
    };

    // Sequences: tokens drawn from softmax(readout · u*_i).
    let readout = gauss_matrix(cfg.vocab_tokens, cfg.d_true, &mut rng);
    let vocab: Vec<String> = (0..cfg.vocab_tokens).map(|k| format!("t{k:03}")).collect();
    let mut sequences = BTreeMap::new();
    for i in 0..cfg.users {
        let logits = readout.matvec(&true_u.row_vector(i)).expect("shapes fixed");
        let probs = crate::seq2seq::softmax(&logits);
        let mut toks = Vec::with_capacity(cfg.seq_len);
        for _ in 0..cfg.seq_len {
            let draw = rng.next_unit_f64();
            let mut acc = 0.0;
            let mut chosen = cfg.vocab_tokens - 1;
            for (k, &p) in probs.as_slice().iter().enumerate() {
                acc += p;
                if draw < acc {
                    chosen = k;
                    break;
                }
            }
            toks.push(chosen as u32 + 2);
        }
        sequences.insert(
            i as u32,
            TokenSequence::fit_to(i as u32, &toks, cfg.seq_len),
        );
    }
    let user_seqs = SequenceDataset {
        time_steps: cfg.seq_len,
        vocab,
        sequences,
    };

    Ok(SynthData {
        ratings,
        user_side,
        item_side,
        user_seqs,
        true_u,
        true_v,
        user_mix,
        item_mix,
    })
}

#[cfg(test)]
mod tests {
    // Oracles below use naive index loops on purpose: the indices must line
    // up across separate matrices, and the duplication is the point.
    #![allow(clippy::needless_range_loop)]

    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn ratings_loader_reindexes_and_keeps_timestamps() {
        let f = write_tmp("7\t100\t5\t111\n3\t100\t4\t222\n7\t200\t1\t333\n");
        let ds = load_ratings(f.path()).unwrap();
        assert_eq!(ds.user_ids, vec![3, 7]);
        assert_eq!(ds.item_ids, vec![100, 200]);
        assert_eq!(ds.user_index(7), Some(1));
        assert_eq!(ds.item_index(200), Some(1));
        assert_eq!(ds.triples, vec![(1, 0, 5.0), (0, 0, 4.0), (1, 1, 1.0)]);
        assert_eq!(ds.timestamps, Some(vec![111, 222, 333]));
    }

    #[test]
    fn ratings_loader_rejects_bad_field_count() {
        let f = write_tmp("1\t2\n");
        assert!(matches!(
            load_ratings(f.path()),
            Err(DhaError::MalformedLine { line: 1, .. })
        ));
    }

    #[test]
    fn ratings_loader_rejects_empty() {
        let f = write_tmp("");
        assert!(matches!(
            load_ratings(f.path()),
            Err(DhaError::EmptyData(_))
        ));
    }

    #[test]
    fn missing_file_reported() {
        assert!(matches!(
            load_ratings(Path::new("/nonexistent/ratings.tsv")),
            Err(DhaError::MissingFile(_))
        ));
    }

    #[test]
    fn id_index_roundtrip() {
        let f = write_tmp("10\t5\t1\n20\t6\t1\n30\t7\t1\n");
        let ds = load_ratings(f.path()).unwrap();
        for (k, &id) in ds.user_ids.iter().enumerate() {
            assert_eq!(ds.user_index(id), Some(k));
        }
        for (k, &id) in ds.item_ids.iter().enumerate() {
            assert_eq!(ds.item_index(id), Some(k));
        }
    }

    #[test]
    fn embeddings_loader_happy_path() {
        let f = write_tmp("dim=4\n42\t0.1,0.2,0.3,0.4\n");
        let table = load_embeddings(f.path()).unwrap();
        assert_eq!(table.dim, 4);
        assert_eq!(table.rows[&42], vec![0.1, 0.2, 0.3, 0.4]);

        let (m, missing) = table.align(&[42, 99]);
        assert_eq!(m.row(0), &[0.1, 0.2, 0.3, 0.4]);
        assert_eq!(m.row(1), &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(missing, 1);
    }

    #[test]
    fn embeddings_loader_rejects_dim_mismatch() {
        let f = write_tmp("dim=4\n42\t0.1,0.2,0.3\n");
        assert!(matches!(
            load_embeddings(f.path()),
            Err(DhaError::DimMismatch {
                line: 2,
                expected: 4,
                found: 3
            })
        ));
    }

    #[test]
    fn embeddings_loader_rejects_bad_header() {
        let f = write_tmp("dimension 4\n");
        assert!(matches!(
            load_embeddings(f.path()),
            Err(DhaError::HeaderMismatch(_))
        ));
    }

    #[test]
    fn sequences_truncate_and_pad() {
        let f = write_tmp("1\ta,b,c,d\n2\ta\n");
        let ds = load_sequences(f.path(), 2).unwrap();
        // vocab sorted: a=2, b=3, c=4, d=5; keep most recent 2.
        assert_eq!(ds.sequences[&1].tokens, vec![4, 5]);
        let ds3 = {
            let f = write_tmp("1\ta,b,c,d\n2\ta\n");
            load_sequences(f.path(), 3).unwrap()
        };
        assert_eq!(ds3.sequences[&2].tokens, vec![0, 0, 2]);
        for seq in ds3.sequences.values() {
            assert_eq!(seq.tokens.len(), 3);
        }
    }

    #[test]
    fn sequence_vocab_is_row_order_independent() {
        let a = write_tmp("1\tzebra,apple\n2\tmango\n");
        let b = write_tmp("2\tmango\n1\tzebra,apple\n");
        let da = load_sequences(a.path(), 2).unwrap();
        let db = load_sequences(b.path(), 2).unwrap();
        assert_eq!(da.vocab, db.vocab);
        assert_eq!(da.sequences, db.sequences);
        assert_eq!(da.vocab, vec!["apple", "mango", "zebra"]);
    }

    #[test]
    fn split_counts_partition_and_determinism() {
        let triples: Vec<(u32, u32, f64)> = (0..1000)
            .map(|k| (k % 50, k % 97, 1.0 + (k % 5) as f64))
            .collect();
        // Deduplicate (u, i) pairs for a valid dataset.
        let mut seen = std::collections::BTreeSet::new();
        let triples: Vec<_> = triples
            .into_iter()
            .filter(|&(u, i, _)| seen.insert((u, i)))
            .collect();
        let ds = RatingsDataset::from_raw(&triples, None).unwrap();
        let n = ds.len();
        let split = split_holdout(&ds, 0.2, 7).unwrap();
        assert_eq!(split.test.len(), (0.2 * n as f64).round() as usize);
        assert_eq!(split.train.len() + split.test.len(), n);

        let train_set: BTreeSet<_> = split
            .train
            .triples
            .iter()
            .map(|&(u, i, _)| (u, i))
            .collect();
        let test_set: BTreeSet<_> = split.test.triples.iter().map(|&(u, i, _)| (u, i)).collect();
        assert!(train_set.is_disjoint(&test_set));
        assert_eq!(train_set.len() + test_set.len(), n);

        let again = split_holdout(&ds, 0.2, 7).unwrap();
        assert_eq!(split.train.triples, again.train.triples);
        let other = split_holdout(&ds, 0.2, 8).unwrap();
        assert_ne!(split.train.triples, other.train.triples);
    }

    #[test]
    fn split_rejects_bad_ratio() {
        let ds = RatingsDataset::from_raw(&[(0, 0, 1.0)], None).unwrap();
        assert!(matches!(
            split_holdout(&ds, 0.0, 1),
            Err(DhaError::RatioOutOfRange(_))
        ));
        assert!(matches!(
            split_holdout(&ds, 1.0, 1),
            Err(DhaError::RatioOutOfRange(_))
        ));
    }

    #[test]
    fn vectorizer_one_hot_with_unknown_slot() {
        let mk = |id: u32, genre: &str| RawEntity {
            id,
            fields: [("genre".to_string(), genre.to_string())].into(),
        };
        let train = vec![mk(1, "action"), mk(2, "comedy")];
        let schema = vec![FieldSchema {
            name: "genre".into(),
            kind: FieldKind::OneHot,
        }];
        let vz = build_vectorizer(&train, &schema).unwrap();
        let table = vz.vectorize(&train, Provenance::OneHot).unwrap();
        // sorted vocab [action, comedy] + unknown slot
        assert_eq!(table.dim, 3);
        assert_eq!(table.rows[&1], vec![1.0, 0.0, 0.0]);
        assert_eq!(table.rows[&2], vec![0.0, 1.0, 0.0]);

        let unseen = vec![mk(3, "horror")];
        let t2 = vz.vectorize(&unseen, Provenance::OneHot).unwrap();
        assert_eq!(t2.rows[&3], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn vectorizer_bins_ages() {
        let mk = |id: u32, age: &str| RawEntity {
            id,
            fields: [("age".to_string(), age.to_string())].into(),
        };
        let train = vec![mk(1, "25"), mk(2, "10"), mk(3, "40")];
        let schema = vec![FieldSchema {
            name: "age".into(),
            kind: FieldKind::Binned {
                edges: vec![19.0, 31.0],
            },
        }];
        let vz = build_vectorizer(&train, &schema).unwrap();
        let table = vz.vectorize(&train, Provenance::OneHot).unwrap();
        // bins: (<19), [19,31), [31,∞)
        assert_eq!(table.rows[&1], vec![0.0, 1.0, 0.0]);
        assert_eq!(table.rows[&2], vec![1.0, 0.0, 0.0]);
        assert_eq!(table.rows[&3], vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn vectorizer_bag_of_words_counts() {
        let mk = |id: u32, title: &str| RawEntity {
            id,
            fields: [("title".to_string(), title.to_string())].into(),
        };
        let train = vec![mk(1, "star wars"), mk(2, "star trek")];
        let schema = vec![FieldSchema {
            name: "title".into(),
            kind: FieldKind::BagOfWords,
        }];
        let vz = build_vectorizer(&train, &schema).unwrap();
        let table = vz.vectorize(&train, Provenance::BagOfWords).unwrap();
        // sorted vocab: [star, trek, wars]
        assert_eq!(table.dim, 3);
        assert_eq!(table.rows[&1], vec![1.0, 0.0, 1.0]);
        assert_eq!(table.rows[&2], vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn vectorizer_rejects_unknown_field() {
        let e = RawEntity {
            id: 1,
            fields: [("mystery".to_string(), "x".to_string())].into(),
        };
        let schema = vec![FieldSchema {
            name: "genre".into(),
            kind: FieldKind::OneHot,
        }];
        assert!(matches!(
            build_vectorizer(&[e], &schema),
            Err(DhaError::UnknownField(f)) if f == "mystery"
        ));
    }

    #[test]
    fn movielens_loader_parses_canonical_layout() {
        // Miniature directory in the canonical format.
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join("u.data"),
            "1\t10\t5\t874965758\n2\t10\t3\t876893171\n1\t20\t4\t878542960\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("u.user"),
            "1|24|M|technician|85711\n2|53|F|other|94043\n",
        )
        .unwrap();
        std::fs::write(
            dir.path().join("u.item"),
            "10|Toy Story (1995)|01-Jan-1995||http://x|0|0|0|1|1|1|0|0|0|0|0|0|0|0|0|0|0|0|0\n\
             20|GoldenEye (1995)|01-Jan-1995||http://y|0|1|1|0|0|0|0|0|0|0|0|0|0|0|0|0|1|0|0\n",
        )
        .unwrap();

        let (ratings, user_side, item_side) = load_movielens_100k(dir.path()).unwrap();
        assert_eq!(ratings.len(), 3);
        assert_eq!(ratings.num_users(), 2);
        assert_eq!(ratings.num_items(), 2);

        // age 24 → bin [18, 25); gender M; occupation technician; zip 85711
        let u1 = &user_side.rows[&1];
        assert_eq!(user_side.dim, 6 + 3 + 3 + 3); // bins + (2 vals + unknown) × 3 fields
        assert_eq!(u1[0..6], [0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);

        // item vector: 19 genre flags then title bag-of-words
        let i10 = &item_side.rows[&10];
        assert_eq!(i10[3], 1.0);
        assert_eq!(i10[4], 1.0);
        assert_eq!(item_side.dim, 19 + 4); // title vocab: 1995, goldeneye, story, toy
    }

    #[test]
    fn movielens_loader_rejects_malformed_rating_line() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("u.data"), "1\t10\t5\n1\t20\n").unwrap();
        std::fs::write(dir.path().join("u.user"), "1|24|M|technician|85711\n").unwrap();
        std::fs::write(dir.path().join("u.item"), "").unwrap();
        assert!(matches!(
            load_movielens_100k(dir.path()),
            Err(DhaError::MalformedLine { line: 2, .. })
        ));
    }

    #[test]
    fn synth_exact_side_images_without_noise() {
        let cfg = SynthConfig {
            users: 20,
            items: 15,
            d_true: 2,
            noise: 0.0,
            side_corr: 1.0,
            positives_per_user: 5,
            user_side_dim: 4,
            item_side_dim: 4,
            vocab_tokens: 4,
            seq_len: 3,
        };
        let data = synth_generate(&cfg, 11).unwrap();
        for i in 0..cfg.users {
            let img = data.user_mix.matvec(&data.true_u.row_vector(i)).unwrap();
            let row = &data.user_side.rows[&(i as u32)];
            for (a, b) in img.as_slice().iter().zip(row) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    /// Row-reduction rank with tolerance, written independently for the test.
    fn matrix_rank(m: &DenseMatrix, tol: f64) -> usize {
        let mut a: Vec<Vec<f64>> = (0..m.rows()).map(|r| m.row(r).to_vec()).collect();
        let (rows, cols) = (m.rows(), m.cols());
        let mut rank = 0;
        let mut row = 0;
        for col in 0..cols {
            let mut piv = row;
            for r in row..rows {
                if a[r][col].abs() > a[piv][col].abs() {
                    piv = r;
                }
            }
            if piv >= rows || a[piv][col].abs() <= tol {
                continue;
            }
            a.swap(row, piv);
            let p = a[row][col];
            for r in 0..rows {
                if r != row && a[r][col].abs() > 0.0 {
                    let f = a[r][col] / p;
                    for c in col..cols {
                        a[r][c] -= f * a[row][c];
                    }
                }
            }
            rank += 1;
            row += 1;
            if row == rows {
                break;
            }
        }
        rank
    }

    #[test]
    fn synth_noiseless_affinity_has_planted_rank() {
        let cfg = SynthConfig {
            users: 12,
            items: 10,
            d_true: 3,
            noise: 0.0,
            positives_per_user: 4,
            ..SynthConfig::default()
        };
        let data = synth_generate(&cfg, 5).unwrap();
        let mut affinity = DenseMatrix::zeros(cfg.users, cfg.items);
        for i in 0..cfg.users {
            for j in 0..cfg.items {
                let s = crate::math::dot_slices(data.true_u.row(i), data.true_v.row(j));
                affinity.set(i, j, s);
            }
        }
        assert_eq!(matrix_rank(&affinity, 1e-9), cfg.d_true);
    }

    #[test]
    fn synth_positives_are_top_items_when_noiseless() {
        let cfg = SynthConfig {
            users: 15,
            items: 30,
            d_true: 2,
            noise: 0.0,
            positives_per_user: 6,
            ..SynthConfig::default()
        };
        let data = synth_generate(&cfg, 9).unwrap();
        let inter = data.ratings.interactions().unwrap();
        for i in 0..cfg.users {
            // Oracle: rank items by exact planted affinity.
            let mut scored: Vec<(usize, f64)> = (0..cfg.items)
                .map(|j| {
                    (
                        j,
                        crate::math::dot_slices(data.true_u.row(i), data.true_v.row(j)),
                    )
                })
                .collect();
            scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let oracle_top: BTreeSet<u32> = scored
                .iter()
                .take(cfg.positives_per_user)
                .map(|&(j, _)| j as u32)
                .collect();
            // Map compressed item indices back to original ids.
            let ui = data.ratings.user_index(i as u32).unwrap();
            let observed: BTreeSet<u32> = inter
                .user_row(ui)
                .iter()
                .map(|&(j, _)| data.ratings.item_ids[j as usize])
                .collect();
            assert_eq!(oracle_top, observed, "user {i}");
        }
    }

    #[test]
    fn synth_is_seed_deterministic() {
        let cfg = SynthConfig::default();
        let a = synth_generate(&cfg, 3).unwrap();
        let b = synth_generate(&cfg, 3).unwrap();
        assert_eq!(a.ratings.triples, b.ratings.triples);
        assert_eq!(a.user_side.rows, b.user_side.rows);
        assert_eq!(a.user_seqs.sequences, b.user_seqs.sequences);
        let c = synth_generate(&cfg, 4).unwrap();
        assert_ne!(a.ratings.triples, c.ratings.triples);
    }

    #[test]
    fn sequence_dataset_align_pads_missing_entities() {
        let f = write_tmp("1\ta,b\n");
        let ds = load_sequences(f.path(), 3).unwrap();
        let seqs = ds.align(&[1, 2]);
        assert_eq!(seqs[0].tokens, vec![0, 2, 3]);
        assert_eq!(seqs[1].tokens, vec![0, 0, 0]);
    }
}

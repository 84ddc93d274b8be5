//! Hashtag text channel: dictionary word segmentation, word-embedding
//! lookup, exact nearest-neighbour retrieval and neighbour hashtag pooling.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_string, Error, Result};

/// A lowercase alphanumeric hashtag without the leading `#`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Hashtag(String);

impl Hashtag {
    pub fn new(raw: &str) -> Result<Self> {
        let trimmed = raw.strip_prefix('#').unwrap_or(raw);
        if trimmed.is_empty() {
            return Err(Error::Input("empty hashtag".into()));
        }
        if !trimmed.chars().all(char::is_alphanumeric) {
            return Err(Error::Input(format!("hashtag {raw:?} is not alphanumeric")));
        }
        Ok(Hashtag(trimmed.to_lowercase()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for Hashtag {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        Hashtag::new(&s)
    }
}

impl From<Hashtag> for String {
    fn from(h: Hashtag) -> String {
        h.0
    }
}

impl fmt::Display for Hashtag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegDictionary {
    entries: HashMap<String, f64>,
    max_word_len: usize,
}

impl SegDictionary {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>) -> Result<Self> {
        let mut map = HashMap::new();
        let mut max_word_len = 0;
        for (word, score) in entries {
            if word.is_empty() || word.chars().any(|c| c.is_uppercase() || c.is_whitespace()) {
                return Err(Error::Input(format!("invalid dictionary word {word:?}")));
            }
            if !score.is_finite() {
                return Err(Error::Input(format!("non-finite score for {word:?}")));
            }
            max_word_len = max_word_len.max(word.chars().count());
            map.insert(word, score);
        }
        if map.is_empty() {
            return Err(Error::Input("segmentation dictionary is empty".into()));
        }
        Ok(SegDictionary {
            entries: map,
            max_word_len,
        })
    }

    /// One word per line with an optional rank score column. Words without a
    /// score get their squared character length. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let word = parts.next().expect("non-empty line").to_lowercase();
            let score = match parts.next() {
                Some(s) => s
                    .parse::<f64>()
                    .map_err(|e| Error::parse(format!("dictionary line {}", lineno + 1), e))?,
                None => (word.chars().count() as f64).powi(2),
            };
            if parts.next().is_some() {
                return Err(Error::parse(
                    format!("dictionary line {}", lineno + 1),
                    "expected `word [score]`",
                ));
            }
            entries.push((word, score));
        }
        Self::new(entries)
    }

    /// `word score` lines sorted by word; re-parses to an equal dictionary.
    pub fn to_text(&self) -> String {
        let mut words: Vec<(&String, &f64)> = self.entries.iter().collect();
        words.sort_by(|a, b| a.0.cmp(b.0));
        words.into_iter().map(|(w, s)| format!("{w} {s:?}\n")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    pub fn score(&self, word: &str) -> Option<f64> {
        self.entries.get(word).copied()
    }

    pub fn max_word_len(&self) -> usize {
        self.max_word_len
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segmentation {
    pub tokens: Vec<String>,
    /// False when no full dictionary segmentation exists and the greedy
    /// fallback produced the tokens.
    pub complete: bool,
}

#[derive(Clone)]
struct Best {
    score: f64,
    tokens: Vec<String>,
}

fn better(candidate: &Best, current: &Best) -> bool {
    if candidate.score != current.score {
        return candidate.score > current.score;
    }
    if candidate.tokens.len() != current.tokens.len() {
        return candidate.tokens.len() < current.tokens.len();
    }
    candidate.tokens < current.tokens
}

pub fn word_break(tag: &Hashtag, dict: &SegDictionary) -> Segmentation {
    word_break_str(tag.as_str(), dict).expect("hashtags are never empty")
}

/// Maximum-score segmentation into dictionary words; ties go to fewer
/// tokens, then to the lexicographically smaller token sequence.
pub fn word_break_str(text: &str, dict: &SegDictionary) -> Result<Segmentation> {
    if text.is_empty() {
        return Err(Error::Input("cannot segment an empty string".into()));
    }
    let chars: Vec<(usize, char)> = text.char_indices().collect();
    let n = chars.len();
    let byte_at = |i: usize| if i == n { text.len() } else { chars[i].0 };
    let mut best: Vec<Option<Best>> = vec![None; n + 1];
    best[0] = Some(Best {
        score: 0.0,
        tokens: Vec::new(),
    });
    for end in 1..=n {
        let start_min = end.saturating_sub(dict.max_word_len());
        let mut winner: Option<Best> = None;
        for start in start_min..end {
            let Some(prefix) = &best[start] else { continue };
            let word = &text[byte_at(start)..byte_at(end)];
            let Some(s) = dict.score(word) else { continue };
            let mut tokens = prefix.tokens.clone();
            tokens.push(word.to_string());
            let cand = Best {
                score: prefix.score + s,
                tokens,
            };
            if winner.as_ref().is_none_or(|w| better(&cand, w)) {
                winner = Some(cand);
            }
        }
        best[end] = winner;
    }
    if let Some(b) = best[n].take() {
        return Ok(Segmentation {
            tokens: b.tokens,
            complete: true,
        });
    }
    Ok(Segmentation {
        tokens: greedy_split(text, &chars, dict),
        complete: false,
    })
}

fn greedy_split(text: &str, chars: &[(usize, char)], dict: &SegDictionary) -> Vec<String> {
    let n = chars.len();
    let byte_at = |i: usize| if i == n { text.len() } else { chars[i].0 };
    let longest_at = |pos: usize| -> Option<usize> {
        let max_end = (pos + dict.max_word_len()).min(n);
        (pos + 1..=max_end)
            .rev()
            .find(|&end| dict.score(&text[byte_at(pos)..byte_at(end)]).is_some())
    };
    let mut tokens = Vec::new();
    let mut residue_start: Option<usize> = None;
    let mut pos = 0;
    while pos < n {
        match longest_at(pos) {
            Some(end) => {
                if let Some(rs) = residue_start.take() {
                    tokens.push(text[byte_at(rs)..byte_at(pos)].to_string());
                }
                tokens.push(text[byte_at(pos)..byte_at(end)].to_string());
                pos = end;
            }
            None => {
                residue_start.get_or_insert(pos);
                pos += 1;
            }
        }
    }
    if let Some(rs) = residue_start {
        tokens.push(text[byte_at(rs)..].to_string());
    }
    tokens
}

/// Word vectors of a fixed dimension.
pub trait EmbeddingProvider: Sync {
    fn dim(&self) -> usize;
    /// `None` for out-of-vocabulary words.
    fn lookup(&self, word: &str) -> Option<&[f64]>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, entries: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Input("embedding dimension must be positive".into()));
        }
        let mut vectors = HashMap::new();
        for (word, v) in entries {
            if v.len() != dim {
                return Err(Error::Input(format!(
                    "vector for {word:?} has length {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Input(format!("non-finite component in vector for {word:?}")));
            }
            vectors.insert(word, v);
        }
        Ok(EmbeddingTable { dim, vectors })
    }

    /// Standard `word v1 ... vd` text format; an optional `count dim`
    /// header line is accepted.
    pub fn parse(text: &str) -> Result<Self> {
        let rows = parse_vector_lines(text, "embedding table")?;
        let dim = rows
            .first()
            .map(|r| r.1.len())
            .ok_or_else(|| Error::Input("embedding table is empty".into()))?;
        Self::new(dim, rows)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut words: Vec<&String> = self.vectors.keys().collect();
        words.sort();
        let mut out = String::new();
        for w in words {
            out.push_str(w);
            for x in &self.vectors[w] {
                out.push(' ');
                out.push_str(&format!("{x:?}"));
            }
            out.push('\n');
        }
        out
    }
}

impl EmbeddingProvider for EmbeddingTable {
    fn dim(&self) -> usize {
        self.dim
    }

    fn lookup(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }
}

/// Parses `key v1 ... vd` lines with a consistent `d`. A leading
/// `<count> <dim>` header line is skipped.
pub fn parse_vector_lines(text: &str, context: &str) -> Result<Vec<(String, Vec<f64>)>> {
    let mut rows: Vec<(String, Vec<f64>)> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(key) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if lineno == 0 && rest.len() == 1 && key.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        let values = rest
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::parse(format!("{context} line {}", lineno + 1), e))?;
        if values.is_empty() {
            return Err(Error::parse(format!("{context} line {}", lineno + 1), "missing vector"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(format!("{context} line {}", lineno + 1), "non-finite value"));
        }
        if let Some(first) = rows.first() {
            if first.1.len() != values.len() {
                return Err(Error::parse(
                    format!("{context} line {}", lineno + 1),
                    format!("dimension {} differs from {}", values.len(), first.1.len()),
                ));
            }
        }
        rows.push((key.to_string(), values));
    }
    Ok(rows)
}

pub fn format_vector_lines<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [f64])>) -> String {
    let mut out = String::new();
    for (key, v) in rows {
        out.push_str(key);
        for x in v {
            out.push(' ');
            out.push_str(&format!("{x:?}"));
        }
        out.push('\n');
    }
    out
}

/// Mean of in-vocabulary token vectors, or `None` if every token is OOV.
pub fn embed_tokens(tokens: &[String], provider: &dyn EmbeddingProvider) -> Option<Vec<f64>> {
    let mut sum = vec![0.0; provider.dim()];
    let mut count = 0usize;
    for t in tokens {
        if let Some(v) = provider.lookup(t) {
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            count += 1;
        }
    }
    if count == 0 {
        return None;
    }
    for s in &mut sum {
        *s /= count as f64;
    }
    Some(sum)
}

/// Like [`embed_tokens`] but yields the zero vector when nothing is in vocabulary.
pub fn embed_hashtag(tokens: &[String], provider: &dyn EmbeddingProvider) -> Vec<f64> {
    embed_tokens(tokens, provider).unwrap_or_else(|| vec![0.0; provider.dim()])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Cosine,
    #[default]
    Euclidean,
}

/// Exact brute-force nearest-neighbour index.
#[derive(Debug, Clone)]
pub struct KnnIndex<Id> {
    dim: usize,
    ids: Vec<Id>,
    data: Vec<f64>,
    norms: Vec<f64>,
}

impl<Id: Ord + Clone> KnnIndex<Id> {
    pub fn new(dim: usize) -> Self {
        KnnIndex {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
            norms: Vec::new(),
        }
    }

    pub fn from_entries(dim: usize, entries: impl IntoIterator<Item = (Id, Vec<f64>)>) -> Result<Self> {
        let mut index = Self::new(dim);
        for (id, v) in entries {
            index.insert(id, &v)?;
        }
        Ok(index)
    }

    pub fn insert(&mut self, id: Id, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::Input(format!(
                "vector of length {} inserted into index of dimension {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite vector component".into()));
        }
        self.ids.push(id);
        self.data.extend_from_slice(vector);
        self.norms.push(vector.iter().map(|x| x * x).sum::<f64>().sqrt());
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Ids of the `k` nearest vectors, closest first; ties broken by ascending id.
    pub fn search(&self, query: &[f64], k: usize, metric: Metric) -> Result<Vec<Id>> {
        if query.len() != self.dim {
            return Err(Error::Input(format!(
                "query of length {} for index of dimension {}",
                query.len(),
                self.dim
            )));
        }
        if k > self.len() {
            return Err(Error::Input(format!("k = {k} exceeds index size {}", self.len())));
        }
        if k == 0 {
            return Ok(Vec::new());
        }
        let qnorm = query.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut keyed: Vec<(f64, usize)> = (0..self.len())
            .map(|i| (distance_key(query, qnorm, self.row(i), self.norms[i], metric), i))
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| {
            a.0.total_cmp(&b.0).then_with(|| self.ids[a.1].cmp(&self.ids[b.1]))
        };
        if k < keyed.len() {
            keyed.select_nth_unstable_by(k - 1, cmp);
            keyed.truncate(k);
        }
        keyed.sort_by(cmp);
        Ok(keyed.into_iter().map(|(_, i)| self.ids[i].clone()).collect())
    }
}

/// Smaller is closer: squared Euclidean distance, or negated cosine similarity
/// (zero vectors have similarity 0 to everything).
fn distance_key(q: &[f64], qnorm: f64, v: &[f64], vnorm: f64, metric: Metric) -> f64 {
    match metric {
        Metric::Euclidean => q.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum(),
        Metric::Cosine => {
            if qnorm == 0.0 || vnorm == 0.0 {
                0.0
            } else {
                -q.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / (qnorm * vnorm)
            }
        }
    }
}

pub fn knn_retrieve<Id: Ord + Clone>(
    query: &[f64],
    index: &KnnIndex<Id>,
    k: usize,
    metric: Metric,
) -> Result<Vec<Id>> {
    index.search(query, k, metric)
}

/// Fixed-dimension hashtag feature for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HashtagFeature {
    pub source_count: usize,
    pub vector: Vec<f64>,
}

impl HashtagFeature {
    pub fn zeros(dim: usize) -> Self {
        HashtagFeature {
            source_count: 0,
            vector: vec![0.0; dim],
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let f: HashtagFeature = serde_json::from_str(s).map_err(|e| Error::parse("hashtag feature", e))?;
        if f.vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite hashtag feature".into()));
        }
        if f.source_count == 0 && f.vector.iter().any(|&v| v != 0.0) {
            return Err(Error::Input("hashtag feature with no sources must be zero".into()));
        }
        Ok(f)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string(self).expect("hashtag feature serializes") + "\n"
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_string(path, &self.to_json_string())
    }
}

/// How hashtags collected from several neighbours are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    /// Every occurrence counts once, so frequent hashtags weigh more.
    #[default]
    Occurrence,
    /// Hashtags are de-duplicated across neighbours before averaging.
    Distinct,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HashtagConfig {
    pub k: usize,
    pub metric: Metric,
    pub pooling: Pooling,
    /// Whether hashtag features are fed during training as well as at inference.
    pub use_in_training: bool,
}

impl Default for HashtagConfig {
    fn default() -> Self {
        HashtagConfig {
            k: 150,
            metric: Metric::Euclidean,
            pooling: Pooling::Occurrence,
            use_in_training: true,
        }
    }
}

pub const SWEEP_KS: [usize; 6] = [25, 50, 100, 150, 200, 250];

/// Segments and embeds hashtags, memoizing per distinct tag.
pub struct HashtagEncoder<'a> {
    dict: &'a SegDictionary,
    provider: &'a dyn EmbeddingProvider,
    cache: HashMap<Hashtag, Option<Vec<f64>>>,
}

impl<'a> HashtagEncoder<'a> {
    pub fn new(dict: &'a SegDictionary, provider: &'a dyn EmbeddingProvider) -> Self {
        HashtagEncoder {
            dict,
            provider,
            cache: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.provider.dim()
    }

    /// `None` when no token of the segmented hashtag is in vocabulary.
    pub fn encode(&mut self, tag: &Hashtag) -> Option<&[f64]> {
        if !self.cache.contains_key(tag) {
            let seg = word_break(tag, self.dict);
            let v = embed_tokens(&seg.tokens, self.provider);
            self.cache.insert(tag.clone(), v);
        }
        self.cache[tag].as_deref()
    }

    /// Mean over the encodable hashtags; hashtags with no in-vocabulary
    /// token are skipped and not counted.
    pub fn pool<'t>(&mut self, tags: impl IntoIterator<Item = &'t Hashtag>, pooling: Pooling) -> HashtagFeature {
        let mut seen = std::collections::HashSet::new();
        let mut sum = vec![0.0; self.dim()];
        let mut count = 0usize;
        for tag in tags {
            if pooling == Pooling::Distinct && !seen.insert(tag.clone()) {
                continue;
            }
            if let Some(v) = self.encode(tag) {
                for (s, x) in sum.iter_mut().zip(v) {
                    *s += x;
                }
                count += 1;
            }
        }
        if count > 0 {
            for s in &mut sum {
                *s /= count as f64;
            }
        }
        HashtagFeature {
            source_count: count,
            vector: sum,
        }
    }
}

/// Retrieves the `k` nearest indexed posts for an image feature and pools
/// their hashtags into one vector.
pub fn build_hashtag_feature<Id: Ord + Clone + Hash>(
    image_feature: &[f64],
    index: &KnnIndex<Id>,
    neighbor_tags: &HashMap<Id, Vec<Hashtag>>,
    encoder: &mut HashtagEncoder<'_>,
    cfg: &HashtagConfig,
) -> Result<HashtagFeature> {
    let neighbors = index.search(image_feature, cfg.k, cfg.metric)?;
    let tags = neighbors
        .iter()
        .filter_map(|id| neighbor_tags.get(id))
        .flat_map(|v| v.iter());
    Ok(encoder.pool(tags, cfg.pooling))
}

/// Parses `image_id<TAB>tag1,tag2,...` lines.
pub fn parse_hashtag_file(text: &str) -> Result<Vec<(String, Vec<Hashtag>)>> {
    let mut rows = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let ctx = || format!("hashtag file line {}", lineno + 1);
        let (id, tags) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(ctx(), "expected `image_id<TAB>hashtags`"))?;
        if id.is_empty() {
            return Err(Error::parse(ctx(), "empty image id"));
        }
        let tags = if tags.trim().is_empty() {
            Vec::new()
        } else {
            tags.split(',')
                .map(|t| Hashtag::new(t.trim()).map_err(|e| Error::parse(ctx(), e)))
                .collect::<Result<Vec<_>>>()?
        };
        rows.push((id.to_string(), tags));
    }
    Ok(rows)
}

pub fn format_hashtag_file(rows: &[(String, Vec<Hashtag>)]) -> String {
    let mut out = String::new();
    for (id, tags) in rows {
        out.push_str(id);
        out.push('\t');
        let joined: Vec<&str> = tags.iter().map(Hashtag::as_str).collect();
        out.push_str(&joined.join(","));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dict(words: &[(&str, f64)]) -> SegDictionary {
        SegDictionary::new(words.iter().map(|(w, s)| (w.to_string(), *s))).unwrap()
    }

    fn tag(s: &str) -> Hashtag {
        Hashtag::new(s).unwrap()
    }

    #[test]
    fn hashtag_normalization() {
        assert_eq!(tag("#SunSet").as_str(), "sunset");
        assert!(Hashtag::new("").is_err());
        assert!(Hashtag::new("#").is_err());
        assert!(Hashtag::new("two words").is_err());
    }

    #[test]
    fn word_break_examples() {
        let d = dict(&[("sunset", 3.0), ("sun", 1.0), ("likes", 2.0), ("for", 1.0), ("like", 2.0)]);
        assert_eq!(word_break(&tag("sunset"), &d).tokens, ["sunset"]);
        let s = word_break(&tag("likesforlikes"), &d);
        assert_eq!(s.tokens, ["likes", "for", "likes"]);
        assert!(s.complete);
        let s = word_break(&tag("xqzw"), &d);
        assert_eq!(s.tokens, ["xqzw"]);
        assert!(!s.complete);
        assert!(word_break_str("", &d).is_err());
    }

    #[test]
    fn dictionary_text_round_trip() {
        let d = dict(&[("sun", 1.5), ("set", 0.1), ("a", -2.0)]);
        assert_eq!(SegDictionary::parse(&d.to_text()).unwrap(), d);
    }

    #[test]
    fn fallback_passes_residues_through() {
        let d = dict(&[("sun", 1.0), ("set", 1.0)]);
        let s = word_break(&tag("sunxxset"), &d);
        assert_eq!(s.tokens, ["sun", "xx", "set"]);
        assert!(!s.complete);
        assert_eq!(s.tokens.concat(), "sunxxset");
    }

    #[test]
    fn tie_breaks_fewest_then_lexicographic() {
        let d = dict(&[("ab", 2.0), ("a", 1.0), ("b", 1.0), ("abc", 2.0), ("c", 0.0)]);
        // "ab" (2.0, 1 token) beats "a"+"b" (2.0, 2 tokens).
        assert_eq!(word_break(&tag("ab"), &d).tokens, ["ab"]);
        // "abc": [abc]=2, [ab,c]=2, [a,b,c]=2 -> single token wins.
        assert_eq!(word_break(&tag("abc"), &d).tokens, ["abc"]);
        let d = dict(&[("xa", 1.0), ("y", 1.0), ("x", 1.0), ("ay", 1.0)]);
        // [x, ay] vs [xa, y]: equal score and count, lexicographic picks [x, ay].
        assert_eq!(word_break(&tag("xay"), &d).tokens, ["x", "ay"]);
    }

    #[test]
    fn dictionary_parsing() {
        let d = SegDictionary::parse("# comment\nsunset 10\nsun\n\nSet 2.5\n").unwrap();
        assert_eq!(d.score("sunset"), Some(10.0));
        assert_eq!(d.score("sun"), Some(9.0));
        assert_eq!(d.score("set"), Some(2.5));
        assert_eq!(d.max_word_len(), 6);
        assert!(SegDictionary::parse("").is_err());
        assert!(SegDictionary::parse("a b c").is_err());
        assert!(SegDictionary::parse("a nan").is_err());
    }

    #[test]
    fn embedding_examples() {
        let t = EmbeddingTable::parse("2 3\na 1 2 3\nb 3 2 1\n").unwrap();
        assert_eq!(t.dim(), 3);
        let toks = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        assert_eq!(embed_hashtag(&toks(&["a"]), &t), vec![1.0, 2.0, 3.0]);
        assert_eq!(embed_hashtag(&toks(&["a", "b"]), &t), vec![2.0, 2.0, 2.0]);
        // Reference mean over the in-vocabulary subset only.
        let reference: Vec<f64> = t.lookup("a").unwrap().to_vec();
        assert_eq!(embed_hashtag(&toks(&["a", "oovtok"]), &t), reference);
        assert_eq!(embed_hashtag(&toks(&["zz"]), &t), vec![0.0; 3]);
        assert!(EmbeddingTable::parse("a 1 2\nb 1\n").is_err());
        assert!(EmbeddingTable::parse("a 1 x\n").is_err());
        let back = EmbeddingTable::parse(&t.to_text()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn knn_examples() {
        let idx = KnnIndex::from_entries(
            2,
            vec![(0u32, vec![0.0, 0.0]), (1, vec![1.0, 0.0]), (2, vec![3.0, 0.0])],
        )
        .unwrap();
        assert_eq!(knn_retrieve(&[3.0, 0.0], &idx, 1, Metric::Euclidean).unwrap(), [2]);
        assert_eq!(knn_retrieve(&[0.9, 0.0], &idx, 2, Metric::Euclidean).unwrap(), [1, 0]);
        assert_eq!(knn_retrieve(&[0.9, 0.0], &idx, 3, Metric::Euclidean).unwrap(), [1, 0, 2]);
        assert!(matches!(
            knn_retrieve(&[0.9, 0.0], &idx, 4, Metric::Euclidean),
            Err(Error::Input(_))
        ));
        // Cosine: (1,0) and (3,0) tie at similarity 1, ascending id wins; zero vector last.
        assert_eq!(knn_retrieve(&[2.0, 0.0], &idx, 3, Metric::Cosine).unwrap(), [1, 2, 0]);
    }

    fn encoder_fixture() -> (SegDictionary, EmbeddingTable) {
        let d = dict(&[("sun", 1.0), ("set", 1.0), ("sunset", 3.0), ("beach", 2.0), ("life", 1.0)]);
        let t = EmbeddingTable::new(
            2,
            vec![
                ("sunset".to_string(), vec![1.0, 0.0]),
                ("beach".to_string(), vec![0.0, 1.0]),
                ("life".to_string(), vec![1.0, 1.0]),
            ],
        )
        .unwrap();
        (d, t)
    }

    #[test]
    fn feature_examples() {
        let (d, t) = encoder_fixture();
        let idx = KnnIndex::from_entries(1, vec![(1u32, vec![0.0]), (2, vec![1.0])]).unwrap();
        let cfg = HashtagConfig { k: 2, ..Default::default() };

        let empty = HashMap::new();
        let mut enc = HashtagEncoder::new(&d, &t);
        let f = build_hashtag_feature(&[0.0], &idx, &empty, &mut enc, &cfg).unwrap();
        assert_eq!(f, HashtagFeature::zeros(2));

        let one: HashMap<u32, Vec<Hashtag>> = [(1, vec![tag("sunset")])].into();
        let f = build_hashtag_feature(&[0.0], &idx, &one, &mut enc, &cfg).unwrap();
        assert_eq!(f.vector, embed_hashtag(&["sunset".to_string()], &t));
        assert_eq!(f.source_count, 1);

        let two: HashMap<u32, Vec<Hashtag>> = [
            (1, vec![tag("sunset"), tag("beach")]),
            (2, vec![tag("beachlife")]),
        ]
        .into();
        let f = build_hashtag_feature(&[0.0], &idx, &two, &mut enc, &cfg).unwrap();
        // Flat reference: embed each hashtag of the union independently and average.
        let flat: Vec<Vec<f64>> = ["sunset", "beach", "beachlife"]
            .iter()
            .map(|h| embed_hashtag(&word_break(&tag(h), &d).tokens, &t))
            .collect();
        let mean: Vec<f64> = (0..2).map(|j| flat.iter().map(|v| v[j]).sum::<f64>() / 3.0).collect();
        assert_eq!(f.vector, mean);
        assert_eq!(f.source_count, 3);
    }

    #[test]
    fn distinct_pooling_deduplicates() {
        let (d, t) = encoder_fixture();
        let mut enc = HashtagEncoder::new(&d, &t);
        let tags = [tag("sunset"), tag("sunset"), tag("beach")];
        let occ = enc.pool(tags.iter(), Pooling::Occurrence);
        let dis = enc.pool(tags.iter(), Pooling::Distinct);
        assert_eq!(occ.vector, vec![2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(dis.vector, vec![0.5, 0.5]);
        assert_eq!(dis.source_count, 2);
    }

    #[test]
    fn hashtag_file_roundtrip() {
        let text = "img1\tsunset,#Beach\nimg2\t\n";
        let rows = parse_hashtag_file(text).unwrap();
        assert_eq!(rows[0].1, vec![tag("sunset"), tag("beach")]);
        assert!(rows[1].1.is_empty());
        assert_eq!(parse_hashtag_file(&format_hashtag_file(&rows)).unwrap(), rows);
        assert!(parse_hashtag_file("noseparator\n").is_err());
        assert!(parse_hashtag_file("a\tbad tag\n").is_err());
    }

    #[test]
    fn feature_file_validation() {
        let f = HashtagFeature {
            source_count: 2,
            vector: vec![0.1, -3.5e-7],
        };
        assert_eq!(HashtagFeature::from_json_str(&f.to_json_string()).unwrap(), f);
        assert!(HashtagFeature::from_json_str(r#"{"source_count":0,"vector":[1.0]}"#).is_err());
    }

    proptest! {
        #[test]
        fn segmentation_concatenates_to_input(s in "[a-e]{1,14}") {
            let d = dict(&[("ab", 1.0), ("cd", 2.0), ("a", 0.5), ("e", 0.1), ("bcd", 2.5)]);
            let seg = word_break_str(&s, &d).unwrap();
            prop_assert_eq!(seg.tokens.concat(), s);
        }

        #[test]
        fn embed_norm_bounded(words in proptest::collection::vec("[a-f]", 1..6)) {
            let t = EmbeddingTable::new(3, "abcdef".chars().enumerate().map(|(i, c)| {
                (c.to_string(), vec![i as f64 - 2.0, (i * i) as f64 * 0.3, 1.0])
            })).unwrap();
            let v = embed_hashtag(&words, &t);
            let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let max = words.iter().map(|w| norm(t.lookup(w).unwrap())).fold(0.0, f64::max);
            prop_assert!(norm(&v) <= max + 1e-12);
        }

        #[test]
        fn knn_invariant_to_index_order(
            pts in proptest::collection::vec(proptest::collection::vec(-5i32..5, 3), 1..40),
            seed in any::<u64>(),
            kfrac in 0.0f64..1.0,
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let entries: Vec<(usize, Vec<f64>)> = pts.iter().enumerate()
                .map(|(i, p)| (i, p.iter().map(|&x| x as f64).collect())).collect();
            let k = ((entries.len() as f64 * kfrac) as usize).max(1);
            let a = KnnIndex::from_entries(3, entries.clone()).unwrap();
            let mut shuffled = entries;
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = KnnIndex::from_entries(3, shuffled).unwrap();
            for metric in [Metric::Euclidean, Metric::Cosine] {
                prop_assert_eq!(a.search(&[1.0, 0.5, -1.0], k, metric).unwrap(),
                                b.search(&[1.0, 0.5, -1.0], k, metric).unwrap());
            }
        }

        #[test]
        fn feature_invariant_to_neighbor_order(perm_seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let (d, t) = encoder_fixture();
            let mut tags = [tag("sunset"), tag("beach"), tag("beachlife"), tag("sunsetlife"), tag("xyz")];
            let mut enc = HashtagEncoder::new(&d, &t);
            let a = enc.pool(tags.iter(), Pooling::Occurrence);
            tags.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let b = enc.pool(tags.iter(), Pooling::Occurrence);
            prop_assert_eq!(a.source_count, b.source_count);
            for (x, y) in a.vector.iter().zip(&b.vector) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}

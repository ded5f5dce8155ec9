//! Bag-of-words corpora: loading, validation, token-level held-out splits and
//! minibatch iteration.
//!
//! Three on-disk layouts are understood:
//!
//! * `uci-bow`: the UCI "docword" layout. Three header lines (N, V, NNZ)
//!   followed by `docid wordid count` lines, both ids 1-indexed.
//! * `triplet-tsv`: `doc_id<TAB>word_id<TAB>count`, both ids 0-indexed.
//! * `doc-lines`: one document per line as space-separated `word_id:count`
//!   pairs (0-indexed). An empty line is an empty document.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    terms: Vec<String>,
    index: std::collections::HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(terms: Vec<String>) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::InvalidArgument("vocabulary is empty".into()));
        }
        let mut index = std::collections::HashMap::with_capacity(terms.len());
        for (id, term) in terms.iter().enumerate() {
            if index.insert(term.clone(), id).is_some() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate vocabulary term '{term}'"
                )));
            }
        }
        Ok(Self { terms, index })
    }

    /// One term per line; the line number is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let terms: Vec<String> = text
            .lines()
            .map(|l| l.trim_end_matches('\r').to_string())
            .collect();
        let mut seen = std::collections::HashSet::new();
        for (line, term) in terms.iter().enumerate() {
            if term.is_empty() {
                return Err(Error::Parse {
                    path: path.into(),
                    line: line + 1,
                    message: "empty vocabulary term".into(),
                });
            }
            if !seen.insert(term.as_str()) {
                return Err(Error::Parse {
                    path: path.into(),
                    line: line + 1,
                    message: format!("duplicate vocabulary term '{term}'"),
                });
            }
        }
        Self::new(terms)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = self.terms.join("\n");
        out.push('\n');
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn id(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    pub fn term(&self, id: usize) -> Option<&str> {
        self.terms.get(id).map(String::as_str)
    }

    pub fn terms(&self) -> &[String] {
        &self.terms
    }

    pub fn contains(&self, term: &str) -> bool {
        self.index.contains_key(term)
    }
}

/// A document as sorted, unique `(word_id, count)` pairs with positive counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    entries: Vec<(usize, u32)>,
}

impl Document {
    /// Builds a document from arbitrary pairs: duplicates are merged, zero
    /// counts dropped and ids sorted.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (usize, u32)>) -> Self {
        let mut merged: BTreeMap<usize, u32> = BTreeMap::new();
        for (w, c) in pairs {
            if c > 0 {
                *merged.entry(w).or_insert(0) += c;
            }
        }
        Self {
            entries: merged.into_iter().collect(),
        }
    }

    pub fn entries(&self) -> &[(usize, u32)] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn count(&self, word: usize) -> u32 {
        self.entries
            .binary_search_by_key(&word, |&(w, _)| w)
            .map(|i| self.entries[i].1)
            .unwrap_or(0)
    }

    /// Dense count vector of length `vocab_size`.
    pub fn to_dense(&self, vocab_size: usize) -> Vec<f64> {
        let mut dense = vec![0.0; vocab_size];
        for &(w, c) in &self.entries {
            dense[w] = c as f64;
        }
        dense
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseCorpus {
    docs: Vec<Document>,
    vocab_size: usize,
}

impl SparseCorpus {
    /// Validates every document against `vocab_size`.
    pub fn new(docs: Vec<Document>, vocab_size: usize) -> Result<Self> {
        if vocab_size == 0 {
            return Err(Error::InvalidArgument("vocabulary size must be >= 1".into()));
        }
        for doc in &docs {
            if let Some(&(id, _)) = doc.entries.iter().find(|&&(w, _)| w >= vocab_size) {
                return Err(Error::WordIdOutOfRange { id, vocab_size });
            }
        }
        Ok(Self { docs, vocab_size })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn doc(&self, i: usize) -> &Document {
        &self.docs[i]
    }

    pub fn num_docs(&self) -> usize {
        self.docs.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn total_tokens(&self) -> u64 {
        self.docs.iter().map(Document::total).sum()
    }

    /// Corpus-wide word frequencies normalised to a distribution.
    pub fn unigram(&self) -> Vec<f64> {
        let mut freq = vec![0.0; self.vocab_size];
        for doc in &self.docs {
            for &(w, c) in doc.entries() {
                freq[w] += c as f64;
            }
        }
        let total: f64 = freq.iter().sum();
        if total > 0.0 {
            freq.iter_mut().for_each(|f| *f /= total);
        }
        freq
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusFormat {
    UciBow,
    TripletTsv,
    DocLines,
}

impl FromStr for CorpusFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uci-bow" | "uci" => Ok(CorpusFormat::UciBow),
            "triplet-tsv" | "tsv" => Ok(CorpusFormat::TripletTsv),
            "doc-lines" => Ok(CorpusFormat::DocLines),
            other => Err(Error::InvalidArgument(format!(
                "unknown corpus format '{other}'"
            ))),
        }
    }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.into(),
        line,
        message: message.into(),
    }
}

fn parse_field<T: FromStr>(path: &Path, line: usize, field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid {what} '{field}'")))
}

fn checked_count(path: &Path, line: usize, count: i64, word_id: usize, doc: usize) -> Result<u32> {
    if count <= 0 {
        return Err(Error::NonPositiveCount {
            doc,
            word_id,
            count,
        });
    }
    u32::try_from(count).map_err(|_| parse_err(path, line, format!("count {count} too large")))
}

/// Loads a corpus over a vocabulary of `vocab_size` terms.
pub fn load_corpus(path: impl AsRef<Path>, format: CorpusFormat, vocab_size: usize) -> Result<SparseCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let docs = match format {
        CorpusFormat::UciBow => parse_uci(path, &text, vocab_size)?,
        CorpusFormat::TripletTsv => parse_triplets(path, &text, vocab_size)?,
        CorpusFormat::DocLines => parse_doc_lines(path, &text, vocab_size)?,
    };
    SparseCorpus::new(docs, vocab_size)
}

fn parse_uci(path: &Path, text: &str, vocab_size: usize) -> Result<Vec<Document>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let mut header = [0usize; 3];
    for (slot, name) in header.iter_mut().zip(["N", "V", "NNZ"]) {
        let (i, l) = lines
            .next()
            .ok_or_else(|| parse_err(path, 0, format!("missing header field {name}")))?;
        *slot = parse_field(path, i + 1, l, name)?;
    }
    let [n_docs, header_v, nnz] = header;
    if header_v != vocab_size {
        return Err(parse_err(
            path,
            2,
            format!("header vocabulary size {header_v} does not match vocabulary ({vocab_size})"),
        ));
    }
    let mut pairs: Vec<Vec<(usize, u32)>> = vec![Vec::new(); n_docs];
    let mut seen = 0usize;
    for (i, l) in lines {
        let line = i + 1;
        let fields: Vec<&str> = l.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(parse_err(path, line, "expected 'docid wordid count'"));
        }
        let doc: usize = parse_field(path, line, fields[0], "document id")?;
        let word: usize = parse_field(path, line, fields[1], "word id")?;
        let count: i64 = parse_field(path, line, fields[2], "count")?;
        if doc == 0 || doc > n_docs {
            return Err(parse_err(path, line, format!("document id {doc} outside 1..={n_docs}")));
        }
        if word == 0 {
            return Err(parse_err(path, line, "word ids are 1-indexed"));
        }
        if word > vocab_size {
            return Err(Error::WordIdOutOfRange {
                id: word - 1,
                vocab_size,
            });
        }
        let count = checked_count(path, line, count, word - 1, doc - 1)?;
        pairs[doc - 1].push((word - 1, count));
        seen += 1;
    }
    if seen != nnz {
        log::warn!("{}: header declares {nnz} entries, found {seen}", path.display());
    }
    Ok(pairs.into_iter().map(Document::from_pairs).collect())
}

fn parse_triplets(path: &Path, text: &str, vocab_size: usize) -> Result<Vec<Document>> {
    let mut pairs: Vec<Vec<(usize, u32)>> = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        if l.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != 3 {
            return Err(parse_err(path, line, "expected 'doc_id<TAB>word_id<TAB>count'"));
        }
        let doc: usize = parse_field(path, line, fields[0], "document id")?;
        let word: usize = parse_field(path, line, fields[1], "word id")?;
        let count: i64 = parse_field(path, line, fields[2], "count")?;
        if word >= vocab_size {
            return Err(Error::WordIdOutOfRange { id: word, vocab_size });
        }
        let count = checked_count(path, line, count, word, doc)?;
        if pairs.len() <= doc {
            pairs.resize(doc + 1, Vec::new());
        }
        pairs[doc].push((word, count));
    }
    Ok(pairs.into_iter().map(Document::from_pairs).collect())
}

fn parse_doc_lines(path: &Path, text: &str, vocab_size: usize) -> Result<Vec<Document>> {
    let mut docs = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let line = i + 1;
        let mut pairs = Vec::new();
        for tok in l.split_whitespace() {
            let (w, c) = tok
                .split_once(':')
                .ok_or_else(|| parse_err(path, line, format!("expected 'word_id:count', got '{tok}'")))?;
            let word: usize = parse_field(path, line, w, "word id")?;
            let count: i64 = parse_field(path, line, c, "count")?;
            if word >= vocab_size {
                return Err(Error::WordIdOutOfRange { id: word, vocab_size });
            }
            pairs.push((word, checked_count(path, line, count, word, docs.len())?));
        }
        docs.push(Document::from_pairs(pairs));
    }
    Ok(docs)
}

/// Canonical text form of a corpus in the given layout.
pub fn format_corpus(corpus: &SparseCorpus, format: CorpusFormat) -> String {
    let mut out = String::new();
    match format {
        CorpusFormat::UciBow => {
            let nnz: usize = corpus.docs.iter().map(|d| d.entries.len()).sum();
            let _ = writeln!(out, "{}\n{}\n{}", corpus.num_docs(), corpus.vocab_size, nnz);
            for (d, doc) in corpus.docs.iter().enumerate() {
                for &(w, c) in &doc.entries {
                    let _ = writeln!(out, "{} {} {}", d + 1, w + 1, c);
                }
            }
        }
        CorpusFormat::TripletTsv => {
            for (d, doc) in corpus.docs.iter().enumerate() {
                for &(w, c) in &doc.entries {
                    let _ = writeln!(out, "{d}\t{w}\t{c}");
                }
            }
        }
        CorpusFormat::DocLines => {
            for doc in &corpus.docs {
                let line: Vec<String> = doc.entries.iter().map(|(w, c)| format!("{w}:{c}")).collect();
                let _ = writeln!(out, "{}", line.join(" "));
            }
        }
    }
    out
}

pub fn write_corpus(corpus: &SparseCorpus, path: impl AsRef<Path>, format: CorpusFormat) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_corpus(corpus, format)).map_err(|e| Error::io(path, e))
}

/// Training (`X`) and held-out (`Y`) halves of a corpus, split token by token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeldoutSplit {
    pub train: SparseCorpus,
    pub test: SparseCorpus,
    pub seed: u64,
}

/// Assigns every token independently to the training side with probability
/// `train_fraction`.
pub fn split_tokens(corpus: &SparseCorpus, train_fraction: f64, seed: u64) -> Result<HeldoutSplit> {
    if corpus.num_docs() == 0 {
        return Err(Error::InvalidArgument("cannot split an empty corpus".into()));
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside (0, 1)"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(corpus.num_docs());
    let mut test = Vec::with_capacity(corpus.num_docs());
    for doc in corpus.docs() {
        let mut tr = Vec::new();
        let mut te = Vec::new();
        for &(w, c) in doc.entries() {
            let kept = (0..c).filter(|_| rng.random::<f64>() < train_fraction).count() as u32;
            tr.push((w, kept));
            te.push((w, c - kept));
        }
        train.push(Document::from_pairs(tr));
        test.push(Document::from_pairs(te));
    }
    Ok(HeldoutSplit {
        train: SparseCorpus::new(train, corpus.vocab_size)?,
        test: SparseCorpus::new(test, corpus.vocab_size)?,
        seed,
    })
}

/// Partitions `0..num_docs` into batches of at most `batch_size`.
pub fn minibatches(num_docs: usize, batch_size: usize, seed: u64, shuffle: bool) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..num_docs).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn parses_doc_lines() {
        let f = write_tmp("0:2 3:1\n");
        let c = load_corpus(f.path(), CorpusFormat::DocLines, 4).unwrap();
        assert_eq!(c.doc(0).entries(), &[(0, 2), (3, 1)]);
    }

    #[test]
    fn empty_document_is_kept() {
        let f = write_tmp("0:2\n\n1:1\n");
        let c = load_corpus(f.path(), CorpusFormat::DocLines, 4).unwrap();
        assert_eq!(c.num_docs(), 3);
        assert!(c.doc(1).is_empty());
    }

    #[test]
    fn rejects_out_of_range_id() {
        let f = write_tmp("7:1\n");
        let err = load_corpus(f.path(), CorpusFormat::DocLines, 4).unwrap_err();
        assert!(err.to_string().contains("word id out of range"), "{err}");
        let f = write_tmp("0\t7\t1\n");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::TripletTsv, 4),
            Err(Error::WordIdOutOfRange { id: 7, .. })
        ));
    }

    #[test]
    fn rejects_nonpositive_count() {
        let f = write_tmp("0\t1\t0\n");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::TripletTsv, 4),
            Err(Error::NonPositiveCount { .. })
        ));
        let f = write_tmp("3\n4\n1\n1 2 -3\n");
        assert!(matches!(
            load_corpus(f.path(), CorpusFormat::UciBow, 4),
            Err(Error::NonPositiveCount { count: -3, .. })
        ));
    }

    #[test]
    fn parse_error_carries_line_number() {
        let f = write_tmp("0\t1\t2\n0\tx\t2\n");
        match load_corpus(f.path(), CorpusFormat::TripletTsv, 4) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn uci_is_one_indexed_and_keeps_trailing_empty_docs() {
        let f = write_tmp("3\n4\n3\n1 1 2\n1 4 1\n2 2 5\n");
        let c = load_corpus(f.path(), CorpusFormat::UciBow, 4).unwrap();
        assert_eq!(c.num_docs(), 3);
        assert_eq!(c.doc(0).entries(), &[(0, 2), (3, 1)]);
        assert_eq!(c.doc(1).entries(), &[(1, 5)]);
        assert!(c.doc(2).is_empty());
        assert_eq!(format_corpus(&c, CorpusFormat::UciBow), "3\n4\n3\n1 1 2\n1 4 1\n2 2 5\n");
    }

    #[test]
    fn uci_header_must_match_vocab() {
        let f = write_tmp("1\n5\n1\n1 1 2\n");
        assert!(load_corpus(f.path(), CorpusFormat::UciBow, 4).is_err());
    }

    #[test]
    fn duplicate_entries_are_merged() {
        let d = Document::from_pairs([(3, 1), (0, 2), (3, 4)]);
        assert_eq!(d.entries(), &[(0, 2), (3, 5)]);
    }

    #[test]
    fn vocabulary_rejects_duplicates() {
        assert!(Vocabulary::new(vec!["a".into(), "a".into()]).is_err());
        let f = write_tmp("a\nb\na\n");
        assert!(matches!(Vocabulary::load(f.path()), Err(Error::Parse { line: 3, .. })));
        let v = Vocabulary::new(vec!["x".into(), "y".into()]).unwrap();
        assert_eq!(v.id("y"), Some(1));
        assert_eq!(v.term(0), Some("x"));
    }

    #[test]
    fn split_conserves_tokens() {
        let c = SparseCorpus::new(vec![Document::from_pairs([(0, 10)])], 1).unwrap();
        for seed in 0..20 {
            let s = split_tokens(&c, 0.8, seed).unwrap();
            assert_eq!(s.train.doc(0).count(0) + s.test.doc(0).count(0), 10);
        }
    }

    #[test]
    fn split_near_one_leaves_test_empty() {
        let c = SparseCorpus::new(vec![Document::from_pairs([(0, 50), (1, 20)])], 2).unwrap();
        let s = split_tokens(&c, 1.0 - 1e-12, 3).unwrap();
        assert_eq!(s.test.total_tokens(), 0);
    }

    #[test]
    fn split_concentrates_around_fraction() {
        // Binomial(100000, 0.8): sd = sqrt(100000 * 0.16) ~= 126.5.
        let c = SparseCorpus::new(vec![Document::from_pairs([(0, 100_000)])], 1).unwrap();
        let s = split_tokens(&c, 0.8, 17).unwrap();
        let kept = s.train.doc(0).count(0) as f64;
        assert!((kept - 80_000.0).abs() <= 3.0 * 126.5, "kept {kept}");
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let c = SparseCorpus::new(vec![Document::from_pairs([(0, 1)])], 1).unwrap();
        assert!(split_tokens(&c, 1.0, 0).is_err());
        assert!(split_tokens(&c, 0.0, 0).is_err());
        let empty = SparseCorpus::new(vec![], 1).unwrap();
        assert!(split_tokens(&empty, 0.5, 0).is_err());
    }

    #[test]
    fn batch_partition() {
        let b = minibatches(5, 2, 0, false).unwrap();
        assert_eq!(b, vec![vec![0, 1], vec![2, 3], vec![4]]);
        assert!(minibatches(5, 0, 0, false).is_err());
    }

    #[test]
    fn shuffled_batches_are_deterministic_and_cover() {
        let a = minibatches(103, 10, 9, true).unwrap();
        let b = minibatches(103, 10, 9, true).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
        assert_ne!(a, minibatches(103, 10, 10, true).unwrap());
    }
}

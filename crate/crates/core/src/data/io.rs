use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{featurize_molecule, stable_seed, AtomFeatureTable, InstancePair, MoleculeGraph, TokenSequence};
use crate::error::{Error, Result};

pub const DEFAULT_VOCAB_SIZE: usize = 4096;
pub const DEFAULT_MAX_LEN: usize = 256;
pub const DEFAULT_ATOM_DIM: usize = 300;

/// Whitespace tokenizer with a fixed vocabulary and hashed buckets for
/// everything else. Words are lowercased; known words take ids
/// `0..vocab.len()`, unknown ones hash into `vocab.len()..vocab_size`.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: HashMap<String, u32>,
    vocab_size: usize,
    max_len: usize,
}

impl Tokenizer {
    pub fn hashed(vocab_size: usize, max_len: usize) -> Self {
        Self::with_vocab(Vec::<String>::new(), vocab_size, max_len)
    }

    pub fn with_vocab(words: impl IntoIterator<Item = impl Into<String>>, vocab_size: usize, max_len: usize) -> Self {
        let vocab: HashMap<String, u32> = words
            .into_iter()
            .enumerate()
            .map(|(i, w)| (w.into().to_lowercase(), i as u32))
            .collect();
        assert!(vocab.len() < vocab_size, "vocab_size must leave room for hash buckets");
        assert!(max_len > 0);
        Self {
            vocab,
            vocab_size,
            max_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSequence> {
        let buckets = (self.vocab_size - self.vocab.len()) as u64;
        let tokens = text
            .split_whitespace()
            .take(self.max_len)
            .map(|w| {
                let w = w.to_lowercase();
                match self.vocab.get(&w) {
                    Some(&id) => id,
                    None => self.vocab.len() as u32 + (stable_seed(&w) % buckets) as u32,
                }
            })
            .collect();
        TokenSequence::new(tokens)
    }
}

impl Default for Tokenizer {
    fn default() -> Self {
        Self::hashed(DEFAULT_VOCAB_SIZE, DEFAULT_MAX_LEN)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Record {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text_tokens: Option<Vec<u32>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atoms: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    atom_features: Option<Vec<Vec<f64>>>,
    edges: Vec<[usize; 2]>,
}

/// Parses dataset files. Holds the tokenizer for raw `text` fields and the
/// atom table for `atoms` fields.
#[derive(Debug, Clone)]
pub struct DatasetLoader {
    pub tokenizer: Tokenizer,
    pub atom_table: AtomFeatureTable,
}

impl Default for DatasetLoader {
    fn default() -> Self {
        Self {
            tokenizer: Tokenizer::default(),
            atom_table: AtomFeatureTable::new(DEFAULT_ATOM_DIM),
        }
    }
}

impl DatasetLoader {
    pub fn load(&self, path: impl AsRef<Path>) -> Result<Vec<InstancePair>> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let shown = path.display().to_string();
        let mut out = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line_no = i + 1;
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: shown.clone(),
                line: line_no,
                message,
            };
            let record: Record = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
            let pair = self.to_pair(record).map_err(|e| parse_err(e.to_string()))?;
            if !seen.insert(pair.id.clone()) {
                return Err(Error::Validation(format!(
                    "{shown}: line {line_no}: duplicate id `{}`",
                    pair.id
                )));
            }
            out.push(pair);
        }
        Ok(out)
    }

    fn to_pair(&self, record: Record) -> Result<InstancePair> {
        let text = match (record.text_tokens, record.text) {
            (Some(tokens), _) => TokenSequence::new(tokens)?,
            (None, Some(text)) => self.tokenizer.tokenize(&text)?,
            (None, None) => {
                return Err(Error::Validation("missing `text_tokens` or `text`".into()))
            }
        };
        let edges: Vec<(usize, usize)> = record.edges.iter().map(|e| (e[0], e[1])).collect();
        let molecule = match (record.atom_features, record.atoms) {
            (Some(rows), _) => {
                let k = rows.len();
                let d = rows.first().map_or(0, Vec::len);
                if rows.iter().any(|r| r.len() != d) {
                    return Err(Error::Shape("ragged `atom_features`".into()));
                }
                let flat: Vec<f64> = rows.into_iter().flatten().collect();
                let features = Array2::from_shape_vec((k, d), flat)
                    .map_err(|e| Error::Shape(e.to_string()))?;
                MoleculeGraph::new(features, edges)?
            }
            (None, Some(atoms)) => featurize_molecule(&atoms, edges, &self.atom_table)?,
            (None, None) => {
                return Err(Error::Validation("missing `atom_features` or `atoms`".into()))
            }
        };
        Ok(InstancePair {
            id: record.id,
            text,
            molecule,
        })
    }
}

/// Loads a JSONL dataset with the default hashed tokenizer and an empty
/// 300-dimensional atom table.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<InstancePair>> {
    DatasetLoader::default().load(path)
}

/// Writes the canonical form: `text_tokens` and `atom_features`.
pub fn save_dataset(path: impl AsRef<Path>, pairs: &[InstancePair]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in pairs {
        let record = Record {
            id: p.id.clone(),
            text_tokens: Some(p.text.tokens().to_vec()),
            text: None,
            atoms: None,
            atom_features: Some(
                p.molecule
                    .atom_features()
                    .rows()
                    .into_iter()
                    .map(|r| r.to_vec())
                    .collect(),
            ),
            edges: p.molecule.edges().iter().map(|&(i, j)| [i, j]).collect(),
        };
        serde_json::to_writer(&mut w, &record)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize)]
struct TableRow {
    key: String,
    vector: Vec<f64>,
}

/// Reads a `{key, vector}` JSONL table. The dimension is taken from the first row.
pub fn load_atom_table(path: impl AsRef<Path>) -> Result<AtomFeatureTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut table: Option<AtomFeatureTable> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message,
        };
        let row: TableRow = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if row.vector.is_empty() {
            return Err(parse_err("empty vector".into()));
        }
        let t = table.get_or_insert_with(|| AtomFeatureTable::new(row.vector.len()));
        t.insert(row.key, row.vector).map_err(|e| parse_err(e.to_string()))?;
    }
    table.ok_or_else(|| Error::Validation(format!("{}: empty atom table", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        let mut f = File::create(&p).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        p
    }

    #[test]
    fn empty_file_gives_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "e.jsonl", "");
        assert!(load_dataset(&p).unwrap().is_empty());
    }

    #[test]
    fn two_lines_parse_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let body = concat!(
            r#"{"id":"a","text_tokens":[1,2],"atom_features":[[0.5,1.0],[2.0,3.0]],"edges":[[0,1]]}"#,
            "\n",
            r#"{"id":"b","text":"Benzene ring","atoms":["C","C","C"],"edges":[[0,1],[1,2]]}"#,
            "\n"
        );
        let p = write(&dir, "d.jsonl", body);
        let d = load_dataset(&p).unwrap();
        assert_eq!(d.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert_eq!(d[0].text.tokens(), &[1, 2]);
        assert_eq!(d[1].text.len(), 2);
        assert_eq!(d[1].molecule.atom_features().dim(), (3, DEFAULT_ATOM_DIM));
    }

    #[test]
    fn missing_edges_names_line_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "bad.jsonl", r#"{"id":"a","text_tokens":[1],"atom_features":[[1.0]]}"#);
        let err = load_dataset(&p).unwrap_err();
        match &err {
            Error::Parse { line, message, .. } => {
                assert_eq!(*line, 1);
                assert!(message.contains("edges"), "{message}");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"id":"a","text_tokens":[1],"atom_features":[[1.0]],"edges":[]}"#;
        let p = write(&dir, "dup.jsonl", &format!("{line}\n{line}\n"));
        assert!(matches!(load_dataset(&p), Err(Error::Validation(_))));
    }

    #[test]
    fn atom_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "t.jsonl",
            "{\"key\":\"C\",\"vector\":[1.0,0.0]}\n{\"key\":\"O\",\"vector\":[0.0,1.0]}\n",
        );
        let t = load_atom_table(&p).unwrap();
        assert_eq!(t.dim(), 2);
        assert_eq!(t.lookup("O").to_vec(), vec![0.0, 1.0]);
    }

    #[test]
    fn tokenizer_prefers_vocab_then_hashes() {
        let t = Tokenizer::with_vocab(["acid", "ring"], 10, 8);
        let s = t.tokenize("Acid ring weird").unwrap();
        assert_eq!(&s.tokens()[..2], &[0, 1]);
        assert!((2..10).contains(&s.tokens()[2]));
        assert!(t.tokenize("   ").is_err());
    }
}

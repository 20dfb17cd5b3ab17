use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;

use super::DataError;

/// Token → vector lookup read from a GloVe-style text file.
#[derive(Clone, Debug, PartialEq)]
pub struct WordVectorTable {
    dimension: usize,
    order: Vec<String>,
    entries: HashMap<String, Vec<f64>>,
}

impl WordVectorTable {
    pub fn new(dimension: usize) -> Self {
        assert!(dimension > 0, "word vector dimension must be positive");
        Self {
            dimension,
            order: Vec::new(),
            entries: HashMap::new(),
        }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Adds `token` unless already present (first occurrence wins).
    /// Returns whether the entry was inserted.
    pub fn insert(&mut self, token: impl Into<String>, vector: Vec<f64>) -> bool {
        assert_eq!(
            vector.len(),
            self.dimension,
            "vector length must equal table dimension"
        );
        let token = token.into();
        if self.entries.contains_key(&token) {
            return false;
        }
        self.order.push(token.clone());
        self.entries.insert(token, vector);
        true
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.entries.get(token).map(Vec::as_slice)
    }

    /// Tokens in insertion order.
    pub fn tokens(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }
}

/// Reads `token x1 … xd` lines. The first line fixes `d`.
pub fn load_word_vectors(path: impl AsRef<Path>) -> Result<WordVectorTable, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut table: Option<WordVectorTable> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| DataError::io(path, e))?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values = fields
            .map(|f| f.parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DataError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(DataError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                message: "non-finite vector entry".into(),
            });
        }
        let t = match table.as_mut() {
            Some(t) => t,
            None => {
                if values.is_empty() {
                    return Err(DataError::Dimension {
                        line: i + 1,
                        expected: 1,
                        found: 0,
                    });
                }
                table.insert(WordVectorTable::new(values.len()))
            }
        };
        if values.len() != t.dimension {
            return Err(DataError::Dimension {
                line: i + 1,
                expected: t.dimension,
                found: values.len(),
            });
        }
        t.insert(token, values);
    }
    table.ok_or_else(|| DataError::Malformed {
        path: path.to_path_buf(),
        line: 0,
        message: "file contains no word vectors".into(),
    })
}

pub fn save_word_vectors(path: impl AsRef<Path>, table: &WordVectorTable) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for token in &table.order {
        write!(w, "{token}").map_err(|e| DataError::io(path, e))?;
        for v in &table.entries[token] {
            write!(w, " {v}").map_err(|e| DataError::io(path, e))?;
        }
        writeln!(w).map_err(|e| DataError::io(path, e))?;
    }
    w.flush().map_err(|e| DataError::io(path, e))
}

/// A tokenized query with one embedding row per token.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryTokens {
    pub tokens: Vec<String>,
    pub embeddings: Array2<f64>,
}

impl QueryTokens {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Lowercases, splits on Unicode whitespace and strips surrounding ASCII
/// punctuation from each piece; pieces that become empty are dropped.
pub fn tokenize(query: &str) -> Vec<String> {
    query
        .to_lowercase()
        .split_whitespace()
        .map(|t| {
            t.trim_matches(|c: char| c.is_ascii_punctuation())
                .to_string()
        })
        .filter(|t| !t.is_empty())
        .collect()
}

/// Out-of-vocabulary tokens embed as the zero vector.
pub fn tokenize_and_embed(query: &str, table: &WordVectorTable) -> Result<QueryTokens, DataError> {
    let tokens = tokenize(query);
    if tokens.is_empty() {
        return Err(DataError::EmptyQuery(query.to_string()));
    }
    let d = table.dimension();
    let mut embeddings = Array2::zeros((tokens.len(), d));
    for (mut row, t) in embeddings.rows_mut().into_iter().zip(&tokens) {
        if let Some(v) = table.get(t) {
            row.iter_mut().zip(v).for_each(|(r, x)| *r = *x);
        }
    }
    Ok(QueryTokens { tokens, embeddings })
}

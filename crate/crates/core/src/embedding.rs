//! Concept vectors. Either a trivial one-hot vocabulary or vectors loaded
//! from a text embedding file: a `count dim` header line, then one line per
//! word with `dim` space-separated reals. A multi-word concept name (split
//! on spaces and underscores) maps to the mean of its token vectors.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptVocabulary {
    names: Vec<String>,
    vectors: Vec<Vec<f64>>,
    dim: usize,
}

impl ConceptVocabulary {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn vector(&self, concept: usize) -> &[f64] {
        &self.vectors[concept]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

fn validate_names(names: &[String]) -> Result<()> {
    if names.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 concepts, got {}",
            names.len()
        )));
    }
    for (i, name) in names.iter().enumerate() {
        if name.is_empty() {
            return Err(Error::InvalidArgument(format!("concept {i} has an empty name")));
        }
        if names[..i].contains(name) {
            return Err(Error::InvalidArgument(format!("duplicate concept `{name}`")));
        }
    }
    Ok(())
}

/// Identity vocabulary: concept i gets the i-th standard basis vector.
pub fn one_hot_vocabulary(names: &[String]) -> Result<ConceptVocabulary> {
    validate_names(names)?;
    let n = names.len();
    let vectors = (0..n)
        .map(|i| {
            let mut v = vec![0.0; n];
            v[i] = 1.0;
            v
        })
        .collect();
    Ok(ConceptVocabulary {
        names: names.to_vec(),
        vectors,
        dim: n,
    })
}

/// Loads vectors for `names` from an embedding text file. Every token of
/// every concept name must be present; missing tokens are reported together.
pub fn load_embeddings(path: &Path, names: &[String]) -> Result<ConceptVocabulary> {
    validate_names(names)?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty embedding file"))?;
    let mut parts = header.split_whitespace();
    let count: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path, format!("bad header `{header}`: expected `count dim`")))?;
    let dim: usize = parts
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| Error::format(path, format!("bad header `{header}`: expected `count dim`")))?;
    if parts.next().is_some() {
        return Err(Error::format(path, format!("bad header `{header}`: trailing tokens")));
    }
    if dim == 0 {
        return Err(Error::format(path, "embedding dimension must be positive"));
    }

    let mut words: HashMap<String, Vec<f64>> = HashMap::with_capacity(count);
    let mut parsed = 0usize;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = line.split_whitespace();
        let word = tokens
            .next()
            .expect("non-empty line has a first token")
            .to_owned();
        let values: Vec<f64> = tokens
            .map(|t| {
                t.parse::<f64>().map_err(|_| {
                    Error::format(path, format!("line {}: bad number `{t}`", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::format(
                path,
                format!(
                    "line {}: word `{word}` has {} values, header says {dim}",
                    lineno + 1,
                    values.len()
                ),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::format(
                path,
                format!("line {}: word `{word}` has a non-finite value", lineno + 1),
            ));
        }
        if words.insert(word.clone(), values).is_some() {
            return Err(Error::format(
                path,
                format!("line {}: duplicate word `{word}`", lineno + 1),
            ));
        }
        parsed += 1;
    }
    if parsed != count {
        return Err(Error::format(
            path,
            format!("header says {count} words, file has {parsed}"),
        ));
    }

    let mut missing = Vec::new();
    let mut vectors = Vec::with_capacity(names.len());
    for name in names {
        let tokens: Vec<&str> = name
            .split(|c: char| c == ' ' || c == '_')
            .filter(|t| !t.is_empty())
            .collect();
        if tokens.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "concept `{name}` has no tokens"
            )));
        }
        let mut sum = vec![0.0; dim];
        let mut found = true;
        for token in &tokens {
            match words.get(*token) {
                Some(v) => {
                    for (s, x) in sum.iter_mut().zip(v) {
                        *s += x;
                    }
                }
                None => {
                    missing.push(format!("`{token}` (for concept `{name}`)"));
                    found = false;
                }
            }
        }
        if found {
            for s in &mut sum {
                *s /= tokens.len() as f64;
            }
        }
        vectors.push(sum);
    }
    if !missing.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "embedding file {} is missing {}",
            path.display(),
            missing.join(", ")
        )));
    }
    Ok(ConceptVocabulary {
        names: names.to_vec(),
        vectors,
        dim,
    })
}

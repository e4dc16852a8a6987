use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Pretrain,
    Downstream,
}

impl Side {
    pub fn index(self) -> u64 {
        match self {
            Side::Pretrain => 0,
            Side::Downstream => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Targets {
    Classes(Vec<usize>),
    Real(Vec<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes(c) => c.len(),
            Targets::Real(r) => r.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TargetRef<'a> {
    Class(usize),
    Real(f64),
    /// A full conditional distribution over classes.
    Soft(&'a [f64]),
}

/// Inputs stored row-major in one flat buffer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    input_dim: usize,
    inputs: Vec<f64>,
    pub targets: Targets,
    pub source_tag: Side,
    /// Global class id of each local label, for meta-split tasks.
    pub class_ids: Option<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(input_dim: usize, inputs: Vec<f64>, targets: Targets, source_tag: Side) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::invalid("input_dim must be positive"));
        }
        if inputs.len() != input_dim * targets.len() {
            return Err(Error::invalid(format!(
                "{} input values do not form {} rows of dimension {}",
                inputs.len(),
                targets.len(),
                input_dim
            )));
        }
        Ok(Self {
            input_dim,
            inputs,
            targets,
            source_tag,
            class_ids: None,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], targets: Targets, source_tag: Side) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(1);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged input rows"));
        }
        Self::new(dim, rows.concat(), targets, source_tag)
    }

    pub fn with_class_ids(mut self, ids: Vec<usize>) -> Self {
        self.class_ids = Some(ids);
        self
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.input_dim..(i + 1) * self.input_dim]
    }

    pub fn target(&self, i: usize) -> TargetRef<'_> {
        match &self.targets {
            Targets::Classes(c) => TargetRef::Class(c[i]),
            Targets::Real(r) => TargetRef::Real(r[i]),
        }
    }

    pub fn classes(&self) -> Option<&[usize]> {
        match &self.targets {
            Targets::Classes(c) => Some(c),
            Targets::Real(_) => None,
        }
    }

    /// New dataset made of the rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut inputs = Vec::with_capacity(indices.len() * self.input_dim);
        for &i in indices {
            inputs.extend_from_slice(self.x(i));
        }
        let targets = match &self.targets {
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
            Targets::Real(r) => Targets::Real(indices.iter().map(|&i| r[i]).collect()),
        };
        Self {
            input_dim: self.input_dim,
            inputs,
            targets,
            source_tag: self.source_tag,
            class_ids: self.class_ids.clone(),
        }
    }

    /// CSV with header `x_0,..,x_{d-1},y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.input_dim).map(|j| format!("x_{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",y\n");
        for i in 0..self.len() {
            for v in self.x(i) {
                out.push_str(&format!("{v},"));
            }
            match self.target(i) {
                TargetRef::Class(c) => out.push_str(&format!("{c}\n")),
                TargetRef::Real(y) => out.push_str(&format!("{y}\n")),
                TargetRef::Soft(_) => unreachable!("datasets hold hard targets"),
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_mismatched_lengths() {
        assert!(LabeledDataset::new(2, vec![1.0, 2.0, 3.0], Targets::Real(vec![0.0, 1.0]), Side::Pretrain).is_err());
    }

    #[test]
    fn csv_header_and_rows() {
        let d = LabeledDataset::new(2, vec![1.0, 2.0, 3.0, 4.5], Targets::Classes(vec![0, 1]), Side::Pretrain).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        d.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text, "x_0,x_1,y\n1,2,0\n3,4.5,1\n");
    }
}

//! Fixed-dimension embedding tables and their word2vec-style text format.
//!
//! ```text
//! <count> <dim>
//! <id> <v1> ... <v_dim>
//! ```
//!
//! Values are written with 9 significant digits, which round-trips `f32`
//! exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    count: usize,
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingTable {
    pub fn zeros(count: usize, dim: usize) -> Result<Self> {
        Self::from_vec(count, dim, vec![0.0; count * dim])
    }

    pub fn from_vec(count: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("embedding dim must be at least 1".into()));
        }
        if data.len() != count * dim {
            return Err(Error::shape("embedding table", &[count, dim], &[data.len()]));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("embedding row {}", pos / dim)));
        }
        Ok(EmbeddingTable { count, dim, data })
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, id: usize) -> &[f32] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn row_mut(&mut self, id: usize) -> &mut [f32] {
        &mut self.data[id * self.dim..(id + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn cosine(&self, a: usize, b: usize) -> f64 {
        let (x, y) = (self.row(a), self.row(b));
        let dot: f64 = x.iter().zip(y).map(|(&p, &q)| p as f64 * q as f64).sum();
        let nx: f64 = x.iter().map(|&p| (p as f64).powi(2)).sum::<f64>().sqrt();
        let ny: f64 = y.iter().map(|&q| (q as f64).powi(2)).sum::<f64>().sqrt();
        if nx == 0.0 || ny == 0.0 {
            0.0
        } else {
            dot / (nx * ny)
        }
    }

    pub fn export<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = BufWriter::new(sink);
        let io = |e| Error::io("<embedding sink>", e);
        writeln!(w, "{} {}", self.count, self.dim).map_err(io)?;
        for id in 0..self.count {
            write!(w, "{id}").map_err(io)?;
            for v in self.row(id) {
                write!(w, " {v:.8e}").map_err(io)?;
            }
            writeln!(w).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn export_path(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.export(file)
    }

    pub fn import<R: Read>(source: R) -> Result<Self> {
        let mut lines = BufReader::new(source).lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse { line, message };

        let (count, dim) = loop {
            let Some((i, line)) = lines.next() else {
                return Err(parse_err(1, "missing `count dim` header".into()));
            };
            let line = line.map_err(|e| Error::io("<embedding source>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let parsed: Option<Vec<usize>> = fields.iter().map(|f| f.parse().ok()).collect();
            match parsed.as_deref() {
                Some(&[c, d]) if d > 0 => break (c, d),
                _ => return Err(parse_err(i + 1, format!("bad header `{}`", line.trim()))),
            }
        };

        let mut data = vec![0.0f32; count * dim];
        let mut seen = vec![false; count];
        let mut rows = 0;
        for (i, line) in lines {
            let lineno = i + 1;
            let line = line.map_err(|e| Error::io("<embedding source>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut fields = line.split_whitespace();
            let id: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err(lineno, "row id is not an integer".into()))?;
            if id >= count {
                return Err(parse_err(lineno, format!("row id {id} outside header count {count}")));
            }
            if std::mem::replace(&mut seen[id], true) {
                return Err(parse_err(lineno, format!("duplicate row id {id}")));
            }
            let values: Vec<f32> = fields
                .map(|f| f.parse::<f32>())
                .collect::<Result<_, _>>()
                .map_err(|e| parse_err(lineno, format!("bad value: {e}")))?;
            if values.len() != dim {
                return Err(parse_err(lineno, format!("expected {dim} values, found {}", values.len())));
            }
            data[id * dim..(id + 1) * dim].copy_from_slice(&values);
            rows += 1;
        }
        if rows != count {
            return Err(parse_err(0, format!("header declares {count} rows but {rows} were found")));
        }
        Self::from_vec(count, dim, data)
    }

    pub fn import_path(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::import(file)
    }
}

//! Named parameter sets and the `HNET1` checkpoint format.
//!
//! Layout: the magic line `HNET1\n`, then one header line per tensor
//! (`<name> <d0>,<d1>,...\n`), a blank line, then every tensor's values as
//! little-endian `f64` in header order.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

pub const MAGIC: &[u8] = b"HNET1\n";

/// Ordered, named collection of tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if name.is_empty() || name.chars().any(char::is_whitespace) {
            return Err(TensorError::Argument(format!("invalid tensor name {name:?}")));
        }
        if self.index_of(&name).is_some() {
            return Err(TensorError::Argument(format!("duplicate tensor name {name:?}")));
        }
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    /// Total scalar parameter count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.numel() {
            return Err(TensorError::Dimension(format!("flat vector of {} for {} params", flat.len(), self.numel())));
        }
        let mut off = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(w, "{name} {}", dims.join(","))?;
        }
        w.write_all(b"\n")?;
        for t in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if magic != MAGIC {
            return Err(TensorError::Format("missing HNET1 magic".into()));
        }
        let mut header = Vec::new();
        loop {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(TensorError::Format("header not terminated by a blank line".into()));
            }
            let line = line.strip_suffix('\n').ok_or_else(|| TensorError::Format("truncated header".into()))?;
            if line.is_empty() {
                break;
            }
            let (name, dims) =
                line.split_once(' ').ok_or_else(|| TensorError::Format(format!("bad header line {line:?}")))?;
            let shape = dims
                .split(',')
                .map(|d| d.parse::<usize>().map_err(|_| TensorError::Format(format!("bad extent in {line:?}"))))
                .collect::<Result<Vec<_>>>()?;
            header.push((name.to_string(), shape));
        }
        let mut store = Self::new();
        let mut buf = [0u8; 8];
        for (name, shape) in header {
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf).map_err(|_| TensorError::Format(format!("truncated data for {name}")))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.push(name, Tensor::new(shape, data)?)?;
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest)?;
        if !rest.is_empty() {
            return Err(TensorError::Format(format!("{} trailing bytes after tensor data", rest.len())));
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

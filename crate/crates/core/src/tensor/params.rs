use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Arc<Tensor>,
    trainable: bool,
}

/// Named leaf tensors. Frozen entries (pretrained vectors) ride along in
/// checkpoints but never receive optimizer updates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

const MAGIC: &str = "polyembed-checkpoint";
const VERSION: &str = "v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Re-adding an existing name replaces its value.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let name = name.into();
        debug_assert!(!name.contains(['\t', '\n']));
        if let Some(id) = self.id_of(&name) {
            self.entries[id.0] = Entry {
                name,
                value: Arc::new(value),
                trainable,
            };
            return id;
        }
        self.entries.push(Entry {
            name,
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.entries[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) {
        self.entries[id.0].value = Arc::new(value);
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.ids().filter(|&id| self.is_trainable(id))
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of every value.
    pub fn checksum(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.name.as_bytes());
            h.update([0u8, e.trainable as u8]);
            for d in e.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Writes the TSV checkpoint: a magic header, then per tensor one
    /// `name \t trainable \t dims` line and one line of row-major values.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{MAGIC}\t{VERSION}\t{}", self.entries.len())?;
        for e in &self.entries {
            let dims: Vec<String> = e.value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(w, "{}\t{}\t{}", e.name, e.trainable as u8, dims.join(","))?;
            let vals: Vec<String> = e.value.data().iter().map(|v| format!("{v:e}")).collect();
            writeln!(w, "{}", vals.join("\t"))?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Self> {
        let bad = |line: usize, msg: &str| TensorError::Checkpoint(format!("line {line}: {msg}"));
        let mut lines = r.lines();
        let header = lines.next().ok_or_else(|| bad(1, "empty file"))??;
        let mut parts = header.split('\t');
        if parts.next() != Some(MAGIC) || parts.next() != Some(VERSION) {
            return Err(bad(1, "unrecognized header"));
        }
        let count: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad(1, "missing tensor count"))?;
        let mut store = ParamStore::new();
        let mut lineno = 1;
        for _ in 0..count {
            lineno += 1;
            let meta = lines.next().ok_or_else(|| bad(lineno, "truncated"))??;
            let fields: Vec<&str> = meta.split('\t').collect();
            if fields.len() != 3 {
                return Err(bad(lineno, "expected name, trainable flag, dims"));
            }
            let trainable = match fields[1] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(lineno, "trainable flag must be 0 or 1")),
            };
            let shape: Vec<usize> = if fields[2].is_empty() {
                Vec::new()
            } else {
                fields[2]
                    .split(',')
                    .map(|d| d.parse().map_err(|_| bad(lineno, "bad dimension")))
                    .collect::<Result<_>>()?
            };
            lineno += 1;
            let vals = lines.next().ok_or_else(|| bad(lineno, "truncated"))??;
            let data: Vec<f64> = if vals.is_empty() {
                Vec::new()
            } else {
                vals.split('\t')
                    .map(|v| v.parse().map_err(|_| bad(lineno, "bad value")))
                    .collect::<Result<_>>()?
            };
            let t = Tensor::new(shape, data).map_err(|e| bad(lineno, &e.to_string()))?;
            store.add(fields[0], t, trainable);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(f))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn re_adding_replaces() {
        let mut s = ParamStore::new();
        let a = s.add("w", Tensor::scalar(1.0), true);
        let b = s.add("w", Tensor::scalar(2.0), false);
        assert_eq!(a, b);
        assert_eq!(s.len(), 1);
        assert_eq!(s.get(a).item(), 2.0);
        assert!(!s.is_trainable(a));
    }

    #[test]
    fn rejects_garbage_header() {
        let err = ParamStore::read_checkpoint("nope\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 1"));
    }

    proptest! {
        #[test]
        fn checkpoint_round_trip_is_bit_exact(
            vals in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::SUBNORMAL | prop::num::f64::ZERO, 0..40),
            cols in 1usize..5,
        ) {
            let rows = vals.len() / cols;
            let data = vals[..rows * cols].to_vec();
            let mut s = ParamStore::new();
            s.add("m", Tensor::matrix(rows, cols, data).unwrap(), true);
            s.add("s", Tensor::scalar(-0.1), false);
            s.add("empty", Tensor::zeros(&[0, 3]), true);
            let mut buf = Vec::new();
            s.write_checkpoint(&mut buf).unwrap();
            let back = ParamStore::read_checkpoint(buf.as_slice()).unwrap();
            prop_assert_eq!(back.checksum(), s.checksum());
        }
    }
}

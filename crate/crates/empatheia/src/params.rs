//! Named parameter storage with deterministic serialization and checksums.
//!
//! Parameters live in an insertion-ordered map keyed by hierarchical names
//! such as `backbone.adapter.layer0.attn.wq.a`. Freeze audits hash groups of
//! parameters by name prefix, so "bitwise unchanged" is checkable before and
//! after a training stage.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::autodiff::{Gradients, Graph, NodeId};
use crate::error::EmpatheiaError;

const MAGIC: &[u8; 8] = b"EMPPARM1";

/// Insertion-ordered map of named f64 matrices.
#[derive(Default, Clone)]
pub struct ParamStore {
    entries: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        assert!(
            !self.entries.contains_key(name),
            "parameter {} registered twice",
            name
        );
        self.entries.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {}", name))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar entries under a name prefix.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// SHA-256 over all parameters whose name starts with `prefix`, in a
    /// canonical order (sorted by name), hashing name, shape, and raw
    /// little-endian bytes. Identical hex string iff bitwise identical.
    pub fn group_checksum(&self, prefix: &str) -> String {
        let mut names: Vec<&String> = self
            .entries
            .keys()
            .filter(|k| k.starts_with(prefix))
            .collect();
        names.sort();
        let mut hasher = Sha256::new();
        for name in names {
            let v = &self.entries[name.as_str()];
            hasher.update(name.as_bytes());
            hasher.update((v.nrows() as u64).to_le_bytes());
            hasher.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                hasher.update(x.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Save parameters matching any of the given prefixes (all when empty).
    pub fn save(&self, path: &Path, prefixes: &[&str]) -> Result<(), EmpatheiaError> {
        let file = File::create(path).map_err(|e| EmpatheiaError::io(path, e))?;
        let mut w = BufWriter::new(file);
        let selected: Vec<(&String, &Array2<f64>)> = self
            .entries
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .collect();
        let res: std::io::Result<()> = (|| {
            w.write_all(MAGIC)?;
            w.write_all(&(selected.len() as u64).to_le_bytes())?;
            for (name, v) in selected {
                let nb = name.as_bytes();
                w.write_all(&(nb.len() as u64).to_le_bytes())?;
                w.write_all(nb)?;
                w.write_all(&(v.nrows() as u64).to_le_bytes())?;
                w.write_all(&(v.ncols() as u64).to_le_bytes())?;
                for x in v.iter() {
                    w.write_all(&x.to_le_bytes())?;
                }
            }
            w.flush()
        })();
        res.map_err(|e| EmpatheiaError::io(path, e))
    }

    /// Load parameters from `path`, replacing entries that already exist and
    /// inserting fresh ones.
    pub fn load_into(&mut self, path: &Path) -> Result<(), EmpatheiaError> {
        let file = File::open(path).map_err(|e| EmpatheiaError::io(path, e))?;
        let mut r = BufReader::new(file);
        let res: std::io::Result<()> = (|| {
            let mut magic = [0u8; 8];
            r.read_exact(&mut magic)?;
            if &magic != MAGIC {
                return Err(std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    "not a parameter file (bad magic)",
                ));
            }
            let count = read_u64(&mut r)? as usize;
            for _ in 0..count {
                let name_len = read_u64(&mut r)? as usize;
                let mut name_bytes = vec![0u8; name_len];
                r.read_exact(&mut name_bytes)?;
                let name = String::from_utf8(name_bytes).map_err(|_| {
                    std::io::Error::new(std::io::ErrorKind::InvalidData, "non-utf8 name")
                })?;
                let rows = read_u64(&mut r)? as usize;
                let cols = read_u64(&mut r)? as usize;
                let mut data = vec![0.0f64; rows * cols];
                for x in data.iter_mut() {
                    let mut buf = [0u8; 8];
                    r.read_exact(&mut buf)?;
                    *x = f64::from_le_bytes(buf);
                }
                let arr = Array2::from_shape_vec((rows, cols), data)
                    .expect("shape/data length agree by construction");
                self.entries.insert(name, arr);
            }
            Ok(())
        })();
        res.map_err(|e| EmpatheiaError::io(path, e))
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{:02x}", b));
    }
    s
}

/// Gradients keyed by parameter name after a backward pass.
pub type GradMap = IndexMap<String, Array2<f64>>;

/// Binds store parameters into a [`Graph`] for one forward/backward pass.
///
/// Parameters matched by the `trainable` predicate become gradient-carrying
/// leaves; everything else enters the tape as a constant, so no gradient is
/// ever computed for frozen weights.
pub struct TapeCtx<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    bound: IndexMap<String, NodeId>,
}

impl<'a> TapeCtx<'a> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self {
            g: Graph::new(),
            store,
            trainable: Box::new(trainable),
            bound: IndexMap::new(),
        }
    }

    /// Tape in which every parameter is frozen (inference).
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    /// Node for a named parameter, binding it on first use.
    pub fn param(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let value = self.store.get(name).clone();
        let id = if (self.trainable)(name) {
            self.g.leaf(value)
        } else {
            self.g.constant(value)
        };
        self.bound.insert(name.to_string(), id);
        id
    }

    pub fn is_bound(&self, name: &str) -> bool {
        self.bound.contains_key(name)
    }

    /// Backward from `root`, returning gradients for every trainable
    /// parameter that was bound (zeros if the root did not touch it).
    pub fn backward_params(&mut self, root: NodeId) -> GradMap {
        let grads = self.g.backward(root);
        self.collect(&grads)
    }

    fn collect(&self, grads: &Gradients) -> GradMap {
        let mut out = GradMap::new();
        for (name, &id) in &self.bound {
            if !(self.trainable)(name) {
                continue;
            }
            let shape = self.store.get(name).dim();
            out.insert(name.clone(), grads.get_or_zeros(id, shape));
        }
        out
    }
}

/// Accumulate `delta` into `total`, summing matrices with matching names.
pub fn add_grads(total: &mut GradMap, delta: &GradMap) {
    for (name, g) in delta {
        match total.get_mut(name) {
            Some(t) => *t += g,
            None => {
                total.insert(name.clone(), g.clone());
            }
        }
    }
}

/// Scale every gradient in place (e.g. 1/batch for mean reduction).
pub fn scale_grads(total: &mut GradMap, factor: f64) {
    for (_, g) in total.iter_mut() {
        *g *= factor;
    }
}

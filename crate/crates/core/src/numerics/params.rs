use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{drt1, Scalar, Tensor};

pub const MANIFEST: &str = "manifest.tsv";

/// Named learnable tensors, ordered by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    /// Subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamStore<T> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// FNV-1a over names, extents and value bits; used to prove weights were left untouched.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for (k, t) in &self.tensors {
            eat(k.as_bytes());
            for &d in t.dims() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Writes one DRT1 file per tensor plus a tab-separated manifest `name, shape, file`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = String::from("name\tshape\tfile\n");
        for (name, t) in &self.tensors {
            let file = format!("{name}.drt");
            drt1::write(&dir.join(&file), &t.cast::<f32>())?;
            let shape = t
                .dims()
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x");
            let _ = writeln!(manifest, "{name}\t{shape}\t{file}");
        }
        drt1::write_atomic(&dir.join(MANIFEST), manifest.as_bytes())
    }

    /// Loads a directory written by [`ParamStore::save`], requiring every tensor in `expected`
    /// to be present with the same extents and nothing else.
    pub fn load_checked(dir: &Path, expected: &ParamStore<T>) -> Result<ParamStore<T>> {
        let loaded = Self::load(dir)?;
        for (name, t) in &expected.tensors {
            match loaded.tensors.get(name) {
                None => {
                    return Err(Error::Data(format!(
                        "{}: missing weight `{name}`",
                        dir.display()
                    )))
                }
                Some(l) if l.dims() != t.dims() => {
                    return Err(Error::Data(format!(
                        "{}: weight `{name}` has shape {:?}, model expects {:?}",
                        dir.display(),
                        l.dims(),
                        t.dims()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = loaded.names().find(|n| !expected.tensors.contains_key(*n)) {
            return Err(Error::Data(format!(
                "{}: unexpected weight `{extra}`",
                dir.display()
            )));
        }
        Ok(loaded)
    }

    pub fn load(dir: &Path) -> Result<ParamStore<T>> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut store = ParamStore::new();
        for (lineno, line) in text.lines().enumerate().skip(1) {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            let [name, shape, file] = cols[..] else {
                return Err(Error::Format {
                    path: mpath.clone(),
                    detail: format!("line {}: expected 3 columns", lineno + 1),
                });
            };
            let dims: Vec<usize> = shape
                .split('x')
                .map(|s| s.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Format {
                    path: mpath.clone(),
                    detail: format!("line {}: shape `{shape}`: {e}", lineno + 1),
                })?;
            let t = drt1::read(&dir.join(file))?;
            if t.dims() != dims.as_slice() {
                return Err(Error::Data(format!(
                    "{}: manifest says {dims:?}, file holds {:?}",
                    dir.join(file).display(),
                    t.dims()
                )));
            }
            store.insert(name, t.cast());
        }
        Ok(store)
    }
}

//! Named parameter sets and their on-disk checkpoint form.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use ttl_tensor::{tnsr, Gradients, Graph, Real, Tensor, Var};

use crate::error::{invalid, Error, Result};

/// Ordered, named list of parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

/// Graph handles for a bound [`ParamSet`], in parameter order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    trainable: bool,
}

impl Bound {
    pub fn get(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    /// Kaiming-uniform weight: bound `sqrt(6 / fan_in)`.
    pub fn push_kaiming(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> usize {
        let bound = (6.0 / fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::from_f64(rng.random_range(-bound..bound)));
        self.push(name, t)
    }

    pub fn push_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> usize {
        self.push(name, Tensor::zeros(shape))
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

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds every tensor to `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars, trainable }
    }

    /// Gradients for each bound tensor; missing entries become zeros.
    pub fn collect_grads(&self, bound: &Bound, grads: &Gradients<T>) -> Vec<Tensor<T>> {
        bound
            .vars
            .iter()
            .zip(&self.tensors)
            .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        if self.names != other.names {
            return Err(invalid("parameter names differ"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(invalid(format!(
                    "parameter shape {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            a.clone_from(b);
        }
        Ok(())
    }
}

impl ParamSet<f32> {
    /// Little-endian bytes of every tensor, in order. Used for equality checks.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }
}

/// JSON index entry of a checkpoint.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

pub const INDEX_FILE: &str = "index.json";

/// Writes `sets` (prefix → params) as one TNSR file per tensor plus `index.json`.
pub fn save_checkpoint(dir: &Path, sets: &[(&str, &ParamSet<f32>)]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = BTreeMap::new();
    for (prefix, set) in sets {
        for (name, t) in set.names.iter().zip(&set.tensors) {
            let key = format!("{prefix}.{name}");
            let file = format!("{key}.tnsr");
            let path = dir.join(&file);
            tnsr::save(&path, t)?;
            index.insert(
                key,
                IndexEntry {
                    file,
                    shape: t.shape().to_vec(),
                },
            );
        }
    }
    let path = dir.join(INDEX_FILE);
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_index(dir: &Path) -> Result<BTreeMap<String, IndexEntry>> {
    let path = dir.join(INDEX_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(&path, e))
}

/// Fills `set` from the checkpoint entries under `prefix`.
pub fn load_into(dir: &Path, prefix: &str, set: &mut ParamSet<f32>) -> Result<()> {
    let index = read_index(dir)?;
    for (name, t) in set.names.iter().zip(set.tensors.iter_mut()) {
        let key = format!("{prefix}.{name}");
        let entry = index
            .get(&key)
            .ok_or_else(|| invalid(format!("checkpoint has no tensor `{key}`")))?;
        let loaded = tnsr::load(&dir.join(&entry.file))?;
        if loaded.shape() != t.shape() || entry.shape != t.shape() {
            return Err(invalid(format!(
                "`{key}` has shape {:?}, model expects {:?}",
                loaded.shape(),
                t.shape()
            )));
        }
        *t = loaded;
    }
    Ok(())
}

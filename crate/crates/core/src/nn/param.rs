use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Graph, NnError, Scalar, Tensor, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub tensor: Tensor<F>,
}

/// Named trainable tensors in registration order. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    index: HashMap<String, usize>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<F>) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::Checkpoint(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter { name, tensor });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Registers every parameter as a differentiable leaf of `graph`;
    /// the returned vars are indexed like the store.
    pub fn bind(&self, graph: &mut Graph<F>) -> Result<Vec<Var>, NnError> {
        self.params.iter().map(|p| graph.param(p.tensor.clone())).collect()
    }

    /// Writes `params.bin` (little-endian values, concatenated in store
    /// order) and `manifest.json` (names, shapes, offsets) into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), NnError> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::with_capacity(self.num_values() * F::BYTES);
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for p in &self.params {
            for &v in p.tensor.data() {
                v.write_le(&mut bytes);
            }
            entries.push(ManifestEntry {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                offset,
                len: p.tensor.len(),
            });
            offset += p.tensor.len();
        }
        let manifest = Manifest { dtype: F::DTYPE.to_string(), tensors: entries };
        fs::write(dir.join("params.bin"), bytes)?;
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| NnError::Checkpoint(e.to_string()))?;
        fs::write(dir.join("manifest.json"), json)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self, NnError> {
        let json = fs::read_to_string(dir.join("manifest.json"))?;
        let manifest: Manifest =
            serde_json::from_str(&json).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        if manifest.dtype != F::DTYPE {
            return Err(NnError::Checkpoint(format!(
                "checkpoint holds {} values, expected {}",
                manifest.dtype,
                F::DTYPE
            )));
        }
        let bytes = fs::read(dir.join("params.bin"))?;
        let mut store = ParamStore::new();
        for e in manifest.tensors {
            let (start, end) = (e.offset * F::BYTES, (e.offset + e.len) * F::BYTES);
            if end > bytes.len() {
                return Err(NnError::Checkpoint(format!("{} extends past end of params.bin", e.name)));
            }
            let data = bytes[start..end].chunks_exact(F::BYTES).map(F::read_le).collect();
            store.add(e.name, Tensor::new(e.shape, data)?)?;
        }
        Ok(store)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    tensors: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

//! On-disk checkpoints: a directory with `manifest.json` and `weights.bin`.
//!
//! `weights.bin` concatenates little-endian f32 arrays; the manifest lists
//! every array's name, shape, byte offset and element count, in store order
//! followed by the retained dense MLPs of grown blocks.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::growth::GrowPlan;
use crate::tensor::{ParamStore, Tensor};
use crate::vit::{Ffn, HeadRole, Model, ModelSpec};
use crate::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetainedEntry {
    pub layer: usize,
    pub params: Vec<ArrayEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub dtype: String,
    pub seed: u64,
    pub stage: String,
    pub model: ModelSpec,
    /// One entry per block; MoE positions are the non-dense entries.
    pub ffn: Vec<Ffn>,
    pub params: Vec<ArrayEntry>,
    pub retained: Vec<RetainedEntry>,
    pub grow_plan: Option<GrowPlan>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub stage: String,
    pub grow_plan: Option<GrowPlan>,
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64, stage: impl Into<String>, grow_plan: Option<GrowPlan>) -> Self {
        Self {
            model,
            seed,
            stage: stage.into(),
            grow_plan,
        }
    }

    /// Manifest and weight bytes, without touching the filesystem.
    pub fn encode(&self) -> (Manifest, Vec<u8>) {
        let mut bytes = Vec::new();
        let mut push = |name: &str, t: &Tensor| {
            let e = ArrayEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset: bytes.len(),
                len: t.len(),
            };
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            e
        };
        let params: Vec<ArrayEntry> = self.model.store.iter().map(|(_, n, t)| push(n, t)).collect();
        let retained = self
            .model
            .retained
            .iter()
            .map(|(&layer, mlp)| RetainedEntry {
                layer,
                params: crate::vit::mlp_names(layer)
                    .iter()
                    .zip(mlp)
                    .map(|(n, t)| push(n, t))
                    .collect(),
            })
            .collect();
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            dtype: "f32".into(),
            seed: self.seed,
            stage: self.stage.clone(),
            model: self.model.spec.clone(),
            ffn: self.model.ffn.clone(),
            params,
            retained,
            grow_plan: self.grow_plan.clone(),
        };
        (manifest, bytes)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (manifest, bytes) = self.encode();
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        let mp = dir.join(MANIFEST);
        std::fs::write(&mp, text).map_err(|e| Error::io(&mp, e))?;
        let wp = dir.join(WEIGHTS);
        std::fs::write(&wp, bytes).map_err(|e| Error::io(&wp, e))?;
        Ok(())
    }

    pub fn decode(manifest: Manifest, bytes: &[u8]) -> Result<Self> {
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint format {}", manifest.format_version)));
        }
        if manifest.dtype != "f32" {
            return Err(Error::Data(format!("unsupported dtype {}", manifest.dtype)));
        }
        manifest.model.validate()?;
        if manifest.ffn.len() != manifest.model.n_blocks {
            return Err(Error::Data(format!(
                "topology lists {} blocks, model has {}",
                manifest.ffn.len(),
                manifest.model.n_blocks
            )));
        }
        let read = |e: &ArrayEntry| -> Result<Tensor> {
            let end = e.offset + 4 * e.len;
            if end > bytes.len() || e.shape.iter().product::<usize>() != e.len {
                return Err(Error::Data(format!("array {} out of bounds or misshapen", e.name)));
            }
            let data = bytes[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(e.shape.clone(), data)
        };
        let mut store = ParamStore::new();
        for e in &manifest.params {
            if store.lookup(&e.name).is_some() {
                return Err(Error::Data(format!("duplicate parameter {}", e.name)));
            }
            store.insert(e.name.clone(), read(e)?.trainable());
        }
        let mut retained = BTreeMap::new();
        for r in &manifest.retained {
            let ts: Vec<Tensor> = r.params.iter().map(|e| read(e).map(Tensor::trainable)).collect::<Result<_>>()?;
            let arr: [Tensor; 4] = ts
                .try_into()
                .map_err(|_| Error::Data(format!("retained block {} needs 4 arrays", r.layer)))?;
            retained.insert(r.layer, arr);
        }
        let count = store.len();
        let mut model = Model {
            spec: manifest.model,
            store,
            ffn: manifest.ffn,
            retained,
        };
        let heads: Vec<HeadRole> = [HeadRole::Upstream, HeadRole::Downstream]
            .into_iter()
            .filter(|&r| model.has_head(r))
            .collect();
        model.rebuild(Vec::new(), &heads).map_err(|e| Error::Data(format!("checkpoint layout: {e}")))?;
        if model.store.len() != count {
            return Err(Error::Data("checkpoint has parameters outside the model layout".into()));
        }
        Ok(Self {
            model,
            seed: manifest.seed,
            stage: manifest.stage,
            grow_plan: manifest.grow_plan,
        })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mp = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", mp.display())))?;
        let wp = dir.join(WEIGHTS);
        let bytes = std::fs::read(&wp).map_err(|e| Error::io(&wp, e))?;
        Self::decode(manifest, &bytes)
    }
}

//! Model checkpoints and serde helpers for matrices.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::PhonoFeatureSchema;
use crate::error::{Error, Result};
use crate::model::{build_model, CapacityPlan, Model, ModelConfig, ModelVariant, PssConfig};
use crate::tape::Mat;
use crate::train::TrainState;
use crate::vq::Codebook;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    #[serde(with = "mat")]
    pub value: Mat,
}

/// Everything needed to rebuild a trained model and resume its optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub checkpoint_version: u32,
    pub variant: ModelVariant,
    pub config: ModelConfig,
    pub plan: CapacityPlan,
    pub pss: PssConfig,
    pub schema: PhonoFeatureSchema,
    pub params: Vec<NamedTensor>,
    pub books: Vec<Codebook>,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn capture(model: &Model, train_state: Option<&TrainState>) -> Self {
        Checkpoint {
            checkpoint_version: CHECKPOINT_VERSION,
            variant: model.variant,
            config: model.config.clone(),
            plan: model.plan.clone(),
            pss: model.config.pss.clone(),
            schema: model.schema.clone(),
            params: model
                .params
                .iter()
                .map(|(name, value)| NamedTensor {
                    name: name.to_string(),
                    value: value.clone(),
                })
                .collect(),
            books: model.books.clone(),
            train_state: train_state.cloned(),
        }
    }

    /// Rebuilds the model; every parameter and book must match by name and shape.
    pub fn restore(&self) -> Result<Model> {
        let mut model = build_model(self.variant, &self.config, &self.schema, 0)?;
        if model.plan != self.plan || model.config.pss != self.pss {
            return Err(Error::Config("checkpoint plan or PSS settings disagree with its config".into()));
        }
        if model.params.len() != self.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                self.params.len(),
                model.params.len()
            )));
        }
        let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
        for ((name, dst), src) in names.iter().zip(model.params.values_mut()).zip(&self.params) {
            if *name != src.name || dst.dim() != src.value.dim() {
                return Err(Error::Config(format!("checkpoint tensor {} does not match model tensor {name}", src.name)));
            }
            dst.assign(&src.value);
        }
        if model.books.len() != self.books.len() {
            return Err(Error::Config("checkpoint codebook count mismatch".into()));
        }
        for (dst, src) in model.books.iter_mut().zip(&self.books) {
            if dst.name != src.name || dst.entries.dim() != src.entries.dim() || dst.reserved != src.reserved {
                return Err(Error::Config(format!("checkpoint codebook {} does not match the model", src.name)));
            }
            *dst = src.clone();
        }
        if let Some(st) = &self.train_state {
            if st.adam.len() != model.tensor_shapes().len() {
                return Err(Error::Config("checkpoint optimizer state does not match the model".into()));
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        serde_json::to_vec(self).map_err(|e| Error::InvalidArgument(format!("checkpoint serialization: {e}")))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
            line: e.line(),
            message: e.to_string(),
        })?;
        let found = value.get("checkpoint_version").and_then(|v| v.as_u64());
        if found != Some(CHECKPOINT_VERSION as u64) {
            return Err(Error::Version {
                found: found.unwrap_or(0),
                expected: CHECKPOINT_VERSION as u64,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

/// Serializes a matrix as `{ "rows": r, "cols": c, "data": [...] }`.
pub mod mat {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::tape::Mat;

    #[derive(Serialize, Deserialize)]
    pub(crate) struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    impl Repr {
        pub(crate) fn from_mat(m: &Mat) -> Self {
            Repr {
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.iter().copied().collect(),
            }
        }

        pub(crate) fn into_mat<E: serde::de::Error>(self) -> Result<Mat, E> {
            Mat::from_shape_vec((self.rows, self.cols), self.data).map_err(E::custom)
        }
    }

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> Result<S::Ok, S::Error> {
        Repr::from_mat(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat, D::Error> {
        Repr::deserialize(d)?.into_mat()
    }
}

pub mod mat_list {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::mat::Repr;
    use crate::tape::Mat;

    pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> Result<S::Ok, S::Error> {
        ms.iter().map(Repr::from_mat).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Mat>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(Repr::into_mat).collect()
    }
}

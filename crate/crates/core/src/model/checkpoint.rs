//! Checkpoint container: a self-describing JSON document with a magic
//! string and format version. f64 values are written in shortest
//! round-trip form, so save → load → predict is bit-identical.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelSpec, TrainConfig};
use crate::error::{Error, Result};
use crate::norm::NormState;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &str = "PBN-CKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Shape + flat data, the serialized form of a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<Scalar>,
}

impl From<&Tensor> for TensorData {
    fn from(t: &Tensor) -> Self {
        TensorData { shape: t.shape().to_vec(), data: t.data().to_vec() }
    }
}

impl TensorData {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(&self.shape, self.data.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: String,
    pub version: u32,
    pub spec: ModelSpec,
    pub train_config: TrainConfig,
    pub params: Vec<TensorData>,
    pub norm_states: Vec<NormState>,
    pub epoch_losses: Vec<Scalar>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, cfg: &TrainConfig, epoch_losses: Vec<Scalar>) -> Self {
        Checkpoint {
            magic: CHECKPOINT_MAGIC.to_string(),
            version: CHECKPOINT_VERSION,
            spec: model.spec().clone(),
            train_config: cfg.clone(),
            params: model.params().iter().map(TensorData::from).collect(),
            norm_states: model.norm_states_vec().clone(),
            epoch_losses,
        }
    }

    pub fn to_model(&self) -> Result<Model> {
        let params = self
            .params
            .iter()
            .map(|t| t.to_tensor())
            .collect::<Result<Vec<_>>>()?;
        Model::from_parts(self.spec.clone(), params, self.norm_states.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Checkpoint(format!("serialize: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::MissingArtifact(format!("checkpoint {}: {e}", path.display()))
        })?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad magic {:?}",
                path.display(),
                ckpt.magic
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: unsupported version {}",
                path.display(),
                ckpt.version
            )));
        }
        Ok(ckpt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::separable_blobs;
    use crate::model::{train, Architecture};
    use crate::norm::{BnMode, NormKind};

    fn small_ckpt() -> Checkpoint {
        let spec = ModelSpec {
            arch: Architecture::Mlp { hidden: vec![8] },
            norm: NormKind::batch(),
            input_shape: vec![4],
            num_classes: 2,
            eps: 1e-3,
            momentum: 0.99,
            seed: 11,
        };
        let data = separable_blobs(120, 4, 2).unwrap();
        let cfg = TrainConfig { epochs: 4, batch_size: 32, ..Default::default() };
        train(&spec, &cfg, &data).unwrap()
    }

    #[test]
    fn round_trip_is_bit_identical_in_predictions() {
        let ckpt = small_ckpt();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(ckpt, loaded);

        let data = separable_blobs(50, 4, 9).unwrap();
        let mut m1 = ckpt.to_model().unwrap();
        let mut m2 = loaded.to_model().unwrap();
        m1.set_prediction_mode(BnMode::EvalBatch).unwrap();
        m2.set_prediction_mode(BnMode::EvalBatch).unwrap();
        let p1 = m1.predict(&data.features, None).unwrap();
        let p2 = m2.predict(&data.features, None).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn bad_magic_and_version_rejected() {
        let ckpt = small_ckpt();
        let dir = tempfile::tempdir().unwrap();

        let mut wrong = ckpt.clone();
        wrong.magic = "NOPE".into();
        let p1 = dir.path().join("bad_magic.ckpt");
        std::fs::write(&p1, serde_json::to_string(&wrong).unwrap()).unwrap();
        assert!(matches!(Checkpoint::load(&p1), Err(Error::Checkpoint(_))));

        let mut newer = ckpt;
        newer.version = 99;
        let p2 = dir.path().join("bad_version.ckpt");
        std::fs::write(&p2, serde_json::to_string(&newer).unwrap()).unwrap();
        assert!(matches!(Checkpoint::load(&p2), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_file_is_missing_artifact() {
        assert!(matches!(
            Checkpoint::load(Path::new("/nonexistent/m.ckpt")),
            Err(Error::MissingArtifact(_))
        ));
    }
}

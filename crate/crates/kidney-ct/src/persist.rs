//! Self-describing model checkpoints: parameters bundled with the
//! backbone/ensemble spec and the label codec, so a checkpoint alone is
//! enough to reconstruct the model for inference.

use std::path::Path;

use serde_json::json;

use crate::ckpt::{self, ParamBlob};
use crate::ensemble::{build_ensemble, EnsembleModel, EnsembleSpec};
use crate::error::{Error, Result};
use crate::manifest::LabelCodec;
use crate::train::TrainableModel;
use crate::zoo::{attach_head, build_architecture, BackboneSpec, ClassifierModel};

pub const KIND_CLASSIFIER: &str = "classifier";
pub const KIND_ENSEMBLE: &str = "ensemble";

/// Checkpoint metadata for a classifier; the trainer merges this into
/// every best/last checkpoint it writes.
pub fn classifier_meta(spec: &BackboneSpec, codec: &LabelCodec) -> serde_json::Value {
    json!({
        "kind": KIND_CLASSIFIER,
        "spec": spec,
        "codec": codec,
    })
}

pub fn ensemble_meta(spec: &EnsembleSpec, codec: &LabelCodec) -> serde_json::Value {
    json!({
        "kind": KIND_ENSEMBLE,
        "spec": spec,
        "codec": codec,
    })
}

pub fn save_classifier(
    model: &ClassifierModel,
    codec: &LabelCodec,
    path: &Path,
) -> Result<()> {
    let blob = ParamBlob {
        meta: classifier_meta(model.spec(), codec),
        entries: model.param_snapshot(),
    };
    ckpt::write_blob(path, &blob)
}

pub fn save_ensemble(model: &EnsembleModel, codec: &LabelCodec, path: &Path) -> Result<()> {
    let blob = ParamBlob {
        meta: ensemble_meta(&model.spec, codec),
        entries: model.param_snapshot(),
    };
    ckpt::write_blob(path, &blob)
}

fn meta_field<T: serde::de::DeserializeOwned>(
    meta: &serde_json::Value,
    field: &str,
    path: &Path,
) -> Result<T> {
    serde_json::from_value(meta[field].clone()).map_err(|e| Error::CorruptCheckpoint {
        path: path.to_path_buf(),
        reason: format!("bad `{field}` in checkpoint meta: {e}"),
    })
}

fn assign_params<M: TrainableModel>(model: &mut M, blob: &ParamBlob, path: &Path) -> Result<()> {
    let mut error: Option<Error> = None;
    let mut seen = 0usize;
    model.visit_params_mut(&mut |name, p| {
        if error.is_some() {
            return;
        }
        match blob.get(name) {
            Some(tensor) if tensor.shape() == p.value.shape() => {
                p.value.assign(tensor);
                seen += 1;
            }
            Some(tensor) => {
                error = Some(Error::CorruptCheckpoint {
                    path: path.to_path_buf(),
                    reason: format!(
                        "param {name}: stored shape {:?}, expected {:?}",
                        tensor.shape(),
                        p.value.shape()
                    ),
                });
            }
            None => {
                error = Some(Error::CorruptCheckpoint {
                    path: path.to_path_buf(),
                    reason: format!("param {name} missing from checkpoint"),
                });
            }
        }
    });
    if let Some(e) = error {
        return Err(e);
    }
    if seen != blob.entries.len() {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!(
                "checkpoint holds {} params, model expects {seen}",
                blob.entries.len()
            ),
        });
    }
    Ok(())
}

/// A model restored from a checkpoint, ready for inference.
pub enum LoadedModel {
    Classifier(ClassifierModel),
    Ensemble(EnsembleModel),
}

impl LoadedModel {
    pub fn predict_proba(
        &self,
        batch: &ndarray::Array4<f32>,
    ) -> Result<ndarray::Array2<f32>> {
        match self {
            LoadedModel::Classifier(m) => m.predict_proba(batch),
            LoadedModel::Ensemble(m) => m.predict_proba(batch),
        }
    }

    pub fn input_size(&self) -> (usize, usize) {
        match self {
            LoadedModel::Classifier(m) => m.spec().input_size,
            LoadedModel::Ensemble(m) => m.spec.input_size(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            LoadedModel::Classifier(m) => m.num_classes(),
            LoadedModel::Ensemble(m) => m.spec.num_classes,
        }
    }
}

/// Restore any checkpoint written by the trainer or the save functions
/// above. Returns the model and the label codec it was trained with.
pub fn load_model(path: &Path) -> Result<(LoadedModel, LabelCodec)> {
    let blob = ckpt::read_blob(path)?;
    let kind: String = meta_field(&blob.meta, "kind", path)?;
    let codec: LabelCodec = meta_field(&blob.meta, "codec", path)?;
    match kind.as_str() {
        KIND_CLASSIFIER => {
            let spec: BackboneSpec = meta_field(&blob.meta, "spec", path)?;
            let extractor = build_architecture(&spec, 0)?;
            let mut model = attach_head(extractor, codec.num_classes(), 0)?;
            assign_params(&mut model, &blob, path)?;
            Ok((LoadedModel::Classifier(model), codec))
        }
        KIND_ENSEMBLE => {
            let spec: EnsembleSpec = meta_field(&blob.meta, "spec", path)?;
            let branches = spec
                .branches
                .iter()
                .map(|b| build_architecture(b, 0))
                .collect::<Result<Vec<_>>>()?;
            let mut model = build_ensemble(branches, &spec, 0)?;
            assign_params(&mut model, &blob, path)?;
            Ok((LoadedModel::Ensemble(model), codec))
        }
        other => Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("unknown checkpoint kind: {other}"),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{build_backbone, Family};
    use ndarray::Array4;
    use rand::Rng;

    fn random_batch(n: usize, seed: u64) -> Array4<f32> {
        let mut rng = crate::seeding::rng_for(seed, "persist_batch", &[]);
        Array4::from_shape_fn((n, 64, 64, 3), |_| rng.gen::<f32>())
    }

    #[test]
    fn classifier_checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let codec = LabelCodec::from_class_names(["Cyst", "Normal", "Stone", "Tumor"]);
        let spec = BackboneSpec::tiny(Family::MobilenetV2, (64, 64));
        let extractor = build_backbone(&spec, 21, None).unwrap();
        let model = attach_head(extractor, 4, 21).unwrap();

        let path = dir.path().join("best.ckpt");
        save_classifier(&model, &codec, &path).unwrap();
        let (loaded, loaded_codec) = load_model(&path).unwrap();
        assert_eq!(loaded_codec, codec);

        let batch = random_batch(3, 1);
        let original = model.predict_proba(&batch).unwrap();
        let restored = loaded.predict_proba(&batch).unwrap();
        assert_eq!(original, restored);
    }

    #[test]
    fn ensemble_checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let codec = LabelCodec::from_class_names(["a", "b", "c", "d"]);
        let specs: Vec<BackboneSpec> = Family::ALL
            .into_iter()
            .map(|f| BackboneSpec::tiny(f, (64, 64)))
            .collect();
        let branches = specs
            .iter()
            .map(|s| build_backbone(s, 8, None).unwrap())
            .collect();
        let spec = EnsembleSpec::new(specs, vec![32, 16], 4, false).unwrap();
        let model = build_ensemble(branches, &spec, 8).unwrap();

        let path = dir.path().join("ensemble.ckpt");
        save_ensemble(&model, &codec, &path).unwrap();
        let (loaded, _) = load_model(&path).unwrap();
        let batch = random_batch(2, 2);
        assert_eq!(
            model.predict_proba(&batch).unwrap(),
            loaded.predict_proba(&batch).unwrap()
        );
    }

    #[test]
    fn missing_checkpoint_is_distinct_error() {
        match load_model(Path::new("/nonexistent/x.ckpt")) {
            Err(Error::MissingCheckpoint(_)) => {}
            Err(other) => panic!("wrong error: {other}"),
            Ok(_) => panic!("load of a missing file must fail"),
        }
    }
}

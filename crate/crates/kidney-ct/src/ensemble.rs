//! Feature-concatenation ensemble: parallel backbone branches over one
//! shared input image, their pooled feature vectors concatenated in
//! branch order and classified by a dense stack with a softmax output.
//!
//! Branches are frozen by default; each one is expected to come from its
//! backbone's best checkpoint, and gradients then flow only into the
//! fusion head.

use ndarray::{Array2, Array4, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Activation, ActivationKind, Dense, Layer, Param, Sequential, Softmax};
use crate::seeding;
use crate::train::TrainableModel;
use crate::zoo::{BackboneSpec, FeatureExtractor};

pub const DEFAULT_DENSE_WIDTHS: [usize; 2] = [512, 128];

/// Topology of the ensemble. `fused_dim` is always the sum of the branch
/// feature widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub branches: Vec<BackboneSpec>,
    pub fused_dim: usize,
    pub dense_widths: Vec<usize>,
    pub num_classes: usize,
    pub branch_trainable: bool,
}

impl EnsembleSpec {
    pub fn new(
        branches: Vec<BackboneSpec>,
        dense_widths: Vec<usize>,
        num_classes: usize,
        branch_trainable: bool,
    ) -> Result<Self> {
        let fused_dim = branches.iter().map(|b| b.feature_dim).sum();
        let spec = EnsembleSpec {
            branches,
            fused_dim,
            dense_widths,
            num_classes,
            branch_trainable,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.len() < 2 {
            return Err(Error::Config(format!(
                "ensemble needs at least 2 branches, got {}",
                self.branches.len()
            )));
        }
        let input = self.branches[0].input_size;
        if self.branches.iter().any(|b| b.input_size != input) {
            return Err(Error::DimMismatch(
                "all branches must share one input size".to_string(),
            ));
        }
        let sum: usize = self.branches.iter().map(|b| b.feature_dim).sum();
        if sum != self.fused_dim {
            return Err(Error::DimMismatch(format!(
                "fused_dim {} != sum of branch dims {sum}",
                self.fused_dim
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("ensemble needs at least 2 classes".into()));
        }
        Ok(())
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.branches[0].input_size
    }

    /// Start offset of each branch's slice in the fused vector.
    pub fn branch_offsets(&self) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(self.branches.len());
        let mut offset = 0;
        for branch in &self.branches {
            offsets.push(offset);
            offset += branch.feature_dim;
        }
        offsets
    }
}

/// Built ensemble: branch extractors plus the fusion head.
pub struct EnsembleModel {
    pub spec: EnsembleSpec,
    branches: Vec<FeatureExtractor>,
    fusion: Sequential,
    softmax: Softmax,
}

/// Assemble an ensemble from already-built branches. Branch order is the
/// concatenation order. The fusion head (hidden dense layers with a
/// bounded nonlinearity, then the softmax output layer) initializes from
/// `seed`.
pub fn build_ensemble(
    branches: Vec<FeatureExtractor>,
    spec: &EnsembleSpec,
    seed: u64,
) -> Result<EnsembleModel> {
    spec.validate()?;
    if branches.len() != spec.branches.len() {
        return Err(Error::DimMismatch(format!(
            "spec lists {} branches, got {}",
            spec.branches.len(),
            branches.len()
        )));
    }
    for (i, (built, wanted)) in branches.iter().zip(&spec.branches).enumerate() {
        if built.spec != *wanted {
            return Err(Error::DimMismatch(format!(
                "branch {i} spec mismatch: built {}/{}, spec {}/{}",
                built.spec.family, built.spec.variant, wanted.family, wanted.variant
            )));
        }
    }

    let mut rng = seeding::rng_for(seed, "ensemble_fusion_init", &[spec.num_classes as u64]);
    let mut fusion = Sequential::new();
    let mut in_dim = spec.fused_dim;
    for (i, &width) in spec.dense_widths.iter().enumerate() {
        fusion.push(format!("dense{i}"), Dense::new(&mut rng, in_dim, width));
        fusion.push(format!("act{i}"), Activation::new(ActivationKind::Relu6));
        in_dim = width;
    }
    fusion.push("output", Dense::new(&mut rng, in_dim, spec.num_classes));

    let mut model = EnsembleModel {
        spec: spec.clone(),
        branches,
        fusion,
        softmax: Softmax::new(),
    };
    model.apply_branch_freeze();
    Ok(model)
}

impl EnsembleModel {
    fn apply_branch_freeze(&mut self) {
        let trainable = self.spec.branch_trainable;
        for branch in &mut self.branches {
            branch.visit_params_mut("", &mut |_, p| p.trainable = trainable);
        }
    }

    pub fn branches(&self) -> &[FeatureExtractor] {
        &self.branches
    }

    pub fn branch_checksums(&self) -> Vec<String> {
        self.branches.iter().map(|b| b.param_checksum()).collect()
    }

    fn check_batch(&self, batch: &Array4<f32>) -> Result<()> {
        let (_, h, w, c) = batch.dim();
        let (eh, ew) = self.spec.input_size();
        if (h, w) != (eh, ew) || c != 3 {
            return Err(Error::ShapeMismatch {
                expected: format!("(N, {eh}, {ew}, 3)"),
                actual: format!("(N, {h}, {w}, {c})"),
            });
        }
        Ok(())
    }

    /// Concatenated branch features in spec order; slice
    /// `[offset_i, offset_i + dim_i)` equals branch i's standalone output
    /// exactly.
    pub fn fused_features(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
        self.check_batch(batch)?;
        let mut parts = Vec::with_capacity(self.branches.len());
        for branch in &self.branches {
            parts.push(branch.features(batch)?);
        }
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(1), &views).expect("branch feature row counts agree"))
    }

    /// Inference-mode probabilities; deterministic.
    pub fn predict_proba(&self, batch: &Array4<f32>) -> Result<Array2<f32>> {
        let fused = self.fused_features(batch)?;
        let logits = self.fusion.infer(&fused.into_dyn());
        Ok(Softmax::apply(&logits)
            .into_dimensionality::<Ix2>()
            .expect("probabilities are 2-D"))
    }

    pub fn topology_json(&self) -> serde_json::Value {
        let offsets = self.spec.branch_offsets();
        serde_json::json!({
            "branches": self
                .branches
                .iter()
                .zip(&offsets)
                .map(|(b, &offset)| {
                    serde_json::json!({
                        "family": b.spec.family.token(),
                        "variant": b.spec.variant.token(),
                        "feature_dim": b.spec.feature_dim,
                        "preprocessing_id": b.spec.preprocessing_id,
                        "fused_offset": offset,
                        "param_sha256": b.param_checksum(),
                    })
                })
                .collect::<Vec<_>>(),
            "fused_dim": self.spec.fused_dim,
            "dense_widths": self.spec.dense_widths,
            "num_classes": self.spec.num_classes,
            "branch_trainable": self.spec.branch_trainable,
        })
    }
}

impl TrainableModel for EnsembleModel {
    fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn forward_train(&mut self, images: &Array4<f32>) -> Array2<f32> {
        let fused = if self.spec.branch_trainable {
            let mut parts = Vec::with_capacity(self.branches.len());
            for branch in &mut self.branches {
                parts.push(branch.forward_train(images));
            }
            let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
            ndarray::concatenate(Axis(1), &views).expect("branch feature row counts agree")
        } else {
            // frozen branches run in pure inference mode; no caches, and
            // backward stops at the concatenation
            self.fused_features(images)
                .expect("training batches are shape-checked by the stream")
        };
        let logits = self.fusion.forward(&fused.into_dyn());
        self.softmax
            .forward(&logits)
            .into_dimensionality::<Ix2>()
            .expect("probabilities are 2-D")
    }

    fn backward_from_probs(&mut self, dprobs: &Array2<f32>) {
        let dlogits = self.softmax.backward(&dprobs.clone().into_dyn());
        let dfused = self.fusion.backward(&dlogits);
        if self.spec.branch_trainable {
            let dfused = dfused
                .into_dimensionality::<Ix2>()
                .expect("fused grads are 2-D");
            for (branch, offset) in self.branches.iter_mut().zip(self.spec.branch_offsets()) {
                let dim = branch.feature_dim();
                let slice = dfused
                    .slice(ndarray::s![.., offset..offset + dim])
                    .to_owned();
                branch.backward(&slice);
            }
        }
    }

    fn predict_proba(&self, images: &Array4<f32>) -> Result<Array2<f32>> {
        EnsembleModel::predict_proba(self, images)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, branch) in self.branches.iter().enumerate() {
            branch.visit_params(&format!("branch{i}"), f);
        }
        self.fusion.visit_params("fusion", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, branch) in self.branches.iter_mut().enumerate() {
            branch.visit_params_mut(&format!("branch{i}"), f);
        }
        self.fusion.visit_params_mut("fusion", f);
    }
}

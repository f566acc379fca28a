//! Command implementations behind the `kidney-ct` binary: prepare,
//! fixture, train, evaluate, explain, report. Each command is a plain
//! function over a [`RunConfig`], so the examples and tests drive the
//! same code paths as the binary.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array4};

use crate::augment::{self, BatchStream};
use crate::config::RunConfig;
use crate::ensemble::{build_ensemble, EnsembleSpec};
use crate::error::{Error, Result};
use crate::fixture;
use crate::lime;
use crate::manifest::{assign_stratified, scan_dataset, LabelCodec, Manifest, Split};
use crate::metrics::{evaluate, EvaluationReport};
use crate::persist::{self, LoadedModel};
use crate::plot;
use crate::report::ComparisonTable;
use crate::seeding;
use crate::train::{train, CheckpointSink, TrainingConfig};
use crate::zoo::{attach_head, build_backbone, BackboneSpec, Family, Variant};

/// What `train`/`evaluate`/`explain` operate on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSelector {
    Backbone(Family),
    Ensemble,
}

impl ModelSelector {
    pub fn token(&self) -> String {
        match self {
            ModelSelector::Backbone(f) => f.token().to_string(),
            ModelSelector::Ensemble => "ensemble".to_string(),
        }
    }
}

impl std::str::FromStr for ModelSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "ensemble" {
            return Ok(ModelSelector::Ensemble);
        }
        s.parse::<Family>().map(ModelSelector::Backbone)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Scan the corpus, write `scan_errors.txt`, assign the stratified
/// split, and persist `manifest.csv`. Rerunning with the same config
/// reproduces the files byte for byte.
pub fn cmd_prepare(
    config: &RunConfig,
    strict: bool,
    dump_augmented: Option<(usize, PathBuf)>,
) -> Result<()> {
    config.validate()?;
    config.echo_into_output()?;

    let outcome = scan_dataset(&config.dataset_root)?;
    outcome.write_issue_report(&config.scan_errors_path())?;
    log::info!(
        "scanned {} images across {} classes ({} excluded)",
        outcome.manifest.len(),
        outcome.manifest.class_counts().len(),
        outcome.issues.len()
    );
    let manifest = if strict {
        outcome.into_strict()?
    } else {
        outcome.manifest
    };

    let assigned = assign_stratified(&manifest, config.split.train_fraction, config.seed)?;
    assigned.write_csv(&config.manifest_path())?;
    log::info!("manifest written to {}", config.manifest_path().display());

    if let Some((count, dir)) = dump_augmented {
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let train_records: Vec<_> = assigned.subset(Split::Train);
        for (i, record) in train_records.iter().take(count).enumerate() {
            let img = augment::load_with_rescale(
                &record.path,
                config.augmentation.target_size,
                config.augmentation.rescale,
            )?;
            let seed = seeding::derive_seed(config.seed, "dump_augmented", &[i as u64]);
            let augmented = augment::augment(&img, &config.augmentation, seed);
            let out = dir.join(format!("aug_{i:03}_{}.png", record.class_name));
            augmented
                .to_rgb8()
                .save(&out)
                .map_err(|e| Error::Config(format!("{}: {e}", out.display())))?;
        }
    }
    Ok(())
}

/// Generate the synthetic colored-noise dataset used by smoke tests.
pub fn cmd_fixture(out_dir: &Path, images_per_class: usize, size: usize, seed: u64) -> Result<()> {
    fixture::generate_fixture(out_dir, images_per_class, size, seed)?;
    log::info!(
        "fixture with {} images per class written to {}",
        images_per_class,
        out_dir.display()
    );
    Ok(())
}

fn load_prepared(config: &RunConfig) -> Result<(Manifest, Manifest, LabelCodec)> {
    let path = config.manifest_path();
    if !path.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "manifest {} not found; run `prepare` first",
            path.display()
        )));
    }
    let manifest = Manifest::read_csv(&path)?;
    let codec = manifest.codec();
    let train_records: Vec<_> = manifest.subset(Split::Train).into_iter().cloned().collect();
    let test_records: Vec<_> = manifest.subset(Split::Test).into_iter().cloned().collect();
    if train_records.is_empty() || test_records.is_empty() {
        return Err(Error::MissingPrerequisite(
            "manifest has no train/test assignment; rerun `prepare`".to_string(),
        ));
    }
    let train = Manifest::from_records(train_records, manifest.seed())?;
    let test = Manifest::from_records(test_records, manifest.seed())?;
    Ok((train, test, codec))
}

fn backbone_spec(config: &RunConfig, family: Family) -> BackboneSpec {
    let mut spec = match config.model.variant {
        Variant::TinyRandom => BackboneSpec::tiny(family, config.augmentation.target_size),
        Variant::FullPretrained => BackboneSpec::full(family),
    };
    spec.input_size = config.augmentation.target_size;
    spec
}

fn family_ordinal(family: Family) -> u64 {
    family as u64
}

/// Train one backbone or the ensemble; writes checkpoints and
/// `history.json` under `out/<model>/`.
pub fn cmd_train(config: &RunConfig, selector: ModelSelector) -> Result<()> {
    config.validate()?;
    config.echo_into_output()?;
    let (train_manifest, test_manifest, codec) = load_prepared(config)?;
    let model_name = selector.token();
    let model_dir = config.model_dir(&model_name);
    let ckpt_dir = model_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let stream_seed = seeding::derive_seed(config.seed, "train_stream", &[]);
    let train_stream = BatchStream::train(
        &train_manifest,
        &codec,
        &config.augmentation,
        config.training.batch_size,
        stream_seed,
    )?;
    let val_stream = BatchStream::eval(
        &test_manifest,
        &codec,
        &config.augmentation,
        config.training.batch_size,
    )?;

    let mut training: TrainingConfig = config.training.clone();
    training.seed = config.seed;

    match selector {
        ModelSelector::Backbone(family) => {
            let spec = backbone_spec(config, family);
            let init_seed =
                seeding::derive_seed(config.seed, "model_init", &[family_ordinal(family)]);
            let extractor =
                build_backbone(&spec, init_seed, config.weight_store.as_deref())?;
            let mut model = attach_head(extractor, codec.num_classes(), init_seed)?;
            model.set_freeze_policy(config.model.freeze_policy);

            let sink = CheckpointSink {
                dir: ckpt_dir,
                meta: persist::classifier_meta(model.spec(), &codec),
            };
            let history = train(&mut model, &train_stream, &val_stream, &training, Some(&sink))?;
            write_text(&model_dir.join("history.json"), &history.to_json())?;
            log::info!(
                "{model_name}: best epoch {} (val_loss {:.6})",
                history.best_epoch,
                history
                    .records
                    .get(history.best_epoch.saturating_sub(1))
                    .map(|r| r.val_loss)
                    .unwrap_or(f64::NAN)
            );
        }
        ModelSelector::Ensemble => {
            let mut branches = Vec::new();
            let mut branch_specs = Vec::new();
            for family in &config.model.families {
                let path = config.checkpoint_path(family.token());
                if !path.exists() {
                    return Err(Error::MissingPrerequisite(format!(
                        "branch checkpoint {} not found; train {} first",
                        path.display(),
                        family.token()
                    )));
                }
                let (loaded, branch_codec) = persist::load_model(&path)?;
                if branch_codec != codec {
                    return Err(Error::Config(format!(
                        "branch {} was trained with different classes",
                        family.token()
                    )));
                }
                match loaded {
                    LoadedModel::Classifier(classifier) => {
                        branch_specs.push(classifier.spec().clone());
                        branches.push(classifier.into_extractor());
                    }
                    LoadedModel::Ensemble(_) => {
                        return Err(Error::Config(format!(
                            "{} is an ensemble checkpoint, expected a backbone",
                            path.display()
                        )));
                    }
                }
            }
            let spec = EnsembleSpec::new(
                branch_specs,
                config.ensemble.dense_widths.clone(),
                codec.num_classes(),
                config.ensemble.branch_trainable,
            )?;
            let fusion_seed = seeding::derive_seed(config.seed, "ensemble_init", &[]);
            let mut model = build_ensemble(branches, &spec, fusion_seed)?;

            let sink = CheckpointSink {
                dir: ckpt_dir,
                meta: persist::ensemble_meta(&model.spec, &codec),
            };
            let history = train(&mut model, &train_stream, &val_stream, &training, Some(&sink))?;
            write_text(&model_dir.join("history.json"), &history.to_json())?;
            write_text(
                &model_dir.join("ensemble.json"),
                &serde_json::to_string_pretty(&model.topology_json()).expect("topology serializes"),
            )?;
            log::info!("{model_name}: best epoch {}", history.best_epoch);
        }
    }
    Ok(())
}

fn report_paths(model_dir: &Path) -> (PathBuf, PathBuf, PathBuf) {
    (
        model_dir.join("report.json"),
        model_dir.join("report.csv"),
        model_dir.join("plots"),
    )
}

fn write_report_files(report: &EvaluationReport, model_dir: &Path) -> Result<()> {
    let (json_path, csv_path, plots_dir) = report_paths(model_dir);
    write_text(&json_path, &report.to_json())?;
    write_text(&csv_path, &report.to_table_csv())?;
    for class in &report.classes {
        if let Some(csv) = report.roc_csv(class) {
            write_text(&model_dir.join(format!("roc_{class}.csv")), &csv)?;
        }
        if let Some(csv) = report.pr_csv(class) {
            write_text(&model_dir.join(format!("pr_{class}.csv")), &csv)?;
        }
    }
    plot::render_all(report, &plots_dir)
}

/// Evaluate a trained model on the held-out split, or re-render plots
/// from an existing `report.json` with `replot`.
pub fn cmd_evaluate(config: &RunConfig, selector: ModelSelector, replot: bool) -> Result<()> {
    let model_name = selector.token();
    let model_dir = config.model_dir(&model_name);
    let (json_path, _, plots_dir) = report_paths(&model_dir);

    if replot {
        if !json_path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "{} not found; evaluate first",
                json_path.display()
            )));
        }
        let text = std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let report = EvaluationReport::from_json(&text)?;
        return plot::render_all(&report, &plots_dir);
    }

    let ckpt_path = config.checkpoint_path(&model_name);
    if !ckpt_path.exists() {
        return Err(Error::MissingCheckpoint(ckpt_path));
    }
    let (model, codec) = persist::load_model(&ckpt_path)?;
    let (_, test_manifest, manifest_codec) = load_prepared(config)?;
    if manifest_codec != codec {
        return Err(Error::Config(
            "manifest classes differ from the checkpoint's label codec".to_string(),
        ));
    }
    let stream = BatchStream::eval(
        &test_manifest,
        &codec,
        &config.augmentation,
        config.training.batch_size,
    )?;
    let report = evaluate(|batch| model.predict_proba(batch), &stream, &codec)?;
    write_report_files(&report, &model_dir)?;
    log::info!(
        "{model_name}: accuracy {:.4}, macro precision {:.4}",
        report.accuracy,
        report.macro_avg.precision
    );
    Ok(())
}

fn parse_class(codec: &LabelCodec, raw: &str) -> Result<usize> {
    if let Ok(index) = raw.parse::<usize>() {
        if index >= codec.num_classes() {
            return Err(Error::IndexOutOfRange {
                index,
                num_classes: codec.num_classes(),
            });
        }
        return Ok(index);
    }
    codec.index_of(raw)
}

/// Explain one image: surrogate weights to `explanation.json`, tinted
/// overlay PNG alongside. The class defaults to the model's prediction.
pub fn cmd_explain(
    config: &RunConfig,
    image_path: &Path,
    selector: ModelSelector,
    class: Option<&str>,
) -> Result<()> {
    let model_name = selector.token();
    let ckpt_path = config.checkpoint_path(&model_name);
    if !ckpt_path.exists() {
        return Err(Error::MissingCheckpoint(ckpt_path));
    }
    let (model, codec) = persist::load_model(&ckpt_path)?;
    let img = augment::load_with_rescale(
        image_path,
        model.input_size(),
        config.augmentation.rescale,
    )?;

    let predict = |batch: &Array4<f32>| -> Result<Array2<f32>> { model.predict_proba(batch) };
    let target_class = match class {
        Some(raw) => parse_class(&codec, raw)?,
        None => {
            let batch = img.data.clone().insert_axis(ndarray::Axis(0));
            let probs = predict(&batch)?;
            crate::train::argmax(probs.row(0).iter().copied())
        }
    };

    let explanation = lime::explain(&predict, &img, target_class, &config.explain)?;
    let spmap = lime::segment(
        &img,
        config.explain.n_segments,
        config.explain.seed,
        config.explain.segmenter,
    )?;
    let overlay = lime::render_overlay(&img, &spmap, &explanation, config.explain.top_k);

    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".to_string());
    let out_dir = config.model_dir(&model_name).join("explanations");
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let class_name = codec.decode(target_class)?;
    let json_path = out_dir.join(format!("{stem}_{class_name}.explanation.json"));
    write_text(&json_path, &explanation.to_json())?;
    let overlay_path = out_dir.join(format!("{stem}_{class_name}.overlay.png"));
    overlay
        .to_rgb8()
        .save(&overlay_path)
        .map_err(|e| Error::Config(format!("{}: {e}", overlay_path.display())))?;
    log::info!(
        "explained {} for class {class_name}: r2 {:.4}, artifacts in {}",
        image_path.display(),
        explanation.local_fidelity_r2,
        out_dir.display()
    );
    Ok(())
}

/// Collect every `out/<model>/report.json` into `comparison.csv`.
pub fn cmd_report(config: &RunConfig) -> Result<()> {
    let mut entries = Vec::new();
    let read_dir = std::fs::read_dir(&config.output_dir)
        .map_err(|e| Error::io(&config.output_dir, e))?;
    let mut dirs: Vec<PathBuf> = read_dir
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    for dir in dirs {
        let report = dir.join("report.json");
        if report.exists() {
            let model = dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            entries.push((model, report));
        }
    }
    if entries.is_empty() {
        return Err(Error::MissingPrerequisite(format!(
            "no report.json found under {}; run `evaluate` first",
            config.output_dir.display()
        )));
    }
    let table = ComparisonTable::from_report_files(&entries)?;
    table.write_csv(&config.output_dir.join("comparison.csv"))?;
    log::info!("comparison.csv covers {} models", table.rows.len());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn selector_parses_families_and_ensemble() {
        assert_eq!(
            "mobilenet_v2".parse::<ModelSelector>().unwrap(),
            ModelSelector::Backbone(Family::MobilenetV2)
        );
        assert_eq!(
            "ensemble".parse::<ModelSelector>().unwrap(),
            ModelSelector::Ensemble
        );
        assert!("resnet50".parse::<ModelSelector>().is_err());
    }

    #[test]
    fn class_parsing_validates_range_and_names() {
        let codec = LabelCodec::from_class_names(["Cyst", "Normal", "Stone", "Tumor"]);
        assert_eq!(parse_class(&codec, "2").unwrap(), 2);
        assert_eq!(parse_class(&codec, "Stone").unwrap(), 2);
        assert!(matches!(
            parse_class(&codec, "7"),
            Err(Error::IndexOutOfRange { .. })
        ));
        assert!(parse_class(&codec, "Liver").is_err());
    }
}

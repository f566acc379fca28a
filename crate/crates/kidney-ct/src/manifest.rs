//! Dataset manifest: corpus scanning, label encoding, and the stratified
//! train/test split.
//!
//! The input layout is one subdirectory per class, each holding JPEG/PNG
//! files. Scanning produces a [`Manifest`] ordered lexicographically by
//! path, so two scans of the same tree serialize byte-for-byte identically
//! no matter how the filesystem enumerates entries.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

const IMAGE_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

/// Split assignment of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
            Split::Unassigned => write!(f, "unassigned"),
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Config(format!("unknown split value: {other}"))),
        }
    }
}

/// One image in the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub path: PathBuf,
    pub class_name: String,
    pub class_index: usize,
    pub split: Split,
}

/// Bidirectional class-name <-> index mapping. Classes are kept sorted
/// lexicographically so the encoding is reproducible across machines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCodec {
    classes: Vec<String>,
}

impl LabelCodec {
    pub fn from_class_names<I, S>(names: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut classes: Vec<String> = names.into_iter().map(Into::into).collect();
        classes.sort();
        classes.dedup();
        LabelCodec { classes }
    }

    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(name))
            .map_err(|_| Error::UnknownClass(name.to_string()))
    }

    pub fn decode(&self, index: usize) -> Result<&str> {
        self.classes
            .get(index)
            .map(String::as_str)
            .ok_or(Error::IndexOutOfRange {
                index,
                num_classes: self.classes.len(),
            })
    }
}

/// How a split was assigned; kept as manifest metadata so alternative
/// strategies can be added without changing the CSV schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStrategy {
    pub kind: String,
    pub train_fraction: f64,
    pub seed: u64,
}

/// Ordered catalog of the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    records: Vec<SampleRecord>,
    class_counts: BTreeMap<String, usize>,
    seed: u64,
    #[serde(default)]
    split_strategy: Option<SplitStrategy>,
}

impl Manifest {
    /// Build a manifest from records. Records are re-sorted by path and
    /// class indices are validated against the lexicographic codec.
    pub fn from_records(mut records: Vec<SampleRecord>, seed: u64) -> Result<Self> {
        records.sort_by(|a, b| a.path.cmp(&b.path));
        let codec = LabelCodec::from_class_names(records.iter().map(|r| r.class_name.clone()));
        let mut class_counts = BTreeMap::new();
        for record in &records {
            let expected = codec.index_of(&record.class_name)?;
            if record.class_index != expected {
                return Err(Error::Config(format!(
                    "record {} carries class_index {} but codec assigns {} to {}",
                    record.path.display(),
                    record.class_index,
                    expected,
                    record.class_name
                )));
            }
            *class_counts.entry(record.class_name.clone()).or_insert(0) += 1;
        }
        Ok(Manifest {
            records,
            class_counts,
            seed,
            split_strategy: None,
        })
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> &BTreeMap<String, usize> {
        &self.class_counts
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn split_strategy(&self) -> Option<&SplitStrategy> {
        self.split_strategy.as_ref()
    }

    pub fn codec(&self) -> LabelCodec {
        LabelCodec::from_class_names(self.class_counts.keys().cloned())
    }

    /// Records carrying the given split assignment.
    pub fn subset(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        writer
            .write_record(["path", "class_name", "class_index", "split"])
            .map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
        for record in &self.records {
            writer
                .write_record([
                    record.path.to_string_lossy().as_ref(),
                    record.class_name.as_str(),
                    record.class_index.to_string().as_str(),
                    record.split.to_string().as_str(),
                ])
                .map_err(|e| Error::Csv {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::Csv {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            if row.len() != 4 {
                return Err(Error::Csv {
                    path: path.to_path_buf(),
                    reason: format!("expected 4 columns, got {}", row.len()),
                });
            }
            records.push(SampleRecord {
                path: PathBuf::from(&row[0]),
                class_name: row[1].to_string(),
                class_index: row[2].parse().map_err(|_| Error::Csv {
                    path: path.to_path_buf(),
                    reason: format!("bad class_index: {}", &row[2]),
                })?,
                split: row[3].parse()?,
            });
        }
        Manifest::from_records(records, 0)
    }
}

/// A file skipped during scanning, with the reason.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanIssue {
    pub path: PathBuf,
    pub reason: String,
}

/// Result of a corpus scan: the manifest plus any excluded files.
#[derive(Debug, Clone)]
pub struct ScanOutcome {
    pub manifest: Manifest,
    pub issues: Vec<ScanIssue>,
}

impl ScanOutcome {
    /// All-or-nothing mode: any excluded file fails the scan.
    pub fn into_strict(self) -> Result<Manifest> {
        if let Some(issue) = self.issues.first() {
            return Err(Error::UnreadableImage {
                path: issue.path.clone(),
                reason: issue.reason.clone(),
            });
        }
        Ok(self.manifest)
    }

    pub fn write_issue_report(&self, path: &Path) -> Result<()> {
        let mut lines = String::new();
        for issue in &self.issues {
            lines.push_str(&format!("{}\t{}\n", issue.path.display(), issue.reason));
        }
        fs::write(path, lines).map_err(|e| Error::io(path, e))
    }
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// Cheap header probe: confirms the file decodes far enough to yield
/// dimensions without reading the whole image.
fn probe_image(path: &Path) -> std::result::Result<(), String> {
    image::ImageReader::open(path)
        .map_err(|e| e.to_string())?
        .with_guessed_format()
        .map_err(|e| e.to_string())?
        .into_dimensions()
        .map(|_| ())
        .map_err(|e| e.to_string())
}

/// Scan a class-per-directory tree into a manifest. Corrupt images are
/// excluded and reported in the outcome rather than aborting the scan;
/// a class directory with no usable image at all is rejected.
pub fn scan_dataset(root: &Path) -> Result<ScanOutcome> {
    if !root.is_dir() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let mut class_dirs: Vec<PathBuf> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }

    let class_names: Vec<String> = class_dirs
        .iter()
        .map(|d| {
            d.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default()
        })
        .collect();
    let codec = LabelCodec::from_class_names(class_names.iter().cloned());

    let mut records = Vec::new();
    let mut issues = Vec::new();
    for (dir, class_name) in class_dirs.iter().zip(&class_names) {
        let class_index = codec.index_of(class_name)?;
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && has_image_extension(p))
            .collect();
        files.sort();
        let mut kept = 0usize;
        for file in files {
            match probe_image(&file) {
                Ok(()) => {
                    kept += 1;
                    records.push(SampleRecord {
                        path: file,
                        class_name: class_name.clone(),
                        class_index,
                        split: Split::Unassigned,
                    });
                }
                Err(reason) => issues.push(ScanIssue { path: file, reason }),
            }
        }
        if kept == 0 {
            return Err(Error::EmptyClass(dir.clone()));
        }
    }

    Ok(ScanOutcome {
        manifest: Manifest::from_records(records, 0)?,
        issues,
    })
}

/// One-hot encoding of a class index.
pub fn one_hot(class_index: usize, num_classes: usize) -> Result<Vec<f32>> {
    if class_index >= num_classes {
        return Err(Error::IndexOutOfRange {
            index: class_index,
            num_classes,
        });
    }
    let mut v = vec![0.0; num_classes];
    v[class_index] = 1.0;
    Ok(v)
}

/// Per-class train counts: round(fraction * count), ties to even.
fn train_count(count: usize, fraction: f64) -> usize {
    (fraction * count as f64).round_ties_even() as usize
}

/// Deterministic stratified split. Per class, `round(fraction * count)`
/// records go to train and the remainder to test; the within-class
/// assignment is a seeded shuffle, so one seed always reproduces the same
/// partition.
pub fn stratified_split(
    manifest: &Manifest,
    train_fraction: f64,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    let assigned = assign_stratified(manifest, train_fraction, seed)?;
    let train: Vec<SampleRecord> = assigned
        .records
        .iter()
        .filter(|r| r.split == Split::Train)
        .cloned()
        .collect();
    let test: Vec<SampleRecord> = assigned
        .records
        .iter()
        .filter(|r| r.split == Split::Test)
        .cloned()
        .collect();
    let mut train = Manifest::from_records(train, seed)?;
    let mut test = Manifest::from_records(test, seed)?;
    train.split_strategy = assigned.split_strategy.clone();
    test.split_strategy = assigned.split_strategy;
    Ok((train, test))
}

/// Like [`stratified_split`] but returns one manifest with the split
/// column populated, which is what `manifest.csv` persists.
pub fn assign_stratified(manifest: &Manifest, train_fraction: f64, seed: u64) -> Result<Manifest> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train_fraction must lie in (0,1), got {train_fraction}"
        )));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, record) in manifest.records.iter().enumerate() {
        by_class.entry(&record.class_name).or_default().push(i);
    }

    let mut records = manifest.records.clone();
    for (class, indices) in &by_class {
        let count = indices.len();
        let n_train = train_count(count, train_fraction);
        if n_train == 0 {
            return Err(Error::DegenerateClass {
                class: class.to_string(),
                side: "train",
                fraction: train_fraction,
            });
        }
        if n_train == count {
            return Err(Error::DegenerateClass {
                class: class.to_string(),
                side: "test",
                fraction: train_fraction,
            });
        }
        let mut shuffled = indices.clone();
        let mut rng = seeding::rng_for(seed, "stratified_split", &[class_hash(class)]);
        shuffled.shuffle(&mut rng);
        for (rank, record_index) in shuffled.into_iter().enumerate() {
            records[record_index].split = if rank < n_train {
                Split::Train
            } else {
                Split::Test
            };
        }
    }

    let mut out = Manifest::from_records(records, seed)?;
    out.split_strategy = Some(SplitStrategy {
        kind: "stratified".to_string(),
        train_fraction,
        seed,
    });
    Ok(out)
}

fn class_hash(class: &str) -> u64 {
    seeding::derive_seed(0, class, &[])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs::File;
    use std::io::Write;

    fn write_png(path: &Path, w: u32, h: u32) {
        let img = image::RgbImage::from_fn(w, h, |x, y| image::Rgb([x as u8, y as u8, 0]));
        img.save(path).unwrap();
    }

    fn synthetic_manifest(counts: &[(&str, usize)]) -> Manifest {
        let codec = LabelCodec::from_class_names(counts.iter().map(|(c, _)| c.to_string()));
        let mut records = Vec::new();
        for (class, n) in counts {
            let idx = codec.index_of(class).unwrap();
            for i in 0..*n {
                records.push(SampleRecord {
                    path: PathBuf::from(format!("{class}/{i:05}.png")),
                    class_name: class.to_string(),
                    class_index: idx,
                    split: Split::Unassigned,
                });
            }
        }
        Manifest::from_records(records, 0).unwrap()
    }

    #[test]
    fn scan_single_class_single_image() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("A")).unwrap();
        write_png(&dir.path().join("A/im.png"), 8, 8);
        let outcome = scan_dataset(dir.path()).unwrap();
        assert_eq!(outcome.manifest.len(), 1);
        assert_eq!(outcome.manifest.class_counts()["A"], 1);
        assert!(outcome.issues.is_empty());
    }

    #[test]
    fn scan_orders_lexicographically_regardless_of_creation_order() {
        let dir = tempfile::tempdir().unwrap();
        // create B before A on purpose
        fs::create_dir(dir.path().join("B")).unwrap();
        write_png(&dir.path().join("B/1.png"), 4, 4);
        write_png(&dir.path().join("B/0.png"), 4, 4);
        fs::create_dir(dir.path().join("A")).unwrap();
        write_png(&dir.path().join("A/2.png"), 4, 4);
        write_png(&dir.path().join("A/0.png"), 4, 4);
        write_png(&dir.path().join("A/1.png"), 4, 4);

        let outcome = scan_dataset(dir.path()).unwrap();
        let codec = outcome.manifest.codec();
        assert_eq!(codec.classes(), &["A".to_string(), "B".to_string()]);
        let paths: Vec<_> = outcome.manifest.records().iter().map(|r| &r.path).collect();
        let mut sorted = paths.clone();
        sorted.sort();
        assert_eq!(paths, sorted);
        assert_eq!(outcome.manifest.records()[0].class_index, 0);
        assert_eq!(outcome.manifest.records()[4].class_index, 1);
    }

    #[test]
    fn scan_missing_root_and_empty_class() {
        let err = scan_dataset(Path::new("/nonexistent/kidney")).unwrap_err();
        assert!(matches!(err, Error::MissingRoot(_)));

        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("A")).unwrap();
        write_png(&dir.path().join("A/ok.png"), 4, 4);
        fs::create_dir(dir.path().join("B")).unwrap();
        let err = scan_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::EmptyClass(_)));
    }

    #[test]
    fn scan_excludes_unreadable_image_with_report() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("A")).unwrap();
        write_png(&dir.path().join("A/good.png"), 4, 4);
        let mut f = File::create(dir.path().join("A/bad.png")).unwrap();
        f.write_all(b"not a png at all").unwrap();

        let outcome = scan_dataset(dir.path()).unwrap();
        assert_eq!(outcome.manifest.len(), 1);
        assert_eq!(outcome.issues.len(), 1);
        assert!(outcome.issues[0].path.ends_with("bad.png"));
        assert!(outcome.clone().into_strict().is_err());
    }

    #[test]
    fn scan_twice_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        for class in ["Cyst", "Normal"] {
            fs::create_dir(dir.path().join(class)).unwrap();
            for i in 0..3 {
                write_png(&dir.path().join(class).join(format!("{i}.png")), 4, 4);
            }
        }
        let a = scan_dataset(dir.path()).unwrap().manifest;
        let b = scan_dataset(dir.path()).unwrap().manifest;
        let csv_a = dir.path().join("a.csv");
        let csv_b = dir.path().join("b.csv");
        a.write_csv(&csv_a).unwrap();
        b.write_csv(&csv_b).unwrap();
        assert_eq!(fs::read(csv_a).unwrap(), fs::read(csv_b).unwrap());
    }

    #[test]
    fn one_hot_examples() {
        assert_eq!(one_hot(2, 4).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(one_hot(0, 1).unwrap(), vec![1.0]);
        assert!(matches!(
            one_hot(4, 4),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn one_hot_argmax_round_trip_exhaustive() {
        for k in 1..=8usize {
            for i in 0..k {
                let v = one_hot(i, k).unwrap();
                let argmax = v
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(argmax, i);
                assert_eq!(v.iter().sum::<f32>(), 1.0);
            }
        }
    }

    #[test]
    fn codec_round_trip() {
        let codec = LabelCodec::from_class_names(["Stone", "Cyst", "Tumor", "Normal"]);
        assert_eq!(codec.classes(), &["Cyst", "Normal", "Stone", "Tumor"]);
        for i in 0..codec.num_classes() {
            let name = codec.decode(i).unwrap();
            assert_eq!(codec.index_of(name).unwrap(), i);
        }
        assert!(codec.index_of("Missing").is_err());
    }

    #[test]
    fn split_exact_arithmetic_100_records() {
        let manifest = synthetic_manifest(&[("a", 25), ("b", 25), ("c", 25), ("d", 25)]);
        let (train, test) = stratified_split(&manifest, 0.8, 7).unwrap();
        assert_eq!(train.len(), 80);
        assert_eq!(test.len(), 20);
        for class in ["a", "b", "c", "d"] {
            assert_eq!(train.class_counts()[class], 20);
            assert_eq!(test.class_counts()[class], 5);
        }
    }

    #[test]
    fn split_paper_scale_proportions() {
        let manifest = synthetic_manifest(&[
            ("Cyst", 3709),
            ("Normal", 5077),
            ("Stone", 1377),
            ("Tumor", 2283),
        ]);
        assert_eq!(manifest.len(), 12_446);
        let (train, test) = stratified_split(&manifest, 0.8, 42).unwrap();
        assert_eq!(train.len() + test.len(), 12_446);
        for (class, count) in manifest.class_counts() {
            let expected = (0.8 * *count as f64).round_ties_even();
            let got = train.class_counts()[class] as f64;
            assert!((got - expected).abs() <= 1.0, "{class}: {got} vs {expected}");
        }
    }

    #[test]
    fn split_determinism_and_seed_sensitivity() {
        let manifest = synthetic_manifest(&[("a", 25), ("b", 25), ("c", 25), ("d", 25)]);
        let (t7a, _) = stratified_split(&manifest, 0.8, 7).unwrap();
        let (t7b, _) = stratified_split(&manifest, 0.8, 7).unwrap();
        let (t8, _) = stratified_split(&manifest, 0.8, 8).unwrap();
        assert_eq!(t7a, t7b);
        assert_ne!(
            t7a.records()
                .iter()
                .map(|r| r.path.clone())
                .collect::<Vec<_>>(),
            t8.records()
                .iter()
                .map(|r| r.path.clone())
                .collect::<Vec<_>>()
        );
    }

    #[test]
    fn split_partition_property_random_manifests() {
        for trial in 0..50u64 {
            let mut rng = seeding::rng_for(trial, "partition_test", &[]);
            let k = 2 + (rand::Rng::gen::<u64>(&mut rng) % 4) as usize;
            let counts: Vec<(String, usize)> = (0..k)
                .map(|c| {
                    (
                        format!("class{c}"),
                        3 + (rand::Rng::gen::<u64>(&mut rng) % 40) as usize,
                    )
                })
                .collect();
            let refs: Vec<(&str, usize)> = counts.iter().map(|(c, n)| (c.as_str(), *n)).collect();
            let manifest = synthetic_manifest(&refs);
            let (train, test) = stratified_split(&manifest, 0.8, trial).unwrap();

            let mut union: Vec<&PathBuf> = train
                .records()
                .iter()
                .chain(test.records())
                .map(|r| &r.path)
                .collect();
            union.sort();
            let mut all: Vec<&PathBuf> = manifest.records().iter().map(|r| &r.path).collect();
            all.sort();
            assert_eq!(union, all);
            let train_set: std::collections::BTreeSet<_> =
                train.records().iter().map(|r| &r.path).collect();
            assert!(test.records().iter().all(|r| !train_set.contains(&r.path)));
        }
    }

    #[test]
    fn split_rejects_degenerate_class() {
        let manifest = synthetic_manifest(&[("a", 25), ("tiny", 2)]);
        // fraction high enough that "tiny" would keep both samples in train
        let err = stratified_split(&manifest, 0.95, 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateClass { .. }));
    }

    #[test]
    fn csv_round_trip() {
        let manifest = synthetic_manifest(&[("x", 3), ("y", 2)]);
        let assigned = assign_stratified(&manifest, 0.6, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        assigned.write_csv(&path).unwrap();
        let loaded = Manifest::read_csv(&path).unwrap();
        assert_eq!(loaded.records(), assigned.records());
    }
}

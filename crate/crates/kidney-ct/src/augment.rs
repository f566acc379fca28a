//! Image loading and the seeded augmentation pipeline.
//!
//! All geometry is resampled bilinearly with half-pixel centers; rotation,
//! zoom and shift compose into a single affine resample (fill value 0,
//! matching CT background), while flips are exact index mirrors applied
//! before the affine step. Given the same image, config and seed the
//! output is bit-identical, which is what makes training reproducible.

use std::path::Path;

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{one_hot, LabelCodec, Manifest, SampleRecord};
use crate::seeding;

/// Geometric + intensity transform ranges. Magnitude defaults are config,
/// not code: the pipeline only reads what this struct carries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationConfig {
    /// (height, width) every image is resized to before anything else.
    pub target_size: (usize, usize),
    pub rotation_range_deg: f64,
    /// Zoom factor drawn from [1 - zoom_range, 1 + zoom_range].
    pub zoom_range: f64,
    /// Horizontal shift drawn from [-width_shift, width_shift] * width.
    pub width_shift: f64,
    /// Vertical shift drawn from [-height_shift, height_shift] * height.
    pub height_shift: f64,
    pub horizontal_flip: bool,
    pub vertical_flip: bool,
    /// Multiplicative intensity factor applied at load time.
    pub rescale: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            target_size: (224, 224),
            rotation_range_deg: 20.0,
            zoom_range: 0.15,
            width_shift: 0.1,
            height_shift: 0.1,
            horizontal_flip: true,
            vertical_flip: true,
            rescale: 1.0 / 255.0,
        }
    }
}

impl AugmentationConfig {
    /// 128x128 preset; everything else as the default.
    pub fn preset_128() -> Self {
        AugmentationConfig {
            target_size: (128, 128),
            ..Default::default()
        }
    }

    /// No-op transform set at the given size, for eval-style streams.
    pub fn identity(target_size: (usize, usize)) -> Self {
        AugmentationConfig {
            target_size,
            rotation_range_deg: 0.0,
            zoom_range: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            horizontal_flip: false,
            vertical_flip: false,
            rescale: 1.0 / 255.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.target_size;
        if h < 32 || w < 32 {
            return Err(Error::Config(format!(
                "target_size components must be >= 32, got {h}x{w}"
            )));
        }
        if !(0.0..=180.0).contains(&self.rotation_range_deg) {
            return Err(Error::Config(format!(
                "rotation_range_deg must lie in [0, 180], got {}",
                self.rotation_range_deg
            )));
        }
        for (name, v) in [
            ("zoom_range", self.zoom_range),
            ("width_shift", self.width_shift),
            ("height_shift", self.height_shift),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 0.5], got {v}")));
            }
        }
        if self.rescale <= 0.0 {
            return Err(Error::Config(format!(
                "rescale must be positive, got {}",
                self.rescale
            )));
        }
        Ok(())
    }
}

/// H x W x 3 float image, intensities in [0, 1] after rescale.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub data: Array3<f32>,
}

impl ImageTensor {
    pub fn new(data: Array3<f32>) -> Self {
        debug_assert_eq!(data.shape()[2], 3, "ImageTensor is always 3-channel");
        debug_assert!(data.iter().all(|v| v.is_finite()));
        ImageTensor { data }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    /// Clamp to [0,1] and quantize to 8-bit for writing to disk.
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                (self.data[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Decode an image file, replicate grayscale to 3 channels, resize
/// bilinearly to `target_size`, and rescale intensities to [0, 1].
pub fn load_and_resize(path: &Path, target_size: (usize, usize)) -> Result<ImageTensor> {
    load_with_rescale(path, target_size, 1.0 / 255.0)
}

pub fn load_with_rescale(
    path: &Path,
    target_size: (usize, usize),
    rescale: f64,
) -> Result<ImageTensor> {
    let decoded = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|source| Error::DecodeError {
            path: path.to_path_buf(),
            source,
        })?;
    // RGB conversion replicates grayscale channels.
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let mut raw = Array3::<f32>::zeros((h as usize, w as usize, 3));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            raw[[y as usize, x as usize, c]] = f32::from(pixel[c]) * rescale as f32;
        }
    }
    Ok(ImageTensor::new(resize_bilinear(&raw, target_size)))
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(src: &Array3<f32>, target_size: (usize, usize)) -> Array3<f32> {
    let (in_h, in_w, channels) = (src.shape()[0], src.shape()[1], src.shape()[2]);
    let (out_h, out_w) = target_size;
    if (in_h, in_w) == (out_h, out_w) {
        return src.clone();
    }
    let mut out = Array3::<f32>::zeros((out_h, out_w, channels));
    let scale_y = in_h as f64 / out_h as f64;
    let scale_x = in_w as f64 / out_w as f64;
    for r in 0..out_h {
        let sy = (r as f64 + 0.5) * scale_y - 0.5;
        let y0 = sy.floor();
        let fy = (sy - y0) as f32;
        let y0c = (y0 as isize).clamp(0, in_h as isize - 1) as usize;
        let y1c = (y0 as isize + 1).clamp(0, in_h as isize - 1) as usize;
        for c in 0..out_w {
            let sx = (c as f64 + 0.5) * scale_x - 0.5;
            let x0 = sx.floor();
            let fx = (sx - x0) as f32;
            let x0c = (x0 as isize).clamp(0, in_w as isize - 1) as usize;
            let x1c = (x0 as isize + 1).clamp(0, in_w as isize - 1) as usize;
            for ch in 0..channels {
                let top = src[[y0c, x0c, ch]] * (1.0 - fx) + src[[y0c, x1c, ch]] * fx;
                let bottom = src[[y1c, x0c, ch]] * (1.0 - fx) + src[[y1c, x1c, ch]] * fx;
                out[[r, c, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Exact horizontal mirror (column reversal).
pub fn flip_horizontal(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut out = img.data.clone();
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out[[r, c, ch]] = img.data[[r, w - 1 - c, ch]];
            }
        }
    }
    ImageTensor::new(out)
}

/// Exact vertical mirror (row reversal).
pub fn flip_vertical(img: &ImageTensor) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut out = img.data.clone();
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                out[[r, c, ch]] = img.data[[h - 1 - r, c, ch]];
            }
        }
    }
    ImageTensor::new(out)
}

/// Concrete transform parameters for one sample. `augment` draws these
/// from the configured ranges; tests can apply exact values directly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineParams {
    pub rotation_deg: f64,
    pub zoom: f64,
    /// Shift in pixels along x (columns) and y (rows).
    pub shift_x: f64,
    pub shift_y: f64,
    pub hflip: bool,
    pub vflip: bool,
}

impl AffineParams {
    pub fn identity() -> Self {
        AffineParams {
            rotation_deg: 0.0,
            zoom: 1.0,
            shift_x: 0.0,
            shift_y: 0.0,
            hflip: false,
            vflip: false,
        }
    }

    fn is_identity_affine(&self) -> bool {
        self.rotation_deg == 0.0 && self.zoom == 1.0 && self.shift_x == 0.0 && self.shift_y == 0.0
    }
}

/// Draw transform parameters from the configured ranges. Draw order is
/// fixed (rotation, zoom, shift x, shift y, hflip, vflip); disabled
/// transforms are skipped so they do not consume randomness.
pub fn draw_params<R: Rng>(cfg: &AugmentationConfig, rng: &mut R) -> AffineParams {
    let (h, w) = cfg.target_size;
    let mut params = AffineParams::identity();
    if cfg.rotation_range_deg > 0.0 {
        params.rotation_deg = rng.gen_range(-cfg.rotation_range_deg..=cfg.rotation_range_deg);
    }
    if cfg.zoom_range > 0.0 {
        params.zoom = 1.0 + rng.gen_range(-cfg.zoom_range..=cfg.zoom_range);
    }
    if cfg.width_shift > 0.0 {
        params.shift_x = rng.gen_range(-cfg.width_shift..=cfg.width_shift) * w as f64;
    }
    if cfg.height_shift > 0.0 {
        params.shift_y = rng.gen_range(-cfg.height_shift..=cfg.height_shift) * h as f64;
    }
    if cfg.horizontal_flip {
        params.hflip = rng.gen_bool(0.5);
    }
    if cfg.vertical_flip {
        params.vflip = rng.gen_bool(0.5);
    }
    params
}

/// Apply explicit transform parameters: flips first (exact mirrors), then
/// one bilinear resample of the composed rotate-zoom-shift map about the
/// image center. The forward map is `p_out = R(theta) * zoom * p_in + t`;
/// out-of-bounds samples fill with 0.
pub fn apply_affine(img: &ImageTensor, params: &AffineParams) -> ImageTensor {
    let mut current = img.clone();
    if params.hflip {
        current = flip_horizontal(&current);
    }
    if params.vflip {
        current = flip_vertical(&current);
    }
    if params.is_identity_affine() {
        return current;
    }

    let (h, w) = (current.height(), current.width());
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let theta = params.rotation_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let inv_zoom = 1.0 / params.zoom;

    let mut out = Array3::<f32>::zeros((h, w, 3));
    for r in 0..h {
        for c in 0..w {
            // inverse map: undo shift, rotation, then zoom
            let dx = c as f64 - cx - params.shift_x;
            let dy = r as f64 - cy - params.shift_y;
            let rx = cos_t * dx + sin_t * dy;
            let ry = -sin_t * dx + cos_t * dy;
            let sx = rx * inv_zoom + cx;
            let sy = ry * inv_zoom + cy;

            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = (sx - x0) as f32;
            let fy = (sy - y0) as f32;
            let x0 = x0 as isize;
            let y0 = y0 as isize;

            let sample = |yy: isize, xx: isize, ch: usize| -> f32 {
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    0.0
                } else {
                    current.data[[yy as usize, xx as usize, ch]]
                }
            };
            for ch in 0..3 {
                let top = sample(y0, x0, ch) * (1.0 - fx) + sample(y0, x0 + 1, ch) * fx;
                let bottom =
                    sample(y0 + 1, x0, ch) * (1.0 - fx) + sample(y0 + 1, x0 + 1, ch) * fx;
                out[[r, c, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    ImageTensor::new(out)
}

/// Seeded augmentation of one image: draw parameters, apply them.
pub fn augment(img: &ImageTensor, cfg: &AugmentationConfig, rng_seed: u64) -> ImageTensor {
    debug_assert_eq!((img.height(), img.width()), cfg.target_size);
    let mut rng = seeding::rng_for(rng_seed, "augment_params", &[]);
    let params = draw_params(cfg, &mut rng);
    apply_affine(img, &params)
}

/// One (images, one-hot labels) pair. Images are NHWC.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Array4<f32>,
    pub labels: Array2<f32>,
    /// Manifest indices of the samples in batch order.
    pub sample_indices: Vec<usize>,
}

/// Re-iterable batched view of a manifest. Train streams shuffle with a
/// per-epoch seeded permutation and augment each sample with a seed
/// derived from (stream seed, epoch, record ordinal); eval streams only
/// load, resize and rescale, so two iterations are identical.
pub struct BatchStream {
    records: Vec<SampleRecord>,
    num_classes: usize,
    cfg: AugmentationConfig,
    batch_size: usize,
    shuffle: bool,
    augmented: bool,
    seed: u64,
}

impl BatchStream {
    pub fn train(
        manifest: &Manifest,
        codec: &LabelCodec,
        cfg: &AugmentationConfig,
        batch_size: usize,
        seed: u64,
    ) -> Result<Self> {
        Self::new(manifest, codec, cfg, batch_size, true, true, seed)
    }

    pub fn eval(
        manifest: &Manifest,
        codec: &LabelCodec,
        cfg: &AugmentationConfig,
        batch_size: usize,
    ) -> Result<Self> {
        Self::new(manifest, codec, cfg, batch_size, false, false, 0)
    }

    fn new(
        manifest: &Manifest,
        codec: &LabelCodec,
        cfg: &AugmentationConfig,
        batch_size: usize,
        shuffle: bool,
        augmented: bool,
        seed: u64,
    ) -> Result<Self> {
        if manifest.is_empty() {
            return Err(Error::Config("stream over an empty manifest".into()));
        }
        if batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        cfg.validate()?;
        for record in manifest.records() {
            if record.class_index >= codec.num_classes() {
                return Err(Error::IndexOutOfRange {
                    index: record.class_index,
                    num_classes: codec.num_classes(),
                });
            }
        }
        Ok(BatchStream {
            records: manifest.records().to_vec(),
            num_classes: codec.num_classes(),
            cfg: cfg.clone(),
            batch_size,
            shuffle,
            augmented,
            seed,
        })
    }

    pub fn num_samples(&self) -> usize {
        self.records.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn target_size(&self) -> (usize, usize) {
        self.cfg.target_size
    }

    pub fn num_batches(&self) -> usize {
        self.records.len().div_ceil(self.batch_size)
    }

    fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.records.len()).collect();
        if self.shuffle {
            let mut rng = seeding::rng_for(self.seed, "epoch_shuffle", &[epoch]);
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        }
        order
    }

    fn load_sample(&self, record_index: usize, epoch: u64) -> Result<ImageTensor> {
        let record = &self.records[record_index];
        let img = load_with_rescale(&record.path, self.cfg.target_size, self.cfg.rescale)?;
        if self.augmented {
            let sample_seed =
                seeding::derive_seed(self.seed, "sample_augment", &[epoch, record_index as u64]);
            Ok(augment(&img, &self.cfg, sample_seed))
        } else {
            Ok(img)
        }
    }

    /// Batches for one epoch, in order. Decode failures surface with the
    /// offending path.
    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Result<Batch>> + '_ {
        let order = self.epoch_order(epoch);
        let (h, w) = self.cfg.target_size;
        let num_classes = self.num_classes;
        let batch_size = self.batch_size;
        (0..self.num_batches()).map(move |b| {
            let chunk: Vec<usize> = order
                [b * batch_size..((b + 1) * batch_size).min(order.len())]
                .to_vec();
            let mut images = Array4::<f32>::zeros((chunk.len(), h, w, 3));
            let mut labels = Array2::<f32>::zeros((chunk.len(), num_classes));
            for (slot, &record_index) in chunk.iter().enumerate() {
                let img = self.load_sample(record_index, epoch)?;
                images
                    .index_axis_mut(ndarray::Axis(0), slot)
                    .assign(&img.data);
                let hot = one_hot(self.records[record_index].class_index, num_classes)?;
                for (k, v) in hot.iter().enumerate() {
                    labels[[slot, k]] = *v;
                }
            }
            Ok(Batch {
                images,
                labels,
                sample_indices: chunk,
            })
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn solid_image(h: usize, w: usize, value: f32) -> ImageTensor {
        ImageTensor::new(Array3::from_elem((h, w, 3), value))
    }

    fn hot_pixel_image(h: usize, w: usize, r: usize, c: usize) -> ImageTensor {
        let mut data = Array3::zeros((h, w, 3));
        for ch in 0..3 {
            data[[r, c, ch]] = 1.0;
        }
        ImageTensor::new(data)
    }

    #[test]
    fn resize_identity_is_exact() {
        let img = hot_pixel_image(40, 40, 3, 7);
        let out = resize_bilinear(&img.data, (40, 40));
        assert_eq!(out, img.data);
    }

    #[test]
    fn resize_2x2_to_4x4_matches_hand_computed_bilinear() {
        // checkerboard: [[1,0],[0,1]]
        let mut src = Array3::zeros((2, 2, 3));
        for ch in 0..3 {
            src[[0, 0, ch]] = 1.0;
            src[[1, 1, ch]] = 1.0;
        }
        let out = resize_bilinear(&src, (4, 4));
        // corners equal source corners
        assert_eq!(out[[0, 0, 0]], 1.0);
        assert_eq!(out[[0, 3, 0]], 0.0);
        assert_eq!(out[[3, 0, 0]], 0.0);
        assert_eq!(out[[3, 3, 0]], 1.0);
        // interior weights, hand computed: out(1,1) samples (0.25, 0.25)
        // => 0.75*0.75*1 + 0.25*0.25*1 = 0.625
        assert!((out[[1, 1, 0]] - 0.625).abs() < 1e-6);
        assert!((out[[2, 2, 0]] - 0.625).abs() < 1e-6);
        // out(1,2) samples (0.25, 0.75) => 0.75*0.25 + 0.25*0.75 = 0.375
        assert!((out[[1, 2, 0]] - 0.375).abs() < 1e-6);
    }

    #[test]
    fn resize_larger_image_shape_and_range() {
        let mut data = Array3::zeros((512, 512, 3));
        for r in 0..512 {
            for c in 0..512 {
                data[[r, c, 0]] = (r + c) as f32 / 1024.0;
            }
        }
        let out = resize_bilinear(&data, (224, 224));
        assert_eq!(out.shape(), &[224, 224, 3]);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identity_config_is_a_noop() {
        let img = hot_pixel_image(48, 48, 5, 9);
        let cfg = AugmentationConfig::identity((48, 48));
        let out = augment(&img, &cfg, 1234);
        assert_eq!(out.data, img.data);
    }

    #[test]
    fn horizontal_flip_moves_corner_pixel() {
        let img = hot_pixel_image(32, 40, 0, 0);
        let flipped = flip_horizontal(&img);
        assert_eq!(flipped.data[[0, 39, 0]], 1.0);
        assert_eq!(flipped.data[[0, 0, 0]], 0.0);
    }

    #[test]
    fn flips_are_involutions() {
        let mut rng = seeding::rng_for(5, "flip_prop", &[]);
        let mut data = Array3::zeros((33, 37, 3));
        data.iter_mut().for_each(|v| *v = rng.gen::<f32>());
        let img = ImageTensor::new(data);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)).data, img.data);
        assert_eq!(flip_vertical(&flip_vertical(&img)).data, img.data);
    }

    #[test]
    fn rotation_90_matches_coordinate_oracle() {
        // hot pixel at (row 0, col 2) in a 5x5 image; forward map about
        // the center (2,2): p_out = R(90) * p_in with y pointing down.
        // p_in = (x=0, y=-2) -> p_out = (x=2, y=0) -> (row 2, col 4).
        let img = hot_pixel_image(5, 5, 0, 2);
        let params = AffineParams {
            rotation_deg: 90.0,
            ..AffineParams::identity()
        };
        let out = apply_affine(&img, &params);
        let mut best = (0, 0);
        let mut best_v = -1.0;
        for r in 0..5 {
            for c in 0..5 {
                if out.data[[r, c, 0]] > best_v {
                    best_v = out.data[[r, c, 0]];
                    best = (r, c);
                }
            }
        }
        assert_eq!(best, (2, 4));
        assert!(best_v > 0.999, "mass should stay on the grid point: {best_v}");
    }

    #[test]
    fn shift_moves_pixel_exactly() {
        let img = hot_pixel_image(9, 9, 4, 4);
        let params = AffineParams {
            shift_x: 2.0,
            shift_y: -1.0,
            ..AffineParams::identity()
        };
        let out = apply_affine(&img, &params);
        assert!(out.data[[3, 6, 0]] > 0.999);
    }

    #[test]
    fn augment_preserves_shape_and_range() {
        let img = solid_image(48, 48, 0.7);
        let cfg = AugmentationConfig {
            target_size: (48, 48),
            ..Default::default()
        };
        for seed in 0..20 {
            let out = augment(&img, &cfg, seed);
            assert_eq!(out.data.shape(), img.data.shape());
            assert!(out
                .data
                .iter()
                .all(|v| (0.0..=1.0 + 1e-6).contains(v)));
        }
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let img = hot_pixel_image(48, 48, 10, 20);
        let cfg = AugmentationConfig {
            target_size: (48, 48),
            ..Default::default()
        };
        let a = augment(&img, &cfg, 99);
        let b = augment(&img, &cfg, 99);
        let c = augment(&img, &cfg, 100);
        assert_eq!(a.data, b.data);
        assert_ne!(a.data, c.data);
    }

    fn stream_fixture(dir: &Path, n_per_class: usize) -> (Manifest, LabelCodec) {
        use crate::manifest::scan_dataset;
        for (ci, class) in ["a", "b"].iter().enumerate() {
            std::fs::create_dir_all(dir.join(class)).unwrap();
            for i in 0..n_per_class {
                // watermark: class index encoded in the red channel
                let img = image::RgbImage::from_fn(40, 40, |_, _| {
                    image::Rgb([(ci as u8 + 1) * 100, i as u8, 0])
                });
                img.save(dir.join(class).join(format!("{i}.png"))).unwrap();
            }
        }
        let manifest = scan_dataset(dir).unwrap().manifest;
        let codec = manifest.codec();
        (manifest, codec)
    }

    #[test]
    fn stream_batch_partition_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, codec) = stream_fixture(dir.path(), 5);
        let cfg = AugmentationConfig::identity((40, 40));
        let stream = BatchStream::eval(&manifest, &codec, &cfg, 4).unwrap();
        let sizes: Vec<usize> = stream
            .epoch(0)
            .map(|b| b.unwrap().images.shape()[0])
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn eval_stream_is_identical_across_iterations() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, codec) = stream_fixture(dir.path(), 3);
        let cfg = AugmentationConfig::identity((40, 40));
        let stream = BatchStream::eval(&manifest, &codec, &cfg, 2).unwrap();
        let a: Vec<Batch> = stream.epoch(0).map(|b| b.unwrap()).collect();
        let b: Vec<Batch> = stream.epoch(1).map(|b| b.unwrap()).collect();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.images, y.images);
            assert_eq!(x.labels, y.labels);
        }
    }

    #[test]
    fn train_stream_same_seed_same_batches() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, codec) = stream_fixture(dir.path(), 4);
        let cfg = AugmentationConfig {
            target_size: (40, 40),
            ..Default::default()
        };
        let s1 = BatchStream::train(&manifest, &codec, &cfg, 3, 3).unwrap();
        let s2 = BatchStream::train(&manifest, &codec, &cfg, 3, 3).unwrap();
        for epoch in 0..2 {
            let a: Vec<Batch> = s1.epoch(epoch).map(|b| b.unwrap()).collect();
            let b: Vec<Batch> = s2.epoch(epoch).map(|b| b.unwrap()).collect();
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                assert_eq!(x.images, y.images);
                assert_eq!(x.labels, y.labels);
            }
        }
        // different epochs shuffle differently
        let e0: Vec<usize> = s1.epoch(0).flat_map(|b| b.unwrap().sample_indices).collect();
        let e1: Vec<usize> = s1.epoch(1).flat_map(|b| b.unwrap().sample_indices).collect();
        assert_ne!(e0, e1);
    }

    #[test]
    fn labels_align_with_watermarked_images() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, codec) = stream_fixture(dir.path(), 6);
        // no augmentation so the watermark survives, but shuffled order
        let cfg = AugmentationConfig::identity((40, 40));
        let stream =
            BatchStream::new(&manifest, &codec, &cfg, 4, true, false, 11).unwrap();
        for batch in stream.epoch(0) {
            let batch = batch.unwrap();
            for i in 0..batch.images.shape()[0] {
                // red watermark: (class_index + 1) * 100 / 255
                let red = batch.images[[i, 0, 0, 0]];
                let class = if (red - 100.0 / 255.0).abs() < 0.01 { 0 } else { 1 };
                assert_eq!(batch.labels[[i, class]], 1.0);
            }
        }
    }

    #[test]
    fn stream_propagates_decode_error_with_path() {
        let dir = tempfile::tempdir().unwrap();
        let (manifest, codec) = stream_fixture(dir.path(), 2);
        // corrupt one file after scanning
        std::fs::write(dir.path().join("a/0.png"), b"garbage").unwrap();
        let cfg = AugmentationConfig::identity((40, 40));
        let stream = BatchStream::eval(&manifest, &codec, &cfg, 8).unwrap();
        let err = stream.epoch(0).next().unwrap().unwrap_err();
        match err {
            Error::DecodeError { path, .. } => assert!(path.ends_with("a/0.png")),
            other => panic!("expected DecodeError, got {other:?}"),
        }
    }

    #[test]
    fn affine_zoom_scales_about_center() {
        // 2x zoom on a centered 3x3 block: center pixel stays put
        let mut data = Array3::zeros((9, 9, 3));
        for ch in 0..3 {
            data[[4, 4, ch]] = 1.0;
        }
        let img = ImageTensor::new(data);
        let params = AffineParams {
            zoom: 2.0,
            ..AffineParams::identity()
        };
        let out = apply_affine(&img, &params);
        assert!(out.data[[4, 4, 0]] > 0.999);
    }
}

//! Local model-agnostic explanations: superpixel segmentation, masked
//! perturbation sampling, an exponential-kernel weighted ridge surrogate
//! over the binary masks, and highlighted-overlay rendering.
//!
//! Two segmenters satisfy the same contract: a deterministic grid (the
//! one every analytic test uses) and a content-aware SLIC-style
//! clusterer for real CT slices. Everything downstream only sees the
//! segment-id map.

use ndarray::{Array2, Array4, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::ImageTensor;
use crate::error::{Error, Result};
use crate::seeding;

/// Per-pixel segment ids, contiguous 0..n_segments-1, 4-connected.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuperpixelMap {
    labels: Array2<usize>,
    n_segments: usize,
}

impl SuperpixelMap {
    pub fn labels(&self) -> &Array2<usize> {
        &self.labels
    }

    pub fn n_segments(&self) -> usize {
        self.n_segments
    }

    pub fn segment_of(&self, row: usize, col: usize) -> usize {
        self.labels[[row, col]]
    }

    /// Pixel count per segment.
    pub fn segment_areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.n_segments];
        for &id in self.labels.iter() {
            areas[id] += 1;
        }
        areas
    }

    fn from_labels(mut labels: Array2<usize>) -> Self {
        // compress ids to a contiguous range in first-appearance order
        let mut remap: std::collections::BTreeMap<usize, usize> = Default::default();
        for id in labels.iter_mut() {
            let next = remap.len();
            let compressed = *remap.entry(*id).or_insert(next);
            *id = compressed;
        }
        let n_segments = remap.len();
        SuperpixelMap { labels, n_segments }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SegmenterKind {
    /// Equal-share rectangular cells; analytically predictable.
    #[default]
    Grid,
    /// Content-aware clustering on (position, intensity).
    Slic,
}

/// Split H x W into a near-square grid of roughly `n_target` cells.
/// Cell boundaries use integer equal shares, so areas differ by at most
/// one pixel row/column share.
pub fn segment_grid(height: usize, width: usize, n_target: usize) -> SuperpixelMap {
    let n_target = n_target.max(2);
    let rows = ((n_target as f64 * height as f64 / width as f64).sqrt())
        .round()
        .clamp(1.0, height as f64) as usize;
    let cols = ((n_target as f64 / rows as f64).round() as usize).clamp(1, width);
    let labels = Array2::from_shape_fn((height, width), |(r, c)| {
        let gr = r * rows / height;
        let gc = c * cols / width;
        gr * cols + gc
    });
    SuperpixelMap::from_labels(labels)
}

/// SLIC-style clustering: k-means over (y, x, rgb) with grid-cell
/// initialization, followed by 4-connectivity enforcement. Deterministic
/// for a given image and target (initialization is the grid, ties break
/// by segment order); the seed only perturbs nothing today and is kept
/// for interface stability.
pub fn segment_slic(img: &ImageTensor, n_target: usize, _seed: u64) -> SuperpixelMap {
    let (h, w) = (img.height(), img.width());
    let grid = segment_grid(h, w, n_target);
    let k = grid.n_segments();
    // spatial scale: average segment spacing
    let spacing = ((h * w) as f64 / k as f64).sqrt().max(1.0);
    let color_weight = 10.0; // relative importance of intensity vs position

    #[derive(Clone)]
    struct Center {
        y: f64,
        x: f64,
        rgb: [f64; 3],
    }
    let mut centers: Vec<Center> = (0..k)
        .map(|_| Center {
            y: 0.0,
            x: 0.0,
            rgb: [0.0; 3],
        })
        .collect();
    let mut counts = vec![0usize; k];
    for r in 0..h {
        for c in 0..w {
            let id = grid.segment_of(r, c);
            centers[id].y += r as f64;
            centers[id].x += c as f64;
            for ch in 0..3 {
                centers[id].rgb[ch] += f64::from(img.data[[r, c, ch]]);
            }
            counts[id] += 1;
        }
    }
    for (center, &count) in centers.iter_mut().zip(&counts) {
        let n = count.max(1) as f64;
        center.y /= n;
        center.x /= n;
        center.rgb.iter_mut().for_each(|v| *v /= n);
    }

    let mut labels = grid.labels().clone();
    for _iter in 0..5 {
        // assignment within a 2*spacing window of each center
        let mut best = Array2::<f64>::from_elem((h, w), f64::INFINITY);
        for (id, center) in centers.iter().enumerate() {
            let r0 = (center.y - 2.0 * spacing).max(0.0) as usize;
            let r1 = ((center.y + 2.0 * spacing) as usize + 1).min(h);
            let c0 = (center.x - 2.0 * spacing).max(0.0) as usize;
            let c1 = ((center.x + 2.0 * spacing) as usize + 1).min(w);
            for r in r0..r1 {
                for c in c0..c1 {
                    let dy = (r as f64 - center.y) / spacing;
                    let dx = (c as f64 - center.x) / spacing;
                    let mut dc = 0.0;
                    for ch in 0..3 {
                        let d = f64::from(img.data[[r, c, ch]]) - center.rgb[ch];
                        dc += d * d;
                    }
                    let dist = dy * dy + dx * dx + color_weight * dc;
                    if dist < best[[r, c]] {
                        best[[r, c]] = dist;
                        labels[[r, c]] = id;
                    }
                }
            }
        }
        // recompute centers
        centers.iter_mut().for_each(|c| {
            *c = Center {
                y: 0.0,
                x: 0.0,
                rgb: [0.0; 3],
            }
        });
        counts.iter_mut().for_each(|c| *c = 0);
        for r in 0..h {
            for c in 0..w {
                let id = labels[[r, c]];
                centers[id].y += r as f64;
                centers[id].x += c as f64;
                for ch in 0..3 {
                    centers[id].rgb[ch] += f64::from(img.data[[r, c, ch]]);
                }
                counts[id] += 1;
            }
        }
        for (center, &count) in centers.iter_mut().zip(&counts) {
            let n = count.max(1) as f64;
            center.y /= n;
            center.x /= n;
            center.rgb.iter_mut().for_each(|v| *v /= n);
        }
    }

    enforce_connectivity(&labels, h, w)
}

/// Relabel so every segment is one 4-connected component: each connected
/// component keeps the original id only if it is that id's largest
/// component; smaller fragments merge into their largest touching
/// neighbor component.
fn enforce_connectivity(labels: &Array2<usize>, h: usize, w: usize) -> SuperpixelMap {
    let mut component = Array2::<usize>::from_elem((h, w), usize::MAX);
    let mut comp_label = Vec::new();
    let mut comp_area = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if component[[r, c]] != usize::MAX {
                continue;
            }
            let id = comp_label.len();
            let label = labels[[r, c]];
            let mut queue = std::collections::VecDeque::from([(r, c)]);
            component[[r, c]] = id;
            let mut area = 0usize;
            while let Some((cr, cc)) = queue.pop_front() {
                area += 1;
                let neighbors = [
                    (cr.wrapping_sub(1), cc),
                    (cr + 1, cc),
                    (cr, cc.wrapping_sub(1)),
                    (cr, cc + 1),
                ];
                for (nr, nc) in neighbors {
                    if nr < h
                        && nc < w
                        && component[[nr, nc]] == usize::MAX
                        && labels[[nr, nc]] == label
                    {
                        component[[nr, nc]] = id;
                        queue.push_back((nr, nc));
                    }
                }
            }
            comp_label.push(label);
            comp_area.push(area);
        }
    }

    // keep the largest component per original label; merge the rest into
    // the largest adjacent surviving component (deterministic scan order)
    let n_components = comp_label.len();
    let mut keeps = vec![false; n_components];
    let mut best_for_label: std::collections::BTreeMap<usize, usize> = Default::default();
    for (comp, &label) in comp_label.iter().enumerate() {
        let entry = best_for_label.entry(label).or_insert(comp);
        if comp_area[comp] > comp_area[*entry] {
            *entry = comp;
        }
    }
    for (&_label, &comp) in &best_for_label {
        keeps[comp] = true;
    }

    let mut final_comp: Vec<usize> = (0..n_components).collect();
    // iterate until every fragment borders a kept component
    loop {
        let mut changed = false;
        for r in 0..h {
            for c in 0..w {
                let comp = final_comp[component[[r, c]]];
                if keeps[comp] {
                    continue;
                }
                let neighbors = [
                    (r.wrapping_sub(1), c),
                    (r + 1, c),
                    (r, c.wrapping_sub(1)),
                    (r, c + 1),
                ];
                let mut best: Option<usize> = None;
                for (nr, nc) in neighbors {
                    if nr < h && nc < w {
                        let ncomp = final_comp[component[[nr, nc]]];
                        if keeps[ncomp]
                            && best.map(|b| comp_area[ncomp] > comp_area[b]).unwrap_or(true)
                        {
                            best = Some(ncomp);
                        }
                    }
                }
                if let Some(target) = best {
                    let source = component[[r, c]];
                    for f in final_comp.iter_mut() {
                        if *f == comp {
                            *f = target;
                        }
                    }
                    let _ = source;
                    changed = true;
                }
            }
        }
        if !changed {
            break;
        }
    }

    let merged = Array2::from_shape_fn((h, w), |(r, c)| final_comp[component[[r, c]]]);
    SuperpixelMap::from_labels(merged)
}

/// Segment an image; the actual count stays within [0.5x, 2x] of the
/// target.
pub fn segment(
    img: &ImageTensor,
    n_segments_target: usize,
    seed: u64,
    kind: SegmenterKind,
) -> Result<SuperpixelMap> {
    if n_segments_target < 2 {
        return Err(Error::Config("n_segments_target must be >= 2".into()));
    }
    let map = match kind {
        SegmenterKind::Grid => segment_grid(img.height(), img.width(), n_segments_target),
        SegmenterKind::Slic => segment_slic(img, n_segments_target, seed),
    };
    let lo = n_segments_target.div_ceil(2);
    let hi = n_segments_target * 2;
    if map.n_segments() < lo || map.n_segments() > hi {
        return Err(Error::Config(format!(
            "segmenter produced {} segments for target {n_segments_target}",
            map.n_segments()
        )));
    }
    Ok(map)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FillStrategy {
    /// Replace occluded segments with the image's mean intensity, which
    /// avoids out-of-distribution pitch-black patches on CT backgrounds.
    #[default]
    MeanIntensity,
    Constant(f32),
}

impl FillStrategy {
    fn value(&self, img: &ImageTensor) -> f32 {
        match self {
            FillStrategy::MeanIntensity => {
                img.data.iter().sum::<f32>() / img.data.len() as f32
            }
            FillStrategy::Constant(v) => *v,
        }
    }
}

/// Draw the binary masks for `n_samples` perturbations. Row 0 is all
/// ones (the original image); every other entry is an independent fair
/// coin. Mask order depends only on the seed, never on chunking.
pub fn generate_masks(n_segments: usize, n_samples: usize, seed: u64) -> Result<Array2<f32>> {
    if n_samples < n_segments + 2 {
        return Err(Error::Config(format!(
            "need n_samples >= n_segments + 2 for a solvable surrogate ({n_samples} < {})",
            n_segments + 2
        )));
    }
    let mut rng = seeding::rng_for(seed, "lime_masks", &[]);
    let mut masks = Array2::<f32>::zeros((n_samples, n_segments));
    masks.row_mut(0).fill(1.0);
    for s in 1..n_samples {
        for seg in 0..n_segments {
            masks[[s, seg]] = if rng.gen_bool(0.5) { 1.0 } else { 0.0 };
        }
    }
    Ok(masks)
}

/// Apply one mask row: masked-out segments are replaced by `fill`.
pub fn apply_mask(
    img: &ImageTensor,
    spmap: &SuperpixelMap,
    mask: &[f32],
    fill: f32,
) -> ImageTensor {
    let (h, w) = (img.height(), img.width());
    let mut out = img.data.clone();
    for r in 0..h {
        for c in 0..w {
            if mask[spmap.segment_of(r, c)] == 0.0 {
                for ch in 0..3 {
                    out[[r, c, ch]] = fill;
                }
            }
        }
    }
    ImageTensor::new(out)
}

/// Masked-perturbation sample set: the mask matrix and the materialized
/// perturbed images.
pub fn perturb(
    img: &ImageTensor,
    spmap: &SuperpixelMap,
    n_samples: usize,
    seed: u64,
    fill: FillStrategy,
) -> Result<(Array2<f32>, Vec<ImageTensor>)> {
    let masks = generate_masks(spmap.n_segments(), n_samples, seed)?;
    let fill_value = fill.value(img);
    let images = masks
        .rows()
        .into_iter()
        .map(|row| apply_mask(img, spmap, row.as_slice().unwrap(), fill_value))
        .collect();
    Ok((masks, images))
}

/// Exponential kernel over cosine distance to the all-ones mask:
/// w_i = exp(-d_i^2 / width^2). The zero mask has distance 1 by
/// convention.
pub fn kernel_weights(masks: &Array2<f32>, kernel_width: f64) -> Vec<f64> {
    let k = masks.ncols() as f64;
    masks
        .rows()
        .into_iter()
        .map(|row| {
            let ones = row.iter().filter(|&&v| v != 0.0).count() as f64;
            let distance = if ones == 0.0 {
                1.0
            } else {
                1.0 - ones / (ones.sqrt() * k.sqrt())
            };
            (-distance * distance / (kernel_width * kernel_width)).exp()
        })
        .collect()
}

/// Weighted ridge regression of the target on the binary masks.
/// Weights are normalized by their mean so the ridge term stays fixed
/// relative to the total weight; the intercept is unpenalized. Returns
/// (coefficients, intercept, weighted r2).
pub fn fit_surrogate(
    masks: &Array2<f32>,
    targets: &[f64],
    weights: &[f64],
    lambda: f64,
) -> Result<(Vec<f64>, f64, f64)> {
    let n = masks.nrows();
    let k = masks.ncols();
    if targets.len() != n {
        return Err(Error::LengthMismatch {
            left: targets.len(),
            right: n,
        });
    }
    if weights.len() != n {
        return Err(Error::LengthMismatch {
            left: weights.len(),
            right: n,
        });
    }
    let mean_w: f64 = weights.iter().sum::<f64>() / n as f64;
    if mean_w <= 0.0 {
        return Err(Error::Config("weights must have positive mean".into()));
    }
    let w_norm: Vec<f64> = weights.iter().map(|w| w / mean_w).collect();

    // design matrix with intercept column appended
    let d = k + 1;
    let mut ata = vec![vec![0.0f64; d]; d];
    let mut atb = vec![0.0f64; d];
    for (i, &wi) in w_norm.iter().enumerate() {
        let mut xi = Vec::with_capacity(d);
        for j in 0..k {
            xi.push(f64::from(masks[[i, j]]));
        }
        xi.push(1.0);
        for a in 0..d {
            for b in a..d {
                ata[a][b] += wi * xi[a] * xi[b];
            }
            atb[a] += wi * xi[a] * targets[i];
        }
    }
    for a in 0..d {
        for b in 0..a {
            ata[a][b] = ata[b][a];
        }
    }
    // ridge on coefficients only, never the intercept
    for (j, row) in ata.iter_mut().enumerate().take(k) {
        row[j] += lambda;
    }

    let beta = solve_linear(ata, atb, lambda == 0.0)?;
    let (coef, intercept) = (beta[..k].to_vec(), beta[k]);

    // weighted r2 on the perturbation sample
    let total_w: f64 = w_norm.iter().sum();
    let y_bar: f64 = targets
        .iter()
        .zip(&w_norm)
        .map(|(y, w)| y * w)
        .sum::<f64>()
        / total_w;
    let mut rss = 0.0;
    let mut tss = 0.0;
    for i in 0..n {
        let mut pred = intercept;
        for j in 0..k {
            pred += coef[j] * f64::from(masks[[i, j]]);
        }
        rss += w_norm[i] * (targets[i] - pred) * (targets[i] - pred);
        tss += w_norm[i] * (targets[i] - y_bar) * (targets[i] - y_bar);
    }
    let r2 = if tss < 1e-12 {
        log::warn!("surrogate target has no variance; r2 reported as 0");
        0.0
    } else {
        1.0 - rss / tss
    };
    Ok((coef, intercept, r2))
}

/// Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>, strict_rank: bool) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&x, &y| a[x][col].abs().partial_cmp(&a[y][col].abs()).unwrap())
            .unwrap();
        if a[pivot_row][col].abs() < 1e-12 {
            if strict_rank {
                return Err(Error::SingularSystem);
            }
            continue;
        }
        a.swap(col, pivot_row);
        b.swap(col, pivot_row);
        for row in col + 1..n {
            let factor = a[row][col] / a[col][col];
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[row][j] -= factor * a[col][j];
            }
            b[row] -= factor * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for col in (0..n).rev() {
        if a[col][col].abs() < 1e-12 {
            x[col] = 0.0;
            continue;
        }
        let mut sum = b[col];
        for j in col + 1..n {
            sum -= a[col][j] * x[j];
        }
        x[col] = sum / a[col][col];
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    pub n_segments: usize,
    pub n_samples: usize,
    pub kernel_width: f64,
    pub top_k: usize,
    pub ridge_lambda: f64,
    pub segmenter: SegmenterKind,
    pub fill: FillStrategy,
    pub seed: u64,
    /// Model-evaluation chunk size; never affects results.
    pub chunk_size: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            n_segments: 50,
            n_samples: 1000,
            kernel_width: 0.25,
            top_k: 5,
            ridge_lambda: 1e-3,
            segmenter: SegmenterKind::Grid,
            fill: FillStrategy::MeanIntensity,
            seed: 0,
            chunk_size: 64,
        }
    }
}

/// Surrogate fit for one (image, class) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationResult {
    pub target_class: usize,
    pub segment_weights: Vec<f64>,
    pub intercept: f64,
    /// (segment id, weight), sorted by descending weight.
    pub top_k: Vec<(usize, f64)>,
    pub local_fidelity_r2: f64,
    pub n_segments: usize,
    pub config: ExplainConfig,
}

impl ExplanationResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("explanation serializes")
    }

    /// Positive-weight segments among the top k, for overlay rendering.
    pub fn positive_top_segments(&self) -> Vec<usize> {
        self.top_k
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(id, _)| *id)
            .collect()
    }
}

/// Full LIME pipeline for one image and class: segment, perturb, run the
/// model over mask chunks, kernel-weight, fit the surrogate.
pub fn explain<F>(
    predict: F,
    img: &ImageTensor,
    target_class: usize,
    cfg: &ExplainConfig,
) -> Result<ExplanationResult>
where
    F: Fn(&Array4<f32>) -> Result<Array2<f32>>,
{
    let spmap = segment(img, cfg.n_segments, cfg.seed, cfg.segmenter)?;
    let masks = generate_masks(spmap.n_segments(), cfg.n_samples, cfg.seed)?;
    let fill_value = cfg.fill.value(img);

    let (h, w) = (img.height(), img.width());
    let mut class_probs = Vec::with_capacity(cfg.n_samples);
    let chunk = cfg.chunk_size.max(1);
    for chunk_rows in masks.axis_chunks_iter(Axis(0), chunk) {
        let b = chunk_rows.nrows();
        let mut batch = Array4::<f32>::zeros((b, h, w, 3));
        for (slot, mask) in chunk_rows.rows().into_iter().enumerate() {
            let perturbed = apply_mask(img, &spmap, mask.as_slice().unwrap(), fill_value);
            batch.index_axis_mut(Axis(0), slot).assign(&perturbed.data);
        }
        let probs = predict(&batch)?;
        if target_class >= probs.ncols() {
            return Err(Error::IndexOutOfRange {
                index: target_class,
                num_classes: probs.ncols(),
            });
        }
        for i in 0..b {
            class_probs.push(f64::from(probs[[i, target_class]]));
        }
    }

    let weights = kernel_weights(&masks, cfg.kernel_width);
    let (coef, intercept, r2) = fit_surrogate(&masks, &class_probs, &weights, cfg.ridge_lambda)?;

    let mut ranked: Vec<(usize, f64)> = coef.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(cfg.top_k);

    Ok(ExplanationResult {
        target_class,
        segment_weights: coef,
        intercept,
        top_k: ranked,
        local_fidelity_r2: r2,
        n_segments: spmap.n_segments(),
        config: cfg.clone(),
    })
}

/// Tint the positive top-k segments (default yellow, alpha 0.4) and draw
/// a solid contour just inside their boundaries. Pixels outside the
/// highlighted segments are bit-identical to the input.
pub fn render_overlay(
    img: &ImageTensor,
    spmap: &SuperpixelMap,
    explanation: &ExplanationResult,
    top_k: usize,
) -> ImageTensor {
    const HIGHLIGHT: [f32; 3] = [1.0, 1.0, 0.0];
    const ALPHA: f32 = 0.4;
    let selected: std::collections::BTreeSet<usize> = explanation
        .positive_top_segments()
        .into_iter()
        .take(top_k)
        .collect();
    let (h, w) = (img.height(), img.width());
    let mut out = img.data.clone();
    for r in 0..h {
        for c in 0..w {
            let id = spmap.segment_of(r, c);
            if !selected.contains(&id) {
                continue;
            }
            let neighbors = [
                (r.wrapping_sub(1), c),
                (r + 1, c),
                (r, c.wrapping_sub(1)),
                (r, c + 1),
            ];
            let on_boundary = neighbors
                .into_iter()
                .any(|(nr, nc)| nr < h && nc < w && spmap.segment_of(nr, nc) != id);
            for ch in 0..3 {
                out[[r, c, ch]] = if on_boundary {
                    HIGHLIGHT[ch]
                } else {
                    (1.0 - ALPHA) * out[[r, c, ch]] + ALPHA * HIGHLIGHT[ch]
                };
            }
        }
    }
    ImageTensor::new(out)
}

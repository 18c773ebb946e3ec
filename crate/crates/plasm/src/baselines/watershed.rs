//! Otsu thresholding and marker-seeded watershed segmentation.
//!
//! The watershed is a priority flood over the gradient-magnitude surface:
//! markers seed basins, pixels are claimed in order of increasing gradient,
//! and ties resolve by (lower marker id, insertion order), so the partition
//! is fully deterministic. Used as a classifier, the stain channel is
//! Otsu-binarized, each connected stained component seeds a marker, and the
//! image is called parasitized when some interior basin is both large and
//! dark enough.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::features::{luma_map, stain_score_map, StainConfig};

const OTSU_BINS: usize = 256;

fn quantize(v: f64) -> usize {
    ((v.clamp(0.0, 1.0)) * (OTSU_BINS - 1) as f64).round() as usize
}

/// Otsu's threshold over a 256-bin histogram of values in [0,1]: the cut
/// maximizing between-class variance. Returns the threshold intensity
/// (bin / 255); class 0 is `value <= threshold`.
pub fn otsu_threshold(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("otsu needs at least one value".into()));
    }
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[quantize(v)] += 1;
    }
    if hist.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::DegenerateInput(
            "otsu threshold of a constant image".into(),
        ));
    }

    let total: u64 = values.len() as u64;
    let weighted_total: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();

    // Track the whole plateau of maximizing cuts and return its middle, so a
    // two-level image thresholds strictly between its modes.
    let mut plateau = (0usize, 0usize);
    let mut best_var = f64::NEG_INFINITY;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for t in 0..OTSU_BINS - 1 {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        if w0 == 0.0 {
            continue;
        }
        let w1 = total as f64 - w0;
        if w1 == 0.0 {
            break;
        }
        let mu0 = sum0 / w0;
        let mu1 = (weighted_total - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            plateau = (t, t);
        } else if var == best_var {
            plateau.1 = t;
        }
    }
    let best_t = (plateau.0 + plateau.1) / 2;
    Ok(best_t as f64 / (OTSU_BINS - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegionStats {
    pub area: usize,
    pub mean_intensity: f64,
}

/// Watershed output: a region id per pixel (region i is marker i's basin)
/// plus per-region area and mean intensity.
#[derive(Debug, Clone)]
pub struct SegmentationResult {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
    pub regions: Vec<RegionStats>,
}

impl SegmentationResult {
    pub fn region_of(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }
}

/// Central-difference gradient magnitude (one-sided at borders).
pub fn gradient_magnitude(gray: &Tensor) -> Result<Tensor> {
    if gray.rank() != 2 {
        return Err(Error::InvalidInput(format!(
            "expected [H,W] grayscale, got {:?}",
            gray.shape()
        )));
    }
    let (h, w) = (gray.dim(0), gray.dim(1));
    let src = gray.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = match (x, w) {
                (_, 1) => 0.0,
                (0, _) => src[y * w + 1] - src[y * w],
                (x, w) if x == w - 1 => src[y * w + x] - src[y * w + x - 1],
                _ => (src[y * w + x + 1] - src[y * w + x - 1]) / 2.0,
            };
            let gy = match (y, h) {
                (_, 1) => 0.0,
                (0, _) => src[w + x] - src[x],
                (y, h) if y == h - 1 => src[y * w + x] - src[(y - 1) * w + x],
                _ => (src[(y + 1) * w + x] - src[(y - 1) * w + x]) / 2.0,
            };
            out[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    Tensor::new(vec![h, w], out)
}

struct QueueEntry {
    priority: f64,
    label: u32,
    counter: u64,
    pixel: usize,
}

impl PartialEq for QueueEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for QueueEntry {}
impl PartialOrd for QueueEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueueEntry {
    // Reversed so the max-heap pops the lowest (priority, label, counter).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .priority
            .total_cmp(&self.priority)
            .then(other.label.cmp(&self.label))
            .then(other.counter.cmp(&self.counter))
    }
}

/// Priority-flood watershed from `markers` (row, col), over the
/// gradient-magnitude surface of `gray`. Every pixel is assigned to exactly
/// one marker's basin; 4-connectivity.
pub fn watershed_segment(gray: &Tensor, markers: &[(usize, usize)]) -> Result<SegmentationResult> {
    if markers.is_empty() {
        return Err(Error::InvalidInput("watershed needs at least one marker".into()));
    }
    let surface = gradient_magnitude(gray)?;
    let (h, w) = (gray.dim(0), gray.dim(1));
    for &(y, x) in markers {
        if y >= h || x >= w {
            return Err(Error::InvalidInput(format!(
                "marker ({y},{x}) outside {h}x{w} image"
            )));
        }
    }

    const UNLABELED: u32 = u32::MAX;
    let mut labels = vec![UNLABELED; h * w];
    let mut heap = BinaryHeap::new();
    let mut counter = 0u64;
    let prio = surface.data();

    for (id, &(y, x)) in markers.iter().enumerate() {
        let pixel = y * w + x;
        if labels[pixel] != UNLABELED {
            return Err(Error::InvalidInput(format!(
                "markers {id} and {} share pixel ({y},{x})",
                labels[pixel]
            )));
        }
        labels[pixel] = id as u32;
        // Markers flood before any ordinary pixel.
        heap.push(QueueEntry {
            priority: f64::NEG_INFINITY,
            label: id as u32,
            counter,
            pixel,
        });
        counter += 1;
    }

    while let Some(entry) = heap.pop() {
        let pixel = entry.pixel;
        let (y, x) = (pixel / w, pixel % w);
        let mut neighbors = [usize::MAX; 4];
        let mut n = 0;
        if y > 0 {
            neighbors[n] = pixel - w;
            n += 1;
        }
        if y + 1 < h {
            neighbors[n] = pixel + w;
            n += 1;
        }
        if x > 0 {
            neighbors[n] = pixel - 1;
            n += 1;
        }
        if x + 1 < w {
            neighbors[n] = pixel + 1;
            n += 1;
        }
        for &next in &neighbors[..n] {
            if labels[next] == UNLABELED {
                labels[next] = entry.label;
                heap.push(QueueEntry {
                    priority: prio[next],
                    label: entry.label,
                    counter,
                    pixel: next,
                });
                counter += 1;
            }
        }
    }

    let mut regions = vec![
        RegionStats {
            area: 0,
            mean_intensity: 0.0
        };
        markers.len()
    ];
    for (pixel, &label) in labels.iter().enumerate() {
        let r = &mut regions[label as usize];
        r.area += 1;
        r.mean_intensity += gray.data()[pixel];
    }
    for r in &mut regions {
        if r.area > 0 {
            r.mean_intensity /= r.area as f64;
        }
    }
    Ok(SegmentationResult {
        width: w,
        height: h,
        labels,
        regions,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WatershedClassifyConfig {
    pub stain: StainConfig,
    /// Minimum basin area (pixels) for a parasite call.
    pub min_area: usize,
    /// Minimum darkness (1 - mean intensity) of the basin.
    pub min_darkness: f64,
}

impl Default for WatershedClassifyConfig {
    fn default() -> Self {
        WatershedClassifyConfig {
            stain: StainConfig::default(),
            min_area: 10,
            min_darkness: 0.45,
        }
    }
}

/// 4-connected components of a boolean mask, each as a pixel list in
/// discovery order.
fn connected_components(mask: &[bool], h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut component = Vec::new();
        stack.push(start);
        seen[start] = true;
        while let Some(pixel) = stack.pop() {
            component.push(pixel);
            let (y, x) = (pixel / w, pixel % w);
            let mut push = |p: usize| {
                if mask[p] && !seen[p] {
                    seen[p] = true;
                    stack.push(p);
                }
            };
            if y > 0 {
                push(pixel - w);
            }
            if y + 1 < h {
                push(pixel + w);
            }
            if x > 0 {
                push(pixel - 1);
            }
            if x + 1 < w {
                push(pixel + 1);
            }
        }
        components.push(component);
    }
    components
}

/// Stain-guided watershed classifier: Otsu-binarize the stain channel (within
/// the configured purple/darkness floors), seed a marker per connected stained
/// component plus two reference markers (the brightest and the darkest pixel,
/// so both the cell body and the background have unstained basins to belong
/// to), flood, and call the image parasitized (1.0) when any stained basin
/// clears the area and darkness floors.
pub fn watershed_classify(
    image: &Tensor,
    config: &WatershedClassifyConfig,
) -> Result<(f64, SegmentationResult)> {
    let luma = luma_map(image)?;
    let (h, w) = (luma.dim(0), luma.dim(1));

    // Reference markers: first row-major brightest and darkest pixels.
    let mut brightest = 0usize;
    let mut darkest = 0usize;
    let (mut hi, mut lo) = (f64::NEG_INFINITY, f64::INFINITY);
    for (i, &v) in luma.data().iter().enumerate() {
        if v > hi {
            hi = v;
            brightest = i;
        }
        if v < lo {
            lo = v;
            darkest = i;
        }
    }

    let score = stain_score_map(image)?;
    // Otsu over the stain channel (mapped from [-1,1] into [0,1]), intersected
    // with the configured purple/darkness floors. The intersection keeps the
    // binarization from latching onto the cell-vs-background split when no
    // stain is present.
    let normalized: Vec<f64> = score.data().iter().map(|s| (s + 1.0) / 2.0).collect();
    let otsu_mask: Vec<bool> = match otsu_threshold(&normalized) {
        Ok(threshold) => normalized.iter().map(|&s| s > threshold).collect(),
        // A constant stain channel carries no parasite signal at all.
        Err(Error::DegenerateInput(_)) => vec![false; h * w],
        Err(e) => return Err(e),
    };
    let mask: Vec<bool> = (0..h * w)
        .map(|i| {
            otsu_mask[i]
                && score.data()[i] > config.stain.min_purple
                && luma.data()[i] < config.stain.max_luma
        })
        .collect();

    let mut markers = vec![(brightest / w, brightest % w)];
    let reference_count = if darkest != brightest {
        markers.push((darkest / w, darkest % w));
        2
    } else {
        1
    };
    let grad = gradient_magnitude(&luma)?;
    for component in connected_components(&mask, h, w) {
        // Seed at the flattest pixel, which sits in the component's interior
        // rather than on its boundary ridge.
        let seed = component
            .iter()
            .copied()
            .min_by(|&a, &b| grad.data()[a].total_cmp(&grad.data()[b]).then(a.cmp(&b)))
            .expect("components are non-empty");
        if seed != brightest && seed != darkest {
            markers.push((seed / w, seed % w));
        }
    }

    let segmentation = watershed_segment(&luma, &markers)?;
    let parasitized = segmentation.regions[reference_count..].iter().any(|r| {
        let darkness = 1.0 - r.mean_intensity;
        r.area >= config.min_area && darkness >= config.min_darkness
    });
    Ok((if parasitized { 1.0 } else { 0.0 }, segmentation))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn otsu_separates_a_bimodal_image() {
        let mut values = vec![50.0 / 255.0; 120];
        values.extend(vec![200.0 / 255.0; 80]);
        let t = otsu_threshold(&values).unwrap();
        assert!(t > 50.0 / 255.0 && t < 200.0 / 255.0, "threshold {t}");
    }

    #[test]
    fn otsu_matches_exhaustive_scan() {
        use rand::Rng;
        let mut rng = crate::rng::stream(19, &[0]);
        for trial in 0..100 {
            let n = rng.random_range(50..400);
            let values: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random::<bool>() {
                        rng.random_range(0.0..0.45)
                    } else {
                        rng.random_range(0.5..1.0)
                    }
                })
                .collect();
            let got = otsu_threshold(&values).unwrap();
            let got_bin = (got * 255.0).round() as usize;

            // Brute-force scan over all 256 candidate cuts on the same bins,
            // written independently of the implementation.
            let mut hist = [0u64; 256];
            for &v in &values {
                hist[quantize(v)] += 1;
            }
            let total = values.len() as f64;
            let variance_at = |t: usize| -> f64 {
                let w0: u64 = hist[..=t].iter().sum();
                let w1: u64 = hist[t + 1..].iter().sum();
                if w0 == 0 || w1 == 0 {
                    return f64::NEG_INFINITY;
                }
                let mu0: f64 = hist[..=t]
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| i as f64 * c as f64)
                    .sum::<f64>()
                    / w0 as f64;
                let mu1: f64 = hist[t + 1..]
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| (t + 1 + i) as f64 * c as f64)
                    .sum::<f64>()
                    / w1 as f64;
                (w0 as f64 / total) * (w1 as f64 / total) * (mu0 - mu1) * (mu0 - mu1)
            };
            let best_var = (0..255).map(variance_at).fold(f64::NEG_INFINITY, f64::max);
            let got_var = variance_at(got_bin);
            // The returned cut must attain the brute-force maximum.
            assert!(
                (got_var - best_var).abs() <= best_var.abs() * 1e-9,
                "trial {trial}: variance {got_var} at returned bin {got_bin}, max {best_var}"
            );
        }
    }

    #[test]
    fn otsu_inversion_maps_threshold_within_one_bin() {
        let mut values = vec![0.2; 60];
        values.extend(vec![0.7; 40]);
        values.extend([0.25, 0.65, 0.3, 0.6]);
        let t = otsu_threshold(&values).unwrap();
        let inverted: Vec<f64> = values.iter().map(|v| 1.0 - v).collect();
        let ti = otsu_threshold(&inverted).unwrap();
        let bins = |v: f64| (v * 255.0).round();
        assert!(
            (bins(t) + bins(ti) - 255.0).abs() <= 1.0,
            "t={t}, inverted {ti}"
        );
    }

    #[test]
    fn otsu_rejects_constant_images() {
        assert!(matches!(
            otsu_threshold(&vec![0.4; 100]),
            Err(Error::DegenerateInput(_))
        ));
    }

    /// Disk with a ~2px soft edge on a light background.
    fn disk_image(size: usize, cx: f64, cy: f64, r: f64) -> (Tensor, Vec<bool>) {
        let mut data = vec![0.0; size * size];
        let mut mask = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                let alpha = ((r - d) / 2.0 + 0.5).clamp(0.0, 1.0);
                data[y * size + x] = 0.9 - 0.7 * alpha;
                mask[y * size + x] = d <= r;
            }
        }
        (Tensor::new(vec![size, size], data).unwrap(), mask)
    }

    #[test]
    fn watershed_disk_iou_against_ground_truth() {
        let (image, mask) = disk_image(64, 32.0, 32.0, 14.0);
        let result = watershed_segment(&image, &[(32, 32), (1, 1)]).unwrap();
        let mut intersection = 0usize;
        let mut union = 0usize;
        for (i, &m) in mask.iter().enumerate() {
            let in_basin = result.labels[i] == 0;
            if m && in_basin {
                intersection += 1;
            }
            if m || in_basin {
                union += 1;
            }
        }
        let iou = intersection as f64 / union as f64;
        assert!(iou >= 0.9, "disk IoU {iou}");
    }

    #[test]
    fn watershed_two_disks_three_regions() {
        let (a, _) = disk_image(64, 18.0, 18.0, 9.0);
        let (b, _) = disk_image(64, 46.0, 46.0, 9.0);
        let data: Vec<f64> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(x, y)| x.min(*y))
            .collect();
        let image = Tensor::new(vec![64, 64], data).unwrap();
        let result = watershed_segment(&image, &[(18, 18), (46, 46), (0, 63)]).unwrap();
        let mut present = [false; 3];
        for &l in &result.labels {
            present[l as usize] = true;
        }
        assert!(present.iter().all(|&p| p));
        assert_eq!(result.regions.len(), 3);
        assert!(result.regions.iter().all(|r| r.area > 0));
    }

    #[test]
    fn watershed_partitions_every_pixel() {
        let (image, _) = disk_image(32, 16.0, 16.0, 8.0);
        let result = watershed_segment(&image, &[(16, 16), (0, 0), (31, 31)]).unwrap();
        let total: usize = result.regions.iter().map(|r| r.area).sum();
        assert_eq!(total, 32 * 32);
    }

    #[test]
    fn watershed_flat_image_is_deterministic() {
        let image = Tensor::full(&[16, 16], 0.5).unwrap();
        let a = watershed_segment(&image, &[(0, 0), (15, 15)]).unwrap();
        let b = watershed_segment(&image, &[(0, 0), (15, 15)]).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.regions[0].area + a.regions[1].area, 256);
    }

    #[test]
    fn watershed_rejects_empty_markers() {
        let image = Tensor::full(&[8, 8], 0.5).unwrap();
        assert!(watershed_segment(&image, &[]).is_err());
    }

    fn synth_image(parasitized: bool) -> Tensor {
        let config = crate::data::synth::SynthConfig {
            per_class: 1,
            noise: 0.01,
            seed: 77,
            ..crate::data::synth::SynthConfig::default()
        };
        let samples = crate::data::synth::synth_generate(&config).unwrap();
        let idx = usize::from(parasitized);
        samples[idx].sample.image.clone()
    }

    #[test]
    fn classify_blank_cell_as_uninfected() {
        let (p, _) = watershed_classify(&synth_image(false), &WatershedClassifyConfig::default())
            .unwrap();
        assert_eq!(p, 0.0);
    }

    #[test]
    fn classify_dotted_cell_as_parasitized() {
        let (p, seg) = watershed_classify(&synth_image(true), &WatershedClassifyConfig::default())
            .unwrap();
        assert_eq!(p, 1.0);
        assert!(seg.regions.len() >= 2);
    }
}

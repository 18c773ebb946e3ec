//! Hand-crafted color features for the classical classifiers.
//!
//! Per channel: a normalized 16-bin intensity histogram plus mean/variance;
//! then one stained-pixel fraction. A pixel counts as stained when its purple
//! score (min(red, blue) - green) clears a threshold and it is dark enough,
//! which is what a Giemsa-stained parasite looks like.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const HIST_BINS: usize = 16;
/// 3 histograms + 3 x (mean, variance) + stain fraction.
pub const FEATURE_LEN: usize = 3 * HIST_BINS + 6 + 1;

#[derive(Debug, Clone, PartialEq)]
pub struct StainConfig {
    /// Minimum purple score min(r,b) - g for a stained pixel.
    pub min_purple: f64,
    /// Maximum mean intensity for a stained pixel.
    pub max_luma: f64,
}

impl Default for StainConfig {
    fn default() -> Self {
        StainConfig {
            min_purple: 0.15,
            max_luma: 0.55,
        }
    }
}

fn check_image(image: &Tensor) -> Result<(usize, usize, usize)> {
    if image.rank() != 3 || (image.dim(0) != 3 && image.dim(0) != 1) {
        return Err(Error::InvalidInput(format!(
            "expected [3,H,W] or [1,H,W] image, got {:?}",
            image.shape()
        )));
    }
    Ok((image.dim(0), image.dim(1), image.dim(2)))
}

#[inline]
fn rgb_at(image: &Tensor, c: usize, h: usize, w: usize, plane: usize, y: usize, x: usize) -> f64 {
    // Grayscale images replicate their single channel.
    let ci = if c == 1 { 0 } else { plane };
    image.data()[ci * h * w + y * w + x]
}

/// Mean intensity map [H,W].
pub fn luma_map(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_image(image)?;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            for plane in 0..3 {
                sum += rgb_at(image, c, h, w, plane, y, x);
            }
            out[y * w + x] = sum / 3.0;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Purple score map [H,W]: min(r,b) - g, in [-1,1].
pub fn stain_score_map(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = check_image(image)?;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let r = rgb_at(image, c, h, w, 0, y, x);
            let g = rgb_at(image, c, h, w, 1, y, x);
            let b = rgb_at(image, c, h, w, 2, y, x);
            out[y * w + x] = r.min(b) - g;
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Fraction of pixels passing the stain predicate.
pub fn stain_fraction(image: &Tensor, config: &StainConfig) -> Result<f64> {
    let (_, h, w) = check_image(image)?;
    let score = stain_score_map(image)?;
    let luma = luma_map(image)?;
    let stained = score
        .data()
        .iter()
        .zip(luma.data().iter())
        .filter(|(&s, &l)| s > config.min_purple && l < config.max_luma)
        .count();
    Ok(stained as f64 / (h * w) as f64)
}

/// Deterministic fixed-length feature vector ([`FEATURE_LEN`] entries).
pub fn extract_features(image: &Tensor, config: &StainConfig) -> Result<Vec<f64>> {
    let (c, h, w) = check_image(image)?;
    let n = (h * w) as f64;
    let mut features = Vec::with_capacity(FEATURE_LEN);

    for plane in 0..3 {
        let mut hist = [0usize; HIST_BINS];
        for y in 0..h {
            for x in 0..w {
                let v = rgb_at(image, c, h, w, plane, y, x);
                let bin = ((v * HIST_BINS as f64) as usize).min(HIST_BINS - 1);
                hist[bin] += 1;
            }
        }
        features.extend(hist.iter().map(|&count| count as f64 / n));
    }

    for plane in 0..3 {
        let mut sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                sum += rgb_at(image, c, h, w, plane, y, x);
            }
        }
        let mean = sum / n;
        let mut sq = 0.0;
        for y in 0..h {
            for x in 0..w {
                let d = rgb_at(image, c, h, w, plane, y, x) - mean;
                sq += d * d;
            }
        }
        features.push(mean);
        features.push(sq / n);
    }

    features.push(stain_fraction(image, config)?);
    debug_assert_eq!(features.len(), FEATURE_LEN);
    Ok(features)
}

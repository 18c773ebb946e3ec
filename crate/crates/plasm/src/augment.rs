//! MixUp and CutMix batch augmentation with exact soft-label arithmetic.
//!
//! Both techniques mix each sample with a partner chosen by a pairing
//! permutation. MixUp blends whole images; CutMix pastes a rectangular patch
//! whose side fraction is sqrt(1 - lambda), border-clipped, with the label
//! weight recomputed from the surviving area so label arithmetic stays exact.
//! Every applied stage is recorded as provenance from which the output labels
//! can be replayed bit-for-bit.

use rand::Rng;
use rand_distr::{Beta, Distribution};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    /// Beta(alpha, alpha) parameter for MixUp lambda draws.
    pub mixup_alpha: f64,
    /// Beta(alpha, alpha) parameter for CutMix lambda draws.
    pub cutmix_alpha: f64,
    /// Per-batch, per-technique application probability.
    pub apply_probability: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            mixup_alpha: 0.2,
            cutmix_alpha: 0.2,
            apply_probability: 0.5,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mixup_alpha <= 0.0 || self.cutmix_alpha <= 0.0 {
            return Err(Error::InvalidConfig(
                "augmentation alphas must be > 0".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.apply_probability) {
            return Err(Error::InvalidConfig(
                "apply_probability must lie in [0,1]".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    MixUp,
    CutMix,
}

/// Half-open pixel rectangle [x0,x1) x [y0,y1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PatchRect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// Per-sample mixing record within one applied stage.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleMix {
    /// Weight of the sample's own label: label' = le*own + (1-le)*partner.
    pub lambda_eff: f64,
    /// CutMix patch, if any survived clipping.
    pub patch: Option<PatchRect>,
}

/// One applied augmentation stage over the whole batch.
#[derive(Debug, Clone, PartialEq)]
pub struct AppliedStage {
    pub kind: StageKind,
    /// Partner of sample i is pairing[i].
    pub pairing: Vec<usize>,
    /// The raw lambda drawn for the stage.
    pub lambda: f64,
    pub mixes: Vec<SampleMix>,
}

/// A batch of images with soft labels and the provenance of every applied stage.
#[derive(Debug, Clone)]
pub struct AugmentedBatch {
    /// [N,C,H,W]
    pub images: Tensor,
    /// [N], values in [0,1].
    pub labels: Tensor,
    pub provenance: Vec<AppliedStage>,
}

impl AugmentedBatch {
    pub fn new(images: Tensor, labels: Tensor) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::InvalidInput(format!(
                "batch images must be rank 4, got {:?}",
                images.shape()
            )));
        }
        if labels.rank() != 1 || labels.dim(0) != images.dim(0) {
            return Err(Error::InvalidInput(format!(
                "labels must be [N={}], got {:?}",
                images.dim(0),
                labels.shape()
            )));
        }
        if labels.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(Error::InvalidInput("labels must lie in [0,1]".into()));
        }
        Ok(AugmentedBatch {
            images,
            labels,
            provenance: Vec::new(),
        })
    }

    pub fn batch_size(&self) -> usize {
        self.images.dim(0)
    }
}

/// Draw lambda from Beta(alpha, alpha).
pub fn sample_lambda(alpha: f64, rng: &mut impl Rng) -> Result<f64> {
    if alpha <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "beta parameter must be > 0, got {alpha}"
        )));
    }
    let beta = Beta::new(alpha, alpha).expect("alpha > 0");
    Ok(beta.sample(rng).clamp(0.0, 1.0))
}

/// Random pairing permutation. For N >= 2 the permutation is redrawn until it
/// has no fixed point, so every sample mixes with a genuine partner; at N = 1
/// the identity is the only option.
pub fn random_pairing(n: usize, rng: &mut impl Rng) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut pairing: Vec<usize> = (0..n).collect();
    if n < 2 {
        return pairing;
    }
    loop {
        pairing.shuffle(rng);
        if pairing.iter().enumerate().all(|(i, &p)| i != p) {
            return pairing;
        }
    }
}

fn check_pairing(pairing: &[usize], n: usize) -> Result<()> {
    if pairing.len() != n {
        return Err(Error::InvalidInput(format!(
            "pairing length {} does not match batch size {n}",
            pairing.len()
        )));
    }
    let mut seen = vec![false; n];
    for &p in pairing {
        if p >= n || seen[p] {
            return Err(Error::InvalidInput("pairing is not a permutation".into()));
        }
        seen[p] = true;
    }
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!(
            "lambda must lie in [0,1], got {lambda}"
        )));
    }
    Ok(())
}

/// image_i' = lambda*image_i + (1-lambda)*image_pair(i); labels likewise.
pub fn mixup(batch: &AugmentedBatch, lambda: f64, pairing: &[usize]) -> Result<AugmentedBatch> {
    let n = batch.batch_size();
    check_pairing(pairing, n)?;
    check_lambda(lambda)?;

    let sample_len = batch.images.len() / n;
    let src = batch.images.data();
    let mut images = vec![0.0; src.len()];
    for i in 0..n {
        let own = &src[i * sample_len..][..sample_len];
        let partner = &src[pairing[i] * sample_len..][..sample_len];
        let dst = &mut images[i * sample_len..][..sample_len];
        for k in 0..sample_len {
            dst[k] = lambda * own[k] + (1.0 - lambda) * partner[k];
        }
    }
    let labels: Vec<f64> = (0..n)
        .map(|i| lambda * batch.labels.data()[i] + (1.0 - lambda) * batch.labels.data()[pairing[i]])
        .collect();

    let mut provenance = batch.provenance.clone();
    provenance.push(AppliedStage {
        kind: StageKind::MixUp,
        pairing: pairing.to_vec(),
        lambda,
        mixes: (0..n)
            .map(|_| SampleMix {
                lambda_eff: lambda,
                patch: None,
            })
            .collect(),
    });
    Ok(AugmentedBatch {
        images: Tensor::new(batch.images.shape().to_vec(), images)?,
        labels: Tensor::new(vec![n], labels)?,
        provenance,
    })
}

/// CutMix with per-sample patch centers drawn from `rng`.
pub fn cutmix(
    batch: &AugmentedBatch,
    lambda: f64,
    pairing: &[usize],
    rng: &mut impl Rng,
) -> Result<AugmentedBatch> {
    let h = batch.images.dim(2);
    let w = batch.images.dim(3);
    let centers: Vec<(usize, usize)> = (0..batch.batch_size())
        .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
        .collect();
    cutmix_at(batch, lambda, pairing, &centers)
}

/// CutMix with explicit patch centers (row, col) per sample. The patch side
/// fractions are sqrt(1 - lambda); patches are clipped at image borders and
/// lambda_eff is recomputed from the clipped area.
pub fn cutmix_at(
    batch: &AugmentedBatch,
    lambda: f64,
    pairing: &[usize],
    centers: &[(usize, usize)],
) -> Result<AugmentedBatch> {
    let n = batch.batch_size();
    check_pairing(pairing, n)?;
    check_lambda(lambda)?;
    if centers.len() != n {
        return Err(Error::InvalidInput(format!(
            "need {n} patch centers, got {}",
            centers.len()
        )));
    }

    let (c, h, w) = (
        batch.images.dim(1),
        batch.images.dim(2),
        batch.images.dim(3),
    );
    let frac = (1.0 - lambda).sqrt();
    let cut_h = (h as f64 * frac).round() as i64;
    let cut_w = (w as f64 * frac).round() as i64;

    let src = batch.images.data();
    let mut images = src.to_vec();
    let mut mixes = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let plane = h * w;
    let sample_len = c * plane;

    for i in 0..n {
        let (cy, cx) = (centers[i].0 as i64, centers[i].1 as i64);
        let y0 = (cy - cut_h / 2).clamp(0, h as i64) as usize;
        let y1 = (cy - cut_h / 2 + cut_h).clamp(0, h as i64) as usize;
        let x0 = (cx - cut_w / 2).clamp(0, w as i64) as usize;
        let x1 = (cx - cut_w / 2 + cut_w).clamp(0, w as i64) as usize;
        let patch = (x1 > x0 && y1 > y0).then_some(PatchRect { x0, y0, x1, y1 });

        let area = patch.map_or(0, |p| p.area());
        let lambda_eff = 1.0 - area as f64 / plane as f64;

        if let Some(p) = patch {
            let partner = pairing[i];
            for ci in 0..c {
                for y in p.y0..p.y1 {
                    let row = ci * plane + y * w;
                    let dst = &mut images[i * sample_len + row + p.x0..][..p.x1 - p.x0];
                    let from = &src[partner * sample_len + row + p.x0..][..p.x1 - p.x0];
                    dst.copy_from_slice(from);
                }
            }
        }
        labels.push(
            lambda_eff * batch.labels.data()[i]
                + (1.0 - lambda_eff) * batch.labels.data()[pairing[i]],
        );
        mixes.push(SampleMix { lambda_eff, patch });
    }

    let mut provenance = batch.provenance.clone();
    provenance.push(AppliedStage {
        kind: StageKind::CutMix,
        pairing: pairing.to_vec(),
        lambda,
        mixes,
    });
    Ok(AugmentedBatch {
        images: Tensor::new(batch.images.shape().to_vec(), images)?,
        labels: Tensor::new(vec![n], labels)?,
        provenance,
    })
}

/// Apply MixUp then CutMix, each independently with `apply_probability`.
pub fn augment_pipeline(
    batch: &AugmentedBatch,
    config: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<AugmentedBatch> {
    config.validate()?;
    let mut out = batch.clone();
    if rng.random::<f64>() < config.apply_probability {
        let lambda = sample_lambda(config.mixup_alpha, rng)?;
        let pairing = random_pairing(out.batch_size(), rng);
        out = mixup(&out, lambda, &pairing)?;
    }
    if rng.random::<f64>() < config.apply_probability {
        let lambda = sample_lambda(config.cutmix_alpha, rng)?;
        let pairing = random_pairing(out.batch_size(), rng);
        out = cutmix(&out, lambda, &pairing, rng)?;
    }
    Ok(out)
}

/// Recompute final labels from original source labels and recorded stages.
pub fn replay_labels(source_labels: &[f64], stages: &[AppliedStage]) -> Vec<f64> {
    let mut labels = source_labels.to_vec();
    for stage in stages {
        let before = labels.clone();
        for (i, mix) in stage.mixes.iter().enumerate() {
            labels[i] =
                mix.lambda_eff * before[i] + (1.0 - mix.lambda_eff) * before[stage.pairing[i]];
        }
    }
    labels
}

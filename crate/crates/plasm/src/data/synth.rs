//! Seeded synthetic cell-image generator.
//!
//! Uninfected samples are a light elliptical cell on a dark background plus
//! uniform noise; parasitized samples are the same image with one to three
//! hard-edged dark purple dots painted inside the cell. Dot pixels are emitted
//! as a ground-truth mask, and image index i shares its geometry and noise
//! streams across classes, so at zero noise the parasitized/uninfected pair
//! differs exactly on the mask.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{tensor_to_rgb8, write_rgb_png, ClassLabel, LabeledSample};

const BACKGROUND: [f64; 3] = [0.10, 0.10, 0.12];
const CELL: [f64; 3] = [0.92, 0.70, 0.74];
const DOT: [f64; 3] = [0.36, 0.10, 0.46];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub per_class: usize,
    pub size: usize,
    /// Min/max cell ellipse radius in pixels.
    pub cell_radius: (f64, f64),
    /// Min/max stain-dot radius in pixels.
    pub dot_radius: (f64, f64),
    /// Uniform per-pixel noise amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            per_class: 400,
            size: 64,
            cell_radius: (18.0, 26.0),
            dot_radius: (3.0, 5.0),
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.per_class == 0 {
            return Err(Error::InvalidConfig("per_class must be >= 1".into()));
        }
        if self.size < 16 {
            return Err(Error::InvalidConfig("image size must be >= 16".into()));
        }
        if self.cell_radius.0 <= 0.0 || self.cell_radius.0 > self.cell_radius.1 {
            return Err(Error::InvalidConfig("bad cell radius range".into()));
        }
        if self.dot_radius.0 <= 0.0 || self.dot_radius.0 > self.dot_radius.1 {
            return Err(Error::InvalidConfig("bad dot radius range".into()));
        }
        if self.dot_radius.1 >= self.cell_radius.0 {
            return Err(Error::InvalidConfig(
                "dot radius must stay below cell radius".into(),
            ));
        }
        if self.noise < 0.0 || self.noise > 0.2 {
            return Err(Error::InvalidConfig("noise must lie in [0, 0.2]".into()));
        }
        if self.cell_radius.1 * 2.2 > self.size as f64 {
            return Err(Error::InvalidConfig(
                "cell radius too large for the image size".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub sample: LabeledSample,
    /// Row-major H*W dot mask; all-false for uninfected samples.
    pub dot_mask: Vec<bool>,
}

struct CellGeometry {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

fn draw_geometry(config: &SynthConfig, rng: &mut impl Rng) -> CellGeometry {
    let size = config.size as f64;
    let wiggle = size / 16.0;
    CellGeometry {
        cx: size / 2.0 + rng.random_range(-wiggle..wiggle),
        cy: size / 2.0 + rng.random_range(-wiggle..wiggle),
        rx: rng.random_range(config.cell_radius.0..=config.cell_radius.1),
        ry: rng.random_range(config.cell_radius.0..=config.cell_radius.1),
    }
}

/// Soft cell coverage: 1 inside, 0 outside, ~1.5 px transition band.
fn cell_alpha(geo: &CellGeometry, x: f64, y: f64) -> f64 {
    let d = (((x - geo.cx) / geo.rx).powi(2) + ((y - geo.cy) / geo.ry).powi(2)).sqrt();
    let dist_px = (1.0 - d) * geo.rx.min(geo.ry);
    (0.5 + dist_px / 1.5).clamp(0.0, 1.0)
}

/// Generate `2 * per_class` samples (uninfected first, then parasitized),
/// each with its ground-truth dot mask. Pure function of the config.
pub fn synth_generate(config: &SynthConfig) -> Result<Vec<SynthSample>> {
    config.validate()?;
    let mut out = Vec::with_capacity(2 * config.per_class);
    for class in ClassLabel::ALL {
        for i in 0..config.per_class {
            out.push(generate_one(config, class, i)?);
        }
    }
    Ok(out)
}

fn generate_one(config: &SynthConfig, class: ClassLabel, index: usize) -> Result<SynthSample> {
    let size = config.size;
    let mut geom_rng = crate::rng::stream(config.seed, &[0x67656f, index as u64]); // "geo"
    let mut noise_rng = crate::rng::stream(config.seed, &[0x6e6f69, index as u64]); // "noi"
    let mut dot_rng = crate::rng::stream(config.seed, &[0x646f74, index as u64]); // "dot"

    let geo = draw_geometry(config, &mut geom_rng);
    let mut data = vec![0.0; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let alpha = cell_alpha(&geo, x as f64, y as f64);
            for c in 0..3 {
                data[c * size * size + y * size + x] =
                    BACKGROUND[c] + alpha * (CELL[c] - BACKGROUND[c]);
            }
        }
    }

    // Hard-edged dots, so the mask is exactly the set of repainted pixels.
    let mut mask = vec![false; size * size];
    if class == ClassLabel::Parasitized {
        let dots = dot_rng.random_range(1..=3);
        for _ in 0..dots {
            let r = dot_rng.random_range(config.dot_radius.0..=config.dot_radius.1);
            // Place the dot center well inside the cell ellipse.
            let (dx, dy) = loop {
                let angle = dot_rng.random_range(0.0..std::f64::consts::TAU);
                let t = dot_rng.random_range(0.0..1.0f64).sqrt();
                let px = geo.cx + t * (geo.rx - r - 2.0).max(1.0) * angle.cos();
                let py = geo.cy + t * (geo.ry - r - 2.0).max(1.0) * angle.sin();
                let d = (((px - geo.cx) / geo.rx).powi(2) + ((py - geo.cy) / geo.ry).powi(2)).sqrt();
                if (1.0 - d) * geo.rx.min(geo.ry) > r + 1.5 {
                    break (px, py);
                }
            };
            let r2 = r * r;
            let x_lo = ((dx - r).floor().max(0.0)) as usize;
            let x_hi = ((dx + r).ceil().min(size as f64 - 1.0)) as usize;
            let y_lo = ((dy - r).floor().max(0.0)) as usize;
            let y_hi = ((dy + r).ceil().min(size as f64 - 1.0)) as usize;
            for y in y_lo..=y_hi {
                for x in x_lo..=x_hi {
                    let dist2 = (x as f64 - dx).powi(2) + (y as f64 - dy).powi(2);
                    if dist2 <= r2 {
                        mask[y * size + x] = true;
                        for c in 0..3 {
                            data[c * size * size + y * size + x] = DOT[c];
                        }
                    }
                }
            }
        }
    }

    // Shared noise stream: the same perturbation lands on both classes.
    if config.noise > 0.0 {
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    let n = noise_rng.random_range(-config.noise..config.noise);
                    let v = &mut data[c * size * size + y * size + x];
                    *v = (*v + n).clamp(0.0, 1.0);
                }
            }
        }
    } else {
        // Keep the draw count identical so downstream streams never shift.
    }

    let prefix = match class {
        ClassLabel::Uninfected => "u",
        ClassLabel::Parasitized => "p",
    };
    Ok(SynthSample {
        sample: LabeledSample {
            image: Tensor::new(vec![3, size, size], data)?,
            label: class,
            source_id: format!("{}/{prefix}{index:05}.png", class.folder()),
        },
        dot_mask: mask,
    })
}

/// Write samples to `root` in the NIH folder layout (PNG per sample).
pub fn write_image_folder(samples: &[SynthSample], root: &Path) -> Result<()> {
    for class in ClassLabel::ALL {
        let dir = root.join(class.folder());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for s in samples {
        let (w, h, bytes) = tensor_to_rgb8(&s.sample.image)?;
        let path = root.join(&s.sample.source_id);
        write_rgb_png(&path, w, h, &bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn per_class_counts_are_honored() {
        let config = SynthConfig {
            per_class: 7,
            ..SynthConfig::default()
        };
        let samples = synth_generate(&config).unwrap();
        assert_eq!(samples.len(), 14);
        let parasitized = samples
            .iter()
            .filter(|s| s.sample.label == ClassLabel::Parasitized)
            .count();
        assert_eq!(parasitized, 7);
    }

    #[test]
    fn zero_noise_pairs_differ_exactly_on_dot_mask() {
        let config = SynthConfig {
            per_class: 6,
            noise: 0.0,
            ..SynthConfig::default()
        };
        let samples = synth_generate(&config).unwrap();
        let size = config.size;
        for i in 0..config.per_class {
            let clean = &samples[i];
            let infected = &samples[config.per_class + i];
            assert!(clean.dot_mask.iter().all(|&m| !m));
            assert!(infected.dot_mask.iter().any(|&m| m));
            for y in 0..size {
                for x in 0..size {
                    let differs = (0..3).any(|c| {
                        clean.sample.image.data()[c * size * size + y * size + x]
                            != infected.sample.image.data()[c * size * size + y * size + x]
                    });
                    assert_eq!(
                        differs,
                        infected.dot_mask[y * size + x],
                        "pixel ({x},{y}) of pair {i}"
                    );
                }
            }
        }
    }

    #[test]
    fn generation_is_a_pure_function_of_config() {
        let config = SynthConfig {
            per_class: 3,
            ..SynthConfig::default()
        };
        let a = synth_generate(&config).unwrap();
        let b = synth_generate(&config).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!(x.sample.image.bit_eq(&y.sample.image));
            assert_eq!(x.dot_mask, y.dot_mask);
        }
        let other = synth_generate(&SynthConfig {
            seed: 1,
            ..config
        })
        .unwrap();
        assert!(!a[0].sample.image.bit_eq(&other[0].sample.image));
    }

    #[test]
    fn values_stay_in_unit_range() {
        let config = SynthConfig {
            per_class: 4,
            noise: 0.2,
            ..SynthConfig::default()
        };
        for s in synth_generate(&config).unwrap() {
            assert!(s
                .sample
                .image
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn rejects_dot_radius_exceeding_cell() {
        let config = SynthConfig {
            dot_radius: (2.0, 20.0),
            ..SynthConfig::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn written_folder_loads_back() {
        let config = SynthConfig {
            per_class: 10,
            ..SynthConfig::default()
        };
        let samples = synth_generate(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_image_folder(&samples, dir.path()).unwrap();
        let outcome = super::super::load_image_folder(dir.path(), config.size).unwrap();
        assert_eq!(outcome.samples.len(), 20);
        assert!(outcome.errors.is_empty());
        // Quantization to u8 and back stays within half a step.
        let reloaded = outcome
            .samples
            .iter()
            .find(|s| s.source_id == samples[0].sample.source_id)
            .unwrap();
        let diff = reloaded.image.max_abs_diff(&samples[0].sample.image);
        assert!(diff <= 0.5 / 255.0 + 1e-12, "quantization drift {diff}");
    }
}

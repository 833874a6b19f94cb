//! Synthetic stand-in for pooled video features.
//!
//! Every class owns a latent concept vector. A record's latent code is the
//! mean concept of its labels plus a record-specific offset; each modality
//! sees that code through its own fixed random linear map, plus independent
//! noise. The offset and the noise are both scaled by `noise_sigma`, so a
//! noiseless corpus collapses every class to a single point while a noisy one
//! carries video-specific information shared across modalities.

use super::{Corpus, FeatureRecord};
use crate::error::{Error, Result};
use crate::numerics::{DenseMatrix, Rng};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_records: usize,
    pub num_classes: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub labels_per_record: usize,
    pub visual_dim: usize,
    pub audio_dim: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_records: 4096,
            num_classes: 32,
            latent_dim: 16,
            noise_sigma: 0.1,
            labels_per_record: 1,
            visual_dim: 1024,
            audio_dim: 128,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_records == 0 {
            return bad("num_records must be positive".into());
        }
        if self.num_classes == 0 || self.latent_dim == 0 || self.visual_dim == 0 || self.audio_dim == 0 {
            return bad("classes and dimensions must be positive".into());
        }
        if self.latent_dim > self.visual_dim.min(self.audio_dim) {
            return bad(format!(
                "latent_dim {} exceeds min(visual_dim, audio_dim) = {}",
                self.latent_dim,
                self.visual_dim.min(self.audio_dim)
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if self.labels_per_record == 0 || self.labels_per_record > self.num_classes {
            return bad(format!("labels_per_record must lie in 1..={}", self.num_classes));
        }
        Ok(())
    }
}

const WORLD_STREAM: u64 = 0;
const RECORD_STREAM: u64 = 1;

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut world = Rng::stream(spec.seed, WORLD_STREAM);
    let concepts: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.latent_dim).map(|_| world.normal()).collect())
        .collect();
    let scale = (1.0 / spec.latent_dim as f64).sqrt();
    let mut random_map = |rows: usize| {
        let values = (0..rows * spec.latent_dim).map(|_| scale * world.normal()).collect();
        DenseMatrix::from_vec(rows, spec.latent_dim, values).expect("shape")
    };
    let map_visual = random_map(spec.visual_dim);
    let map_audio = random_map(spec.audio_dim);

    let mut rng = Rng::stream(spec.seed, RECORD_STREAM);
    let sigma = spec.noise_sigma;
    let width = (spec.num_records.max(1) - 1).to_string().len().max(6);
    let records = (0..spec.num_records)
        .map(|i| {
            let labels = draw_labels(&mut rng, spec.num_classes, spec.labels_per_record);
            let mut latent = vec![0.0; spec.latent_dim];
            for &l in &labels {
                for (z, c) in latent.iter_mut().zip(&concepts[l as usize]) {
                    *z += c / labels.len() as f64;
                }
            }
            for z in &mut latent {
                *z += sigma * rng.normal();
            }
            let mut observe = |map: &DenseMatrix| -> Vec<f32> {
                let mut out = vec![0.0; map.rows()];
                map.matvec_into(&latent, &mut out);
                out.into_iter().map(|v| (v + sigma * rng.normal()) as f32).collect()
            };
            let visual = observe(&map_visual);
            let audio = observe(&map_audio);
            FeatureRecord::new(format!("vid{i:0width$}"), labels, visual, audio)
        })
        .collect();
    Corpus::new(spec.visual_dim, spec.audio_dim, spec.num_classes, records)
}

fn draw_labels(rng: &mut Rng, num_classes: usize, count: usize) -> Vec<u32> {
    let mut labels: Vec<u32> = Vec::with_capacity(count);
    while labels.len() < count {
        let l = rng.below(num_classes) as u32;
        if !labels.contains(&l) {
            labels.push(l);
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, sigma: f64) -> SyntheticSpec {
        SyntheticSpec {
            num_records: 60,
            num_classes: 4,
            latent_dim: 3,
            noise_sigma: sigma,
            labels_per_record: 1,
            visual_dim: 10,
            audio_dim: 5,
            seed,
        }
    }

    #[test]
    fn noiseless_class_members_coincide() {
        let c = generate_synthetic(&small(3, 0.0)).unwrap();
        let r = c.records();
        let mut compared = 0;
        for a in r {
            for b in r {
                if a.labels == b.labels {
                    assert_eq!(a.visual, b.visual);
                    assert_eq!(a.audio, b.audio);
                    compared += 1;
                }
            }
        }
        assert!(compared > r.len());
    }

    #[test]
    fn seeds_control_output() {
        let a = generate_synthetic(&small(1, 0.1)).unwrap();
        assert_eq!(a, generate_synthetic(&small(1, 0.1)).unwrap());
        assert_ne!(a, generate_synthetic(&small(2, 0.1)).unwrap());
    }

    #[test]
    fn shape_and_labels() {
        let spec = SyntheticSpec {
            labels_per_record: 2,
            ..small(9, 0.1)
        };
        let c = generate_synthetic(&spec).unwrap();
        assert_eq!(c.len(), 60);
        assert!(c.records().iter().all(|r| r.labels.len() == 2 && r.visual.len() == 10));
        assert_eq!(c.records()[0].id, "vid000000");
    }

    #[test]
    fn rejects_bad_specs() {
        for spec in [
            SyntheticSpec {
                num_records: 0,
                ..small(0, 0.1)
            },
            SyntheticSpec {
                latent_dim: 6,
                ..small(0, 0.1)
            },
            SyntheticSpec {
                noise_sigma: -1.0,
                ..small(0, 0.1)
            },
            SyntheticSpec {
                labels_per_record: 5,
                ..small(0, 0.1)
            },
        ] {
            assert!(generate_synthetic(&spec).is_err());
        }
    }
}

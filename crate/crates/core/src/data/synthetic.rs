//! Procedurally generated face-like images for tests and demos.
//!
//! Real samples are a smooth shaded ellipse on a tinted background. Print
//! attacks add a fine halftone grid and wash out contrast; replay attacks
//! add a moiré stripe pattern and a screen glow. Each domain has its own
//! tint and lighting, so the domains differ the way camera setups do.

use std::collections::HashMap;
use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{DomainDataset, ImageStore, Sample};
use super::protocol::Domain;
use crate::encoders::FaceImage;
use crate::error::{Error, Result};
use crate::label::{AttackType, Class};
use crate::seed::{rng_for, stream};

/// Path prefix of images that live only in an [`ImageStore`].
pub const MEMORY_SCHEME: &str = "synthetic://";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub size: usize,
    pub real: usize,
    pub print: usize,
    pub replay: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 32,
            real: 24,
            print: 12,
            replay: 12,
            seed: 0,
        }
    }
}

fn domain_tint(domain: usize) -> [f32; 3] {
    let phase = domain as f32 * 2.1;
    [
        0.85 + 0.15 * phase.sin(),
        0.85 + 0.15 * (phase + 2.0).sin(),
        0.85 + 0.15 * (phase + 4.0).sin(),
    ]
}

/// One image of the given domain and attack type.
pub fn synth_image(domain: usize, attack: AttackType, size: usize, rng: &mut impl Rng) -> FaceImage {
    let n = size as f32;
    let tint = domain_tint(domain);
    let light = 0.8 + 0.2 * ((domain as f32) * 1.3).cos();
    let cx = n * rng.random_range(0.42..0.58);
    let cy = n * rng.random_range(0.42..0.58);
    let rx = n * rng.random_range(0.26..0.34);
    let ry = n * rng.random_range(0.34..0.42);
    let skin = [
        rng.random_range(0.65..0.85),
        rng.random_range(0.45..0.62),
        rng.random_range(0.35..0.5),
    ];
    let bg = rng.random_range(0.15..0.45);
    let noise = Normal::new(0.0f32, 0.02).expect("positive std");
    let angle = rng.random_range(0.0..PI);
    let freq = rng.random_range(0.9..1.3);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (ca, sa) = (angle.cos(), angle.sin());

    let mut px = Array3::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
            let d = ((fx - cx) / rx).powi(2) + ((fy - cy) / ry).powi(2);
            let face = (1.0 - d).clamp(0.0, 1.0).sqrt();
            let shade = 0.75 + 0.25 * (1.0 - fy / n);
            for c in 0..3 {
                let base = if d < 1.0 {
                    skin[c] * (0.6 + 0.4 * face) * shade
                } else {
                    bg * (0.8 + 0.2 * fx / n)
                };
                px[[y, x, c]] = base * tint[c] * light;
            }
            let mut artifact = 0.0f32;
            match attack {
                AttackType::None => {}
                AttackType::Print => {
                    let dots = ((fx * freq * PI).sin() * (fy * freq * PI).sin()).abs();
                    artifact = 0.22 * (dots - 0.5);
                }
                AttackType::Replay | AttackType::Other => {
                    let u = fx * ca + fy * sa;
                    artifact = 0.25 * (u * freq * PI + phase).sin();
                }
            }
            for c in 0..3 {
                let mut v = px[[y, x, c]];
                match attack {
                    AttackType::Print => v = 0.5 + (v - 0.5) * 0.7,
                    AttackType::Replay | AttackType::Other => v = v * 0.9 + 0.08 * (c == 2) as u8 as f32,
                    AttackType::None => {}
                }
                px[[y, x, c]] = (v + artifact + noise.sample(rng)).clamp(0.0, 1.0);
            }
        }
    }
    FaceImage::from_unit_rgb(px).expect("synthetic pixels are finite")
}

/// Samples (with in-memory paths) and images of one domain.
pub fn synth_domain(name: &str, domain_index: usize, cfg: &SyntheticConfig) -> Vec<(Sample, FaceImage)> {
    let groups = [
        (AttackType::None, cfg.real),
        (AttackType::Print, cfg.print),
        (AttackType::Replay, cfg.replay),
    ];
    let mut out = Vec::new();
    for (g, (attack, count)) in groups.into_iter().enumerate() {
        for i in 0..count {
            let mut rng = rng_for(cfg.seed, &[stream::SYNTHETIC, domain_index as u64, g as u64, i as u64]);
            let img = synth_image(domain_index, attack, cfg.size, &mut rng);
            let local = format!("{}_{i:04}", attack.name());
            let label = if attack == AttackType::None { Class::Real } else { Class::Spoof };
            out.push((
                Sample {
                    id: format!("{name}/{local}"),
                    path: PathBuf::from(format!("{MEMORY_SCHEME}{name}/{local}.png")),
                    label,
                    attack,
                    domain: name.to_string(),
                },
                img,
            ));
        }
    }
    out
}

/// Generates every domain in `domains` into `store` and returns the
/// registry describing them.
pub fn in_memory(domains: &[Domain], cfg: &SyntheticConfig, store: &ImageStore) -> Result<HashMap<Domain, DomainDataset>> {
    let mut reg = HashMap::new();
    for (i, d) in domains.iter().enumerate() {
        let mut samples = Vec::new();
        for (s, img) in synth_domain(d.id(), i, cfg) {
            store.insert(s.path.clone(), img);
            samples.push(s);
        }
        reg.insert(*d, DomainDataset::new(d.id(), samples)?);
    }
    Ok(reg)
}

/// Writes PNG files and a manifest per domain under `root/<domain id>/`.
pub fn write_to_disk(root: &Path, domains: &[Domain], cfg: &SyntheticConfig) -> Result<()> {
    if cfg.size == 0 {
        return Err(Error::Config("synthetic image size must be positive".into()));
    }
    for (i, d) in domains.iter().enumerate() {
        let dir = root.join(d.id());
        std::fs::create_dir_all(dir.join("images")).map_err(|e| Error::io(&dir, e))?;
        let mut samples = Vec::new();
        for (mut s, img) in synth_domain(d.id(), i, cfg) {
            let file = dir.join("images").join(format!("{}.png", s.id.rsplit('/').next().expect("id")));
            img.save(&file)?;
            s.path = file;
            samples.push(s);
        }
        DomainDataset::new(d.id(), samples)?.write_manifest(&dir)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_labeled() {
        let cfg = SyntheticConfig {
            real: 3,
            print: 2,
            replay: 2,
            ..Default::default()
        };
        let a = synth_domain("msu", 0, &cfg);
        let b = synth_domain("msu", 0, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.len(), 7);
        assert!(a.iter().all(|(s, _)| s.attack.consistent_with(s.label)));
        let other = synth_domain("msu", 1, &cfg);
        assert_ne!(a[0].1, other[0].1);
    }

    #[test]
    fn spoofs_carry_more_high_frequency_energy() {
        let energy = |img: &FaceImage| {
            let p = img.to_unit_rgb();
            let (h, w, _) = p.dim();
            let mut e = 0.0;
            for y in 0..h {
                for x in 1..w {
                    e += (p[[y, x, 1]] - p[[y, x - 1, 1]]).powi(2);
                }
            }
            e
        };
        let mut rng = rng_for(1, &[]);
        let real: f32 = (0..10).map(|_| energy(&synth_image(0, AttackType::None, 32, &mut rng))).sum();
        let replay: f32 = (0..10).map(|_| energy(&synth_image(0, AttackType::Replay, 32, &mut rng))).sum();
        let print: f32 = (0..10).map(|_| energy(&synth_image(0, AttackType::Print, 32, &mut rng))).sum();
        assert!(replay > 2.0 * real && print > 2.0 * real, "{real} {replay} {print}");
    }

    #[test]
    fn disk_layout_loads_back() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SyntheticConfig {
            size: 16,
            real: 2,
            print: 1,
            replay: 1,
            seed: 3,
        };
        write_to_disk(dir.path(), &[Domain::Msu, Domain::Oulu], &cfg).unwrap();
        let ds = DomainDataset::load("oulu", &dir.path().join("oulu")).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds.count(Class::Real), 2);
    }
}

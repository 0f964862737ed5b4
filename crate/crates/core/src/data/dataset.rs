use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::encoders::FaceImage;
use crate::error::{Error, Result};
use crate::label::{AttackType, Class};

/// File name of the per-domain sample list.
pub const MANIFEST_FILE: &str = "manifest.csv";

/// One pre-cropped face image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Sample {
    /// Unique across all domains: `<domain>/<sample_id>`.
    pub id: String,
    pub path: PathBuf,
    pub label: Class,
    pub attack: AttackType,
    pub domain: String,
}

/// A named collection of labeled samples.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub name: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    sample_id: String,
    relative_path: String,
    label: String,
    attack_type: String,
}

impl DomainDataset {
    pub fn new(name: impl Into<String>, samples: Vec<Sample>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            samples,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Label/attack consistency and identifier uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            if !s.attack.consistent_with(s.label) {
                return Err(Error::InvalidInput(format!(
                    "sample {} is labeled {} but has attack type {}",
                    s.id, s.label, s.attack
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }

    /// Reads `<dir>/manifest.csv`; paths are resolved against `dir` and
    /// must exist.
    pub fn load(name: &str, dir: &Path) -> Result<Self> {
        let manifest = dir.join(MANIFEST_FILE);
        let mut reader = csv::Reader::from_path(&manifest).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(&manifest, io),
            other => Error::InvalidInput(format!("{}: {other:?}", manifest.display())),
        })?;
        let mut samples = Vec::new();
        for (line, row) in reader.deserialize::<ManifestRow>().enumerate() {
            let row = row?;
            let at = |e: Error| {
                Error::InvalidInput(format!("{} row {}: {e}", manifest.display(), line + 1))
            };
            let label: Class = row.label.parse().map_err(at)?;
            let attack: AttackType = row.attack_type.parse().map_err(at)?;
            let path = dir.join(&row.relative_path);
            if !path.is_file() {
                return Err(Error::InvalidInput(format!(
                    "{} row {}: image {} does not exist",
                    manifest.display(),
                    line + 1,
                    path.display()
                )));
            }
            samples.push(Sample {
                id: format!("{name}/{}", row.sample_id),
                path,
                label,
                attack,
                domain: name.to_string(),
            });
        }
        Self::new(name, samples)
    }

    /// Writes the manifest for samples stored under `dir`.
    pub fn write_manifest(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut w = csv::Writer::from_path(&path).map_err(|e| Error::InvalidInput(e.to_string()))?;
        for s in &self.samples {
            let rel = s.path.strip_prefix(dir).unwrap_or(&s.path);
            let local = s.id.strip_prefix(&format!("{}/", self.name)).unwrap_or(&s.id);
            w.serialize(ManifestRow {
                sample_id: local.to_string(),
                relative_path: rel.to_string_lossy().into_owned(),
                label: s.label.name().to_string(),
                attack_type: s.attack.name().to_string(),
            })?;
        }
        w.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, class: Class) -> usize {
        self.samples.iter().filter(|s| s.label == class).count()
    }

    pub fn filter(&self, name: impl Into<String>, keep: impl Fn(&Sample) -> bool) -> Self {
        Self {
            name: name.into(),
            samples: self.samples.iter().filter(|s| keep(s)).cloned().collect(),
        }
    }
}

/// Loads and caches face images by path. Images inserted directly (for
/// example synthetic ones) never touch the filesystem.
#[derive(Debug)]
pub struct ImageStore {
    size: usize,
    cache_files: bool,
    images: Mutex<HashMap<PathBuf, Arc<FaceImage>>>,
}

impl ImageStore {
    /// `size` is the side length every loaded image is resized to.
    pub fn new(size: usize, cache_files: bool) -> Self {
        Self {
            size,
            cache_files,
            images: Mutex::new(HashMap::new()),
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn insert(&self, path: impl Into<PathBuf>, img: FaceImage) {
        self.images
            .lock()
            .expect("image cache poisoned")
            .insert(path.into(), Arc::new(img));
    }

    pub fn get(&self, path: &Path) -> Result<Arc<FaceImage>> {
        if let Some(img) = self.images.lock().expect("image cache poisoned").get(path) {
            return Ok(Arc::clone(img));
        }
        let img = Arc::new(FaceImage::load(path, self.size)?);
        if self.cache_files {
            self.images
                .lock()
                .expect("image cache poisoned")
                .insert(path.to_path_buf(), Arc::clone(&img));
        }
        Ok(img)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, label: Class, attack: AttackType) -> Sample {
        Sample {
            id: id.into(),
            path: PathBuf::from(format!("{id}.png")),
            label,
            attack,
            domain: "d".into(),
        }
    }

    #[test]
    fn inconsistent_attack_type_is_rejected() {
        let bad = DomainDataset::new("d", vec![sample("a", Class::Real, AttackType::Print)]);
        assert!(bad.is_err());
        let bad = DomainDataset::new("d", vec![sample("a", Class::Spoof, AttackType::None)]);
        assert!(bad.is_err());
        let dup = DomainDataset::new(
            "d",
            vec![
                sample("a", Class::Real, AttackType::None),
                sample("a", Class::Spoof, AttackType::Print),
            ],
        );
        assert!(dup.is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = FaceImage::zeros(8, 8);
        let mut samples = Vec::new();
        for (i, (label, attack)) in [(Class::Real, AttackType::None), (Class::Spoof, AttackType::Replay)]
            .into_iter()
            .enumerate()
        {
            let path = dir.path().join(format!("img{i}.png"));
            img.save(&path).unwrap();
            samples.push(Sample {
                id: format!("dom/s{i}"),
                path,
                label,
                attack,
                domain: "dom".into(),
            });
        }
        let ds = DomainDataset::new("dom", samples).unwrap();
        ds.write_manifest(dir.path()).unwrap();
        let back = DomainDataset::load("dom", dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn missing_image_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(MANIFEST_FILE),
            "sample_id,relative_path,label,attack_type\nx,nope.png,real,none\n",
        )
        .unwrap();
        let err = DomainDataset::load("dom", dir.path()).unwrap_err().to_string();
        assert!(err.contains("nope.png"), "{err}");
    }

    #[test]
    fn store_serves_inserted_images_without_disk() {
        let store = ImageStore::new(8, false);
        store.insert("mem://a", FaceImage::zeros(8, 8));
        assert_eq!(store.get(Path::new("mem://a")).unwrap().height(), 8);
        assert!(store.get(Path::new("mem://missing")).is_err());
    }
}

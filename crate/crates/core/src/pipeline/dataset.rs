use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use facelock_tensor::Tensor;
use sha2::{Digest, Sha256};

use crate::imageio;
use crate::manipulation::Landmarks;
use crate::toyface;
use crate::{invalid, Error, Image, Result};

/// Sidecar in a dataset directory mapping `identity/file` to five points.
pub const LANDMARKS_FILE: &str = "landmarks.json";

#[derive(Clone, Debug)]
pub struct Sample {
    pub identity: String,
    /// `[1, 3, s, s]`.
    pub image: Image,
    pub landmarks: Landmarks,
}

/// Aligned square portraits grouped by identity.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub size: usize,
    pub samples: Vec<Sample>,
}

/// Identity-disjoint partition.
#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)?.map(|e| e.map(|e| e.path())).collect::<std::io::Result<_>>()?;
    v.sort();
    Ok(v)
}

impl Dataset {
    /// Procedural faces; see [`crate::toyface`].
    pub fn toy(identities: usize, per_identity: usize, size: usize, seed: u64) -> Self {
        let samples = toyface::generate(identities, per_identity, size, seed)
            .into_iter()
            .map(|s| Sample {
                identity: s.identity,
                image: s.image,
                landmarks: s.landmarks,
            })
            .collect();
        Dataset { size, samples }
    }

    /// Reads `dir/<identity>/*.{png,jpg,jpeg}`, centre-cropped and resized.
    /// Landmarks come from [`LANDMARKS_FILE`] when present and scale with
    /// the resize; otherwise the canonical aligned layout is assumed.
    pub fn load_dir(dir: &Path, size: usize) -> Result<Self> {
        let marks: BTreeMap<String, [[f32; 2]; 5]> = match fs::read_to_string(dir.join(LANDMARKS_FILE)) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => BTreeMap::new(),
            Err(e) => return Err(e.into()),
        };
        let mut samples = Vec::new();
        for id_dir in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
            let identity = id_dir.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
            for file in sorted_entries(&id_dir)?.into_iter().filter(|p| is_image(p)) {
                let raw = match image::open(&file) {
                    Ok(raw) => raw,
                    Err(e) => {
                        log::warn!("skipping unreadable {}: {e}", file.display());
                        continue;
                    }
                };
                let key = format!("{identity}/{}", file.file_name().and_then(|n| n.to_str()).unwrap_or_default());
                let landmarks = match marks.get(&key) {
                    Some(pts) => {
                        // Undo the centre crop and resize applied by `prepare`.
                        let (w, h) = (raw.width() as f32, raw.height() as f32);
                        let side = w.min(h);
                        let (ox, oy) = (((w - side) / 2.0).floor(), ((h - side) / 2.0).floor());
                        let k = size as f32 / side;
                        Landmarks {
                            points: pts.map(|[x, y]| ((x - ox) * k, (y - oy) * k)),
                        }
                    }
                    None => Landmarks::canonical(size),
                };
                samples.push(Sample {
                    identity: identity.clone(),
                    image: imageio::prepare(&raw, size),
                    landmarks,
                });
            }
        }
        if samples.is_empty() {
            return invalid(format!("no images under {}", dir.display()));
        }
        Ok(Dataset { size, samples })
    }

    /// Writes the layout [`Dataset::load_dir`] reads back.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        let mut marks = BTreeMap::new();
        let mut counters: BTreeMap<&str, usize> = BTreeMap::new();
        for s in &self.samples {
            let id_dir = dir.join(&s.identity);
            fs::create_dir_all(&id_dir)?;
            let k = counters.entry(&s.identity).or_default();
            let name = format!("{:04}.png", *k);
            *k += 1;
            imageio::save_png(&id_dir.join(&name), &s.image)?;
            marks.insert(format!("{}/{name}", s.identity), s.landmarks.points.map(|(x, y)| [x, y]));
        }
        fs::write(dir.join(LANDMARKS_FILE), serde_json::to_string_pretty(&marks)?)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn identities(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.identity.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }

    /// Stacked `[k, 3, s, s]` batch of the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Image {
        let parts: Vec<Image> = indices.iter().map(|&i| self.samples[i].image.clone()).collect();
        Tensor::stack_batch(&parts)
    }

    /// `[3, s, s]` views for encoder fitting.
    pub fn flat_images(&self) -> Vec<Image> {
        let s = self.size;
        self.samples.iter().map(|x| x.image.clone().reshape(&[3, s, s])).collect()
    }

    /// Content digest over identities and 8-bit pixels.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.size as u64).to_le_bytes());
        for s in &self.samples {
            h.update(s.identity.as_bytes());
            h.update([0]);
            h.update(imageio::to_u8(&s.image));
        }
        hex::encode(h.finalize())
    }

    fn subset(&self, keep: &BTreeSet<String>) -> Dataset {
        Dataset {
            size: self.size,
            samples: self.samples.iter().filter(|s| keep.contains(&s.identity)).cloned().collect(),
        }
    }

    /// 72/14/14 split by identity. Identities are ordered by
    /// `sha256(seed_le || name)`, so membership is stable under adding or
    /// removing other identities only up to the boundary positions.
    pub fn split(&self, seed: u64) -> Result<Split> {
        let mut ids = self.identities();
        if ids.len() < 3 {
            return Err(Error::Invalid(format!("need at least 3 identities to split, found {}", ids.len())));
        }
        ids.sort_by_cached_key(|name| {
            let mut h = Sha256::new();
            h.update(seed.to_le_bytes());
            h.update(name.as_bytes());
            h.finalize().to_vec()
        });
        let n = ids.len();
        let n_val = ((n as f64 * 0.14).round() as usize).max(1);
        let n_test = n_val;
        let n_train = n - n_val - n_test;
        if n_train == 0 {
            return invalid(format!("{n} identities leave none for training"));
        }
        let take = |r: std::ops::Range<usize>| ids[r].iter().cloned().collect::<BTreeSet<_>>();
        Ok(Split {
            train: self.subset(&take(0..n_train)),
            val: self.subset(&take(n_train..n_train + n_val)),
            test: self.subset(&take(n_train + n_val..n)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_is_identity_disjoint_and_sized() {
        let d = Dataset::toy(50, 2, 16, 1);
        let s = d.split(9).unwrap();
        let (a, b, c) = (s.train.identities(), s.val.identities(), s.test.identities());
        assert_eq!((a.len(), b.len(), c.len()), (36, 7, 7));
        assert!(a.iter().all(|i| !b.contains(i) && !c.contains(i)));
        assert!(b.iter().all(|i| !c.contains(i)));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), d.len());
        assert_ne!(d.split(10).unwrap().test.identities(), c);
        assert!(Dataset::toy(2, 1, 16, 1).split(0).is_err());
    }

    #[test]
    fn directory_round_trip() {
        let d = Dataset::toy(3, 2, 24, 4);
        let dir = tempfile::tempdir().unwrap();
        d.write_dir(dir.path()).unwrap();
        let back = Dataset::load_dir(dir.path(), 24).unwrap();
        assert_eq!(back.len(), 6);
        assert_eq!(back.identities(), d.identities());
        assert_eq!(back.digest(), d.digest());
        for (x, y) in back.samples.iter().zip(&d.samples) {
            for (p, q) in x.landmarks.points.iter().zip(&y.landmarks.points) {
                assert!((p.0 - q.0).abs() < 1e-4 && (p.1 - q.1).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn unreadable_files_are_skipped_and_empty_dirs_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(Dataset::load_dir(dir.path(), 16).is_err());
        Dataset::toy(2, 1, 16, 4).write_dir(dir.path()).unwrap();
        let id = Dataset::toy(2, 1, 16, 4).identities()[0].clone();
        std::fs::write(dir.path().join(id).join("broken.png"), b"not a png").unwrap();
        assert_eq!(Dataset::load_dir(dir.path(), 16).unwrap().len(), 2);
    }
}

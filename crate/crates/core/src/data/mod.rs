//! Datasets: procedural occluded figures, PPM manifests, and training-time
//! augmentation.

mod augment;
mod manifest;
pub mod pnm;
mod synth;

pub use augment::{augment, augment_traced, AugmentFlags, AugmentTrace};
pub use manifest::{load_image, load_manifest, resize_bilinear, write_manifest};
pub use synth::{generate_identity, SynthSpec};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::vit::PatchConfig;

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.top..self.top + self.height).contains(&y) && (self.left..self.left + self.width).contains(&x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    /// `[C, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub person_id: usize,
    pub camera_id: usize,
    /// Occluder rectangle of a generated image, if one was drawn.
    pub occluder: Option<Region>,
}

/// Where records come from: `synth:...` or a manifest path.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth(SynthSpec),
    Manifest(std::path::PathBuf),
}

impl DataSource {
    pub fn parse(s: &str) -> Result<Self> {
        if s.starts_with("synth:") {
            Ok(DataSource::Synth(s.parse()?))
        } else if s.is_empty() {
            Err(Error::Config("empty data source".into()))
        } else {
            Ok(DataSource::Manifest(s.into()))
        }
    }

    pub fn load(&self, cfg: &PatchConfig) -> Result<Vec<DatasetRecord>> {
        match self {
            DataSource::Synth(spec) => spec.generate(cfg),
            DataSource::Manifest(p) => load_manifest(Path::new(p), cfg),
        }
    }
}

/// Per-channel mean pixel value over all records.
pub fn channel_mean(records: &[DatasetRecord]) -> Vec<f64> {
    let Some(first) = records.first() else { return Vec::new() };
    let c = first.image.shape()[0];
    let plane = first.image.numel() / c;
    let mut sums = vec![0.0; c];
    for r in records {
        for (ch, s) in sums.iter_mut().enumerate() {
            *s += r.image.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>();
        }
    }
    let n = (records.len() * plane) as f64;
    sums.iter().map(|s| s / n).collect()
}

/// Stacks record images into `[B, C, H, W]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut count = 0;
    for img in images {
        match &shape {
            None => shape = Some(img.shape().to_vec()),
            Some(s) if s.as_slice() != img.shape() => {
                return Err(Error::Data(format!("image shape {:?} differs from {:?}", img.shape(), s)))
            }
            _ => {}
        }
        data.extend_from_slice(img.data());
        count += 1;
    }
    let shape = shape.ok_or_else(|| Error::Data("no images to stack".into()))?;
    let mut full = vec![count];
    full.extend(shape);
    Tensor::new(&full, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn source_parsing() {
        assert!(matches!(DataSource::parse("synth:seed=1,ids=0..2,variants=0..4").unwrap(), DataSource::Synth(_)));
        assert!(matches!(DataSource::parse("data/manifest.csv").unwrap(), DataSource::Manifest(_)));
        assert!(DataSource::parse("synth:ids=zero").is_err());
    }

    #[test]
    fn mean_and_stack() {
        let rec = |v: f64| DatasetRecord {
            image: Tensor::full(&[2, 2, 2], v),
            person_id: 0,
            camera_id: 0,
            occluder: None,
        };
        let rs = [rec(0.2), rec(0.6)];
        let m = channel_mean(&rs);
        assert!(m.iter().all(|v| (v - 0.4).abs() < 1e-15));
        let s = stack_images(rs.iter().map(|r| &r.image)).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2, 2]);
    }
}

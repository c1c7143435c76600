//! Procedural PCB-CT-like scenes: vias, pads and wires on a noisy background.
//!
//! Geometry is sampled first and rasterized into the label map; noise is drawn
//! from a separate substream and touches only the image, so labels never
//! depend on noise settings.

mod io;
mod scene;

pub use io::{read_manifest, read_sample, write_manifest, write_sample};
pub use scene::{generate, render, Element, Shape};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const VIA: u8 = 1;
pub const WIRE: u8 = 2;
pub const PAD: u8 = 3;
pub const CLASS_NAMES: [&str; 4] = ["background", "via", "wire", "pad"];

/// Inclusive integer range.
pub type Range = (usize, usize);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub size: usize,
    pub via_count: Range,
    pub via_radius: Range,
    pub pad_count: Range,
    pub pad_radius: Range,
    pub wire_count: Range,
    pub wire_width: Range,
    pub gradient_amp: f64,
    pub streak_amp: f64,
    pub streak_count: usize,
    pub blur_radius: usize,
    pub grain_sigma: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn with_size(size: usize) -> Self {
        Self {
            size,
            via_count: (1, 3),
            via_radius: (3, 5),
            pad_count: (1, 3),
            pad_radius: (4, 7),
            wire_count: (1, 4),
            wire_width: (2, 3),
            gradient_amp: 0.15,
            streak_amp: 0.1,
            streak_count: 2,
            blur_radius: 1,
            grain_sigma: 0.05,
            seed: 0,
        }
    }

    /// An empty, noiseless scene.
    pub fn blank(size: usize) -> Self {
        Self {
            via_count: (0, 0),
            pad_count: (0, 0),
            wire_count: (0, 0),
            ..Self::with_size(size).noiseless()
        }
    }

    pub fn noiseless(self) -> Self {
        Self {
            gradient_amp: 0.0,
            streak_amp: 0.0,
            streak_count: 0,
            blur_radius: 0,
            grain_sigma: 0.0,
            ..self
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("via_count", self.via_count),
            ("via_radius", self.via_radius),
            ("pad_count", self.pad_count),
            ("pad_radius", self.pad_radius),
            ("wire_count", self.wire_count),
            ("wire_width", self.wire_width),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::Data(format!("{name}: empty range {lo}..={hi}")));
            }
        }
        for (name, (lo, _)) in [
            ("via_radius", self.via_radius),
            ("pad_radius", self.pad_radius),
            ("wire_width", self.wire_width),
        ] {
            if lo == 0 {
                return Err(Error::Data(format!("{name} must be positive")));
            }
        }
        let widest = [
            (self.via_count, self.via_radius),
            (self.pad_count, self.pad_radius),
        ]
        .iter()
        .filter(|(count, _)| count.1 > 0)
        .map(|(_, radius)| radius.1)
        .max()
        .unwrap_or(0);
        if self.size < 2 * widest + 3 {
            return Err(Error::Data(format!(
                "image size {} too small for radius {widest}",
                self.size
            )));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Grayscale image `[1, H, W]` with one class id per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct SegSample {
    pub image: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl SegSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub spec_hash: String,
}

/// Train, val and test occupy consecutive, non-overlapping seed ranges
/// starting at `base_seed`.
pub fn make_split(
    template: &SceneSpec,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    base_seed: u64,
) -> Result<Vec<ManifestEntry>> {
    let total = (n_train + n_val + n_test) as u64;
    if base_seed.checked_add(total).is_none() {
        return Err(Error::Data(format!(
            "seed range {base_seed}+{total} overflows"
        )));
    }
    let mut out = Vec::with_capacity(total as usize);
    let mut seed = base_seed;
    for (split, n) in [
        (Split::Train, n_train),
        (Split::Val, n_val),
        (Split::Test, n_test),
    ] {
        for index in 0..n {
            out.push(ManifestEntry {
                split,
                index,
                seed,
                spec_hash: template.with_seed(seed).hash(),
            });
            seed += 1;
        }
    }
    Ok(out)
}

/// Regenerates a manifest entry, refusing if the template no longer hashes
/// to the recorded spec.
pub fn regenerate(entry: &ManifestEntry, template: &SceneSpec) -> Result<SegSample> {
    let spec = template.with_seed(entry.seed);
    let hash = spec.hash();
    if hash != entry.spec_hash {
        return Err(Error::Data(format!(
            "{} #{}: spec hash {} does not match manifest {}",
            entry.split.name(),
            entry.index,
            hash,
            entry.spec_hash
        )));
    }
    generate(&spec)
}

/// Generates the first `limit` samples of `split`.
pub fn load_split(
    manifest: &[ManifestEntry],
    split: Split,
    template: &SceneSpec,
    limit: usize,
) -> Result<Vec<SegSample>> {
    manifest
        .iter()
        .filter(|e| e.split == split)
        .take(limit)
        .map(|e| regenerate(e, template))
        .collect()
}

/// Fraction of pixels per class over a set of samples.
pub fn class_fractions(samples: &[SegSample], num_classes: usize) -> Vec<f64> {
    let mut counts = vec![0usize; num_classes];
    let mut total = 0usize;
    for s in samples {
        for &l in &s.labels {
            counts[l as usize] += 1;
        }
        total += s.labels.len();
    }
    counts
        .iter()
        .map(|&c| c as f64 / total.max(1) as f64)
        .collect()
}

//! Procedural multi-spectral world with exact per-plane ground truth.

mod augment;
mod export;
mod render;
mod scene;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use export::{export_dataset, write_pfm, read_pfm};
pub use render::{corrupt, render_plane, render_sample, CorruptionConfig};
pub use scene::{generate_scene, Hit, Primitive, SceneSpec, Shape, Texture, MAX_DEPTH, MIN_DEPTH};

use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::spectrum::Spectrum;

/// Capture condition of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Day,
    Night,
    Rain,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Day, Condition::Night, Condition::Rain];

    pub fn as_str(self) -> &'static str {
        match self {
            Condition::Day => "day",
            Condition::Night => "night",
            Condition::Rain => "rain",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Condition::Day => 0,
            Condition::Night => 1,
            Condition::Rain => 2,
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Condition::Day),
            "night" => Ok(Condition::Night),
            "rain" => Ok(Condition::Rain),
            other => Err(Error::Interface(format!("unknown condition '{other}'"))),
        }
    }
}

/// Image, depth and coverage of one camera plane.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectrumPlane {
    /// `(C, H, W)` intensities in `[0, 1]`.
    pub image: Array3<f32>,
    /// `(H, W)` z-depth in meters; zero where not covered.
    pub depth: Array2<f32>,
    pub valid: Array2<bool>,
}

impl SpectrumPlane {
    pub fn height(&self) -> usize {
        self.depth.nrows()
    }

    pub fn width(&self) -> usize {
        self.depth.ncols()
    }
}

/// Co-captured RGB / NIR / THR frames of one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiSpectralSample {
    pub planes: [SpectrumPlane; 3],
    pub condition: Condition,
    /// Calibration matching the (possibly augmented) planes.
    pub rig: CameraRig,
    pub seed: u64,
}

impl MultiSpectralSample {
    pub fn plane(&self, s: Spectrum) -> &SpectrumPlane {
        &self.planes[s.index()]
    }

    pub fn plane_mut(&mut self, s: Spectrum) -> &mut SpectrumPlane {
        &mut self.planes[s.index()]
    }
}

/// Dataset partitions; seeds never collide across partitions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Test => 3,
        }
    }
}

/// Proportions of each condition in a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionMix {
    pub day: f64,
    pub night: f64,
    pub rain: f64,
}

impl ConditionMix {
    pub fn only(c: Condition) -> Self {
        let mut m = Self {
            day: 0.0,
            night: 0.0,
            rain: 0.0,
        };
        match c {
            Condition::Day => m.day = 1.0,
            Condition::Night => m.night = 1.0,
            Condition::Rain => m.rain = 1.0,
        }
        m
    }

    pub fn uniform() -> Self {
        Self {
            day: 1.0 / 3.0,
            night: 1.0 / 3.0,
            rain: 1.0 / 3.0,
        }
    }

    fn weights(&self) -> [f64; 3] {
        [self.day, self.night, self.rain]
    }

    /// Largest-remainder allocation of `n` samples to conditions.
    pub fn counts(&self, n: usize) -> Result<[usize; 3]> {
        let w = self.weights();
        if w.iter().any(|p| !(*p >= 0.0)) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "condition proportions must be non-negative and sum to 1, got {w:?}"
            )));
        }
        let exact: Vec<f64> = w.iter().map(|p| p * n as f64).collect();
        let mut counts = [0usize; 3];
        for i in 0..3 {
            counts[i] = exact[i].floor() as usize;
        }
        let mut rest = n - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| {
            let fa = exact[a] - exact[a].floor();
            let fb = exact[b] - exact[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for i in order {
            if rest == 0 {
                break;
            }
            counts[i] += 1;
            rest -= 1;
        }
        Ok(counts)
    }
}

/// One entry of a deterministic dataset listing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub id: usize,
    pub seed: u64,
    pub condition: Condition,
}

/// Ordered, deterministic sample source.
#[derive(Clone, Debug)]
pub struct Dataset {
    entries: Vec<SampleEntry>,
    rig: CameraRig,
    corruption: CorruptionConfig,
}

/// Scene seed of item `index` in `split`; the split tag in bits 32–33 keeps
/// partitions disjoint for any fixed `split_seed`.
pub fn scene_seed(split_seed: u64, split: Split, index: usize) -> u64 {
    (split_seed << 34) | (split.tag() << 32) | index as u64
}

/// Lists `n` samples of `split`, conditions allocated by `mix` and spread
/// over the sequence by a seeded shuffle.
pub fn make_dataset(
    n: usize,
    split_seed: u64,
    split: Split,
    mix: &ConditionMix,
    rig: &CameraRig,
    corruption: &CorruptionConfig,
) -> Result<Dataset> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;

    let counts = mix.counts(n)?;
    let mut conditions: Vec<Condition> = Condition::ALL
        .iter()
        .zip(counts)
        .flat_map(|(c, k)| std::iter::repeat(*c).take(k))
        .collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(split_seed ^ (split.tag() << 60));
    conditions.shuffle(&mut rng);
    let entries = conditions
        .into_iter()
        .enumerate()
        .map(|(id, condition)| SampleEntry {
            id,
            seed: scene_seed(split_seed, split, id),
            condition,
        })
        .collect();
    Ok(Dataset {
        entries,
        rig: rig.clone(),
        corruption: corruption.clone(),
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[SampleEntry] {
        &self.entries
    }

    pub fn rig(&self) -> &CameraRig {
        &self.rig
    }

    pub fn get(&self, i: usize) -> Result<MultiSpectralSample> {
        let e = self.entries.get(i).ok_or_else(|| {
            Error::Interface(format!("sample {i} out of range for {} entries", self.len()))
        })?;
        render_sample(&generate_scene(e.seed), &self.rig, e.condition, &self.corruption)
    }

    /// Renders every sample.
    pub fn materialize(&self) -> Result<Vec<MultiSpectralSample>> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Keeps only entries of `condition`.
    pub fn filter(&self, condition: Condition) -> Dataset {
        Dataset {
            entries: self
                .entries
                .iter()
                .filter(|e| e.condition == condition)
                .copied()
                .collect(),
            rig: self.rig.clone(),
            corruption: self.corruption.clone(),
        }
    }

    /// Same scenes, every sample rendered under `condition`.
    pub fn with_condition(&self, condition: Condition) -> Dataset {
        Dataset {
            entries: self
                .entries
                .iter()
                .map(|e| SampleEntry { condition, ..*e })
                .collect(),
            rig: self.rig.clone(),
            corruption: self.corruption.clone(),
        }
    }
}

/// Stacked tensors of one spectrum across a batch of samples.
#[derive(Clone, Debug)]
pub struct PlaneBatch {
    /// `(B, C, H, W)`
    pub image: Tensor,
    /// `(B, 1, H, W)`
    pub depth: Tensor,
    /// `(B, 1, H, W)` indicator.
    pub valid: Tensor,
}

/// Stacks the `spectrum` planes of `samples` into tensors of `dtype`.
pub fn stack_plane(
    samples: &[&MultiSpectralSample],
    spectrum: Spectrum,
    dtype: DType,
    dev: &Device,
) -> Result<PlaneBatch> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Interface("empty batch".into()))?
        .plane(spectrum);
    let (c, h, w) = first.image.dim();
    let b = samples.len();
    let mut img = Vec::with_capacity(b * c * h * w);
    let mut depth = Vec::with_capacity(b * h * w);
    let mut valid = Vec::with_capacity(b * h * w);
    for s in samples {
        let p = s.plane(spectrum);
        if p.image.dim() != (c, h, w) {
            return Err(Error::Interface("samples in a batch differ in shape".into()));
        }
        img.extend(p.image.iter().copied());
        depth.extend(p.depth.iter().copied());
        valid.extend(p.valid.iter().map(|v| if *v { 1.0f32 } else { 0.0 }));
    }
    Ok(PlaneBatch {
        image: Tensor::from_vec(img, (b, c, h, w), dev)?.to_dtype(dtype)?,
        depth: Tensor::from_vec(depth, (b, 1, h, w), dev)?.to_dtype(dtype)?,
        valid: Tensor::from_vec(valid, (b, 1, h, w), dev)?.to_dtype(dtype)?,
    })
}

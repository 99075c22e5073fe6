//! Small encoder-decoder depth network shared by all spectra.
//!
//! The bottleneck feature map has `C` channels: the front half is trained to
//! hold spectrum-shared content and the back half spectrum-specific content.
//! The decoder reads the bottleneck plus one skip connection from the level
//! above it, predicts at that level and upsamples bilinearly to full size.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Initializer, Params};

pub const MIN_PRED_DEPTH: f64 = 0.5;
pub const MAX_PRED_DEPTH: f64 = 100.0;

/// Guards the pooled-embedding normalization.
pub const EMBED_EPS: f64 = 1e-12;

/// Initial output depth of an untrained network (m).
const INIT_DEPTH: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub base_channels: usize,
    pub depth_levels: usize,
    /// `C`; must be even.
    pub bottleneck_channels: usize,
    /// Spatial downsampling `s` of the bottleneck; `2^depth_levels`.
    pub scale: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            depth_levels: 3,
            bottleneck_channels: 64,
            scale: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_channels == 0 || self.bottleneck_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "bottleneck_channels must be positive and even, got {}",
                self.bottleneck_channels
            )));
        }
        if self.base_channels < 2 || self.base_channels % 2 != 0 {
            return Err(Error::Config(format!(
                "base_channels must be a positive even integer, got {}",
                self.base_channels
            )));
        }
        if self.depth_levels < 2 || self.scale != 1 << self.depth_levels {
            return Err(Error::Config(format!(
                "scale {} must equal 2^depth_levels with at least two levels",
                self.scale
            )));
        }
        Ok(())
    }

    /// Output width of encoder level `i` (0-based): `base · 2^(i-1)`.
    fn level_width(&self, i: usize) -> usize {
        (self.base_channels << i) / 2
    }

    fn decoder_width(&self) -> usize {
        self.base_channels
    }

    pub fn half(&self) -> usize {
        self.bottleneck_channels / 2
    }
}

/// Bottleneck features with the shared/specific channel split.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    /// `(B, C, H/s, W/s)`
    pub full: Tensor,
}

impl FeatureBundle {
    pub fn new(full: Tensor) -> Result<Self> {
        let c = full.dim(1)?;
        if c % 2 != 0 {
            return Err(Error::Interface(format!("odd channel count {c}")));
        }
        Ok(Self { full })
    }

    pub fn channels(&self) -> usize {
        self.full.dims()[1]
    }

    /// Channels `[0, C/2)`.
    pub fn shared(&self) -> Result<Tensor> {
        Ok(self.full.narrow(1, 0, self.channels() / 2)?)
    }

    /// Channels `[C/2, C)`.
    pub fn specific(&self) -> Result<Tensor> {
        let h = self.channels() / 2;
        Ok(self.full.narrow(1, h, h)?)
    }

    pub fn from_halves(shared: &Tensor, specific: &Tensor) -> Result<Self> {
        Self::new(Tensor::cat(&[shared, specific], 1)?)
    }
}

/// Encoder output: bottleneck bundle plus the skip map the decoder reads.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub bundle: FeatureBundle,
    pub skip: Tensor,
}

/// Spatially pooled, L2-normalized half of a bottleneck.
#[derive(Clone, Debug)]
pub struct GlobalEmbedding {
    /// `(B, C/2)`; unit rows except degenerate ones, which are zero.
    pub vector: Tensor,
    pub degenerate: Vec<bool>,
}

#[derive(Clone, Debug)]
pub struct DepthPrediction {
    /// `(B, 1, H, W)` meters in `[MIN_PRED_DEPTH, MAX_PRED_DEPTH]`.
    pub depth: Tensor,
}

/// Replicates a single-channel image three times; 3-channel input passes.
pub fn channel_repeat(img: &Tensor) -> Result<Tensor> {
    match img.dim(1)? {
        1 => Ok(Tensor::cat(&[img, img, img], 1)?),
        3 => Ok(img.clone()),
        c => Err(Error::Interface(format!("expected 1 or 3 channels, got {c}"))),
    }
}

/// Spatial mean per channel followed by L2 normalization.
pub fn global_embed(half: &Tensor) -> Result<GlobalEmbedding> {
    let pooled = half.mean(D::Minus1)?.mean(D::Minus1)?;
    let norm = pooled.sqr()?.sum_keepdim(1)?.sqrt()?;
    let norms: Vec<f64> = norm.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let degenerate = norms.iter().map(|n| *n < EMBED_EPS).collect();
    let vector = pooled.broadcast_div(&norm.maximum(EMBED_EPS)?)?;
    Ok(GlobalEmbedding { vector, degenerate })
}

/// Maps a logit to depth through a sigmoid in log-depth space.
pub fn depth_activation(logit: &Tensor) -> Result<Tensor> {
    let (lo, hi) = (MIN_PRED_DEPTH.ln(), MAX_PRED_DEPTH.ln());
    // clamped so f32 sigmoid never saturates onto the bounds
    let s = ops::sigmoid(&logit.clamp(-15.0, 15.0)?)?;
    Ok(((s * (hi - lo))? + lo)?.exp()?)
}

fn init_logit() -> f64 {
    let (lo, hi) = (MIN_PRED_DEPTH.ln(), MAX_PRED_DEPTH.ln());
    let p = (INIT_DEPTH.ln() - lo) / (hi - lo);
    (p / (1.0 - p)).ln()
}

/// Single-weight-set depth network for every spectrum.
#[derive(Clone, Debug)]
pub struct DepthNet {
    cfg: BackboneConfig,
    params: Params,
}

impl DepthNet {
    /// Fresh network with seeded He initialization.
    pub fn new(cfg: &BackboneConfig, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let mut init = Initializer::new(seed, dtype);
        let mut p = BTreeMap::new();
        let mut c_in = 3;
        for i in 0..cfg.depth_levels {
            let c_out = cfg.level_width(i);
            let (w, b) = init.conv(c_out, c_in, 2.0)?;
            p.insert(format!("enc.{i}.weight"), w);
            p.insert(format!("enc.{i}.bias"), b);
            c_in = c_out;
        }
        let c = cfg.bottleneck_channels;
        let (w, b) = init.conv(c, c_in, 1.0)?;
        p.insert("bottleneck.weight".into(), w);
        p.insert("bottleneck.bias".into(), b);

        let skip_c = cfg.level_width(cfg.depth_levels - 2);
        let dw = cfg.decoder_width();
        let (w, b) = init.conv(dw, c + skip_c, 2.0)?;
        p.insert("dec.0.weight".into(), w);
        p.insert("dec.0.bias".into(), b);
        let (w, b) = init.conv(dw / 2, dw, 2.0)?;
        p.insert("dec.1.weight".into(), w);
        p.insert("dec.1.bias".into(), b);
        let (w, _) = init.conv(1, dw / 2, 0.1)?;
        p.insert("head.weight".into(), w);
        p.insert("head.bias".into(), init.constant(&[1], init_logit())?);
        Ok(Self {
            cfg: cfg.clone(),
            params: Params::from_tensors(p, true)?,
        })
    }

    pub fn from_params(cfg: &BackboneConfig, params: Params) -> Result<Self> {
        cfg.validate()?;
        let net = Self {
            cfg: cfg.clone(),
            params,
        };
        // touch every expected name so a bad archive fails early
        for i in 0..cfg.depth_levels {
            net.params.get(&format!("enc.{i}.weight"))?;
        }
        for name in ["bottleneck.weight", "dec.0.weight", "dec.1.weight", "head.weight"] {
            net.params.get(name)?;
        }
        Ok(net)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    /// Same weights, detached: usable only for inference or as a frozen
    /// module inside another graph.
    pub fn frozen(&self) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            params: self.params.frozen()?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            params: self.params.to_dtype(dtype)?,
        })
    }

    fn conv(&self, name: &str, x: &Tensor, stride: usize) -> Result<Tensor> {
        let w = self.params.get(&format!("{name}.weight"))?;
        let b = self.params.get(&format!("{name}.bias"))?;
        Ok(ops::conv3x3(x, w, b, stride)?)
    }

    /// `(B, 3, H, W)` image in `[0, 1]` to bottleneck features.
    pub fn encode(&self, img: &Tensor) -> Result<Encoded> {
        let (_, c, h, w) = img.dims4()?;
        if c != 3 {
            return Err(Error::Interface(format!("encoder expects 3 channels, got {c}")));
        }
        let s = self.cfg.scale;
        if h % s != 0 || w % s != 0 {
            return Err(Error::Interface(format!(
                "input {h}x{w} is not divisible by the bottleneck scale {s}"
            )));
        }
        let mut x = ((img - 0.45)? / 0.25)?;
        let mut skip = None;
        for i in 0..self.cfg.depth_levels {
            x = self.conv(&format!("enc.{i}"), &x, 2)?.relu()?;
            if i + 2 == self.cfg.depth_levels {
                skip = Some(x.clone());
            }
        }
        let full = self.conv("bottleneck", &x, 1)?;
        Ok(Encoded {
            bundle: FeatureBundle::new(full)?,
            skip: skip.expect("at least two levels"),
        })
    }

    /// Bottleneck features plus skip map to a full-resolution depth map of
    /// `out_h × out_w`.
    pub fn decode(
        &self,
        feature: &Tensor,
        skip: &Tensor,
        out_h: usize,
        out_w: usize,
    ) -> Result<DepthPrediction> {
        let (_, c, _, _) = feature.dims4()?;
        if c != self.cfg.bottleneck_channels {
            return Err(Error::Interface(format!(
                "decoder expects {} channels, got {c}",
                self.cfg.bottleneck_channels
            )));
        }
        let (_, _, sh, sw) = skip.dims4()?;
        let up = ops::resize_bilinear(feature, sh, sw)?;
        let x = Tensor::cat(&[&up, skip], 1)?;
        let x = self.conv("dec.0", &x, 1)?.relu()?;
        let x = self.conv("dec.1", &x, 1)?.relu()?;
        let logit = self.conv("head", &x, 1)?;
        let logit = ops::resize_bilinear(&logit, out_h, out_w)?;
        Ok(DepthPrediction {
            depth: depth_activation(&logit)?,
        })
    }

    /// Image of any spectrum through the shared network.
    pub fn forward_single(&self, img: &Tensor) -> Result<(Encoded, DepthPrediction)> {
        let (_, _, h, w) = img.dims4()?;
        let enc = self.encode(&channel_repeat(img)?)?;
        let pred = self.decode(&enc.bundle.full, &enc.skip, h, w)?;
        Ok((enc, pred))
    }
}

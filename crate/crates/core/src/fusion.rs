//! Thermal-anchored fusion at the bottleneck.
//!
//! Features of the other two spectra are warped into a chosen plane, scored
//! against the thermal shared feature, concatenated into a `2C` map and
//! reduced back to `C` by one windowed self-attention block plus a
//! projection. The backbone is only read, never written.

use std::collections::BTreeMap;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{align_to_plane, CameraRig};
use crate::model::{DepthNet, DepthPrediction, Encoded, FeatureBundle};
use crate::ops;
use crate::params::{Initializer, Params};
use crate::spectrum::Spectrum;

pub const MASK_EPS: f64 = 1e-8;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionBlockConfig {
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
    /// Divide the fused shared block by the mask sum instead of the plain sum.
    pub normalize_shared: bool,
}

impl Default for FusionBlockConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            window: 4,
            mlp_ratio: 4,
            normalize_shared: false,
        }
    }
}

impl FusionBlockConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        let d = 2 * channels;
        if self.heads == 0 || d % self.heads != 0 {
            return Err(Error::Config(format!(
                "{d} fused channels are not divisible by {} heads",
                self.heads
            )));
        }
        if self.window == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("window and mlp_ratio must be positive".into()));
        }
        Ok(())
    }
}

/// Per-pixel cosine between the thermal and a target shared feature.
#[derive(Clone, Debug)]
pub struct AttentionMask {
    /// `(B, 1, H, W)` raw cosine in `[-1, 1]`.
    pub values: Tensor,
}

impl AttentionMask {
    /// Negative similarities clamped to zero.
    pub fn weights(&self) -> Result<Tensor> {
        Ok(self.values.relu()?)
    }
}

#[derive(Clone, Debug)]
pub struct FusedFeature {
    /// `(B, C, H_s, W_s)`
    pub map: Tensor,
    pub plane: Spectrum,
}

pub fn attention_mask(shared_thr: &Tensor, shared_tgt: &Tensor, eps: f64) -> Result<AttentionMask> {
    if shared_thr.dims() != shared_tgt.dims() {
        return Err(Error::Interface(format!(
            "mask inputs differ in shape: {:?} vs {:?}",
            shared_thr.dims(),
            shared_tgt.dims()
        )));
    }
    let dot = (shared_thr * shared_tgt)?.sum_keepdim(1)?;
    // sqrt of a sum of squares has an infinite slope at zero; offset stays far below eps
    let norm = |x: &Tensor| -> Result<Tensor> { Ok((x.sqr()?.sum_keepdim(1)? + 1e-30)?.sqrt()?) };
    let denom = (norm(shared_thr)? * norm(shared_tgt)?)?.maximum(eps)?;
    Ok(AttentionMask {
        values: (dot / denom)?.clamp(-1.0, 1.0)?,
    })
}

/// Mask-weighted concatenation `[fused-shared, rgb-sp, nir-sp, thr-sp]`.
///
/// Bundles and mask weights are indexed in `Spectrum::ALL` order; weights
/// are `(B, 1, H, W)`.
pub fn aggregate(
    bundles: &[FeatureBundle; 3],
    weights: &[Tensor; 3],
    normalize_shared: bool,
) -> Result<Tensor> {
    let dims = bundles[0].full.dims().to_vec();
    for (b, w) in bundles.iter().zip(weights) {
        if b.full.dims() != dims.as_slice() {
            return Err(Error::Interface(format!(
                "bundle shape {:?} differs from {:?}",
                b.full.dims(),
                dims
            )));
        }
        let wd = w.dims();
        if wd.len() != 4 || wd[0] != dims[0] || wd[1] != 1 || wd[2..] != dims[2..] {
            return Err(Error::Interface(format!(
                "mask shape {wd:?} does not fit features {dims:?}"
            )));
        }
    }
    let mut shared = bundles[0].shared()?.broadcast_mul(&weights[0])?;
    for i in 1..3 {
        shared = (shared + bundles[i].shared()?.broadcast_mul(&weights[i])?)?;
    }
    if normalize_shared {
        let total = ((&weights[0] + &weights[1])? + &weights[2])?;
        shared = shared.broadcast_div(&(total + MASK_EPS)?)?;
    }
    let mut parts = vec![shared];
    for i in 0..3 {
        parts.push(bundles[i].specific()?.broadcast_mul(&weights[i])?);
    }
    Ok(Tensor::cat(&parts, 1)?)
}

/// Windowed-attention block plus the `2C → C` projection.
#[derive(Clone, Debug)]
pub struct FusionModule {
    cfg: FusionBlockConfig,
    channels: usize,
    params: Params,
}

impl FusionModule {
    /// Attention branches start near zero and the projection starts as the
    /// mean of the shared block and of the three specific blocks, so an
    /// untrained module already emits a bottleneck-like map.
    pub fn new(cfg: &FusionBlockConfig, channels: usize, seed: u64, dtype: DType) -> Result<Self> {
        cfg.validate(channels)?;
        let d = 2 * channels;
        let hidden = cfg.mlp_ratio * d;
        let mut init = Initializer::new(seed, dtype);
        let mut p = BTreeMap::new();
        for ln in ["norm1", "norm2"] {
            p.insert(format!("fusion.{ln}.gamma"), init.constant(&[d], 1.0)?);
            p.insert(format!("fusion.{ln}.beta"), init.constant(&[d], 0.0)?);
        }
        let (w, b) = init.linear(3 * d, d, 1.0)?;
        p.insert("fusion.qkv.weight".into(), w);
        p.insert("fusion.qkv.bias".into(), b);
        p.insert("fusion.attn_out.weight".into(), init.normal(&[d, d], 0.02)?);
        p.insert("fusion.attn_out.bias".into(), init.constant(&[d], 0.0)?);
        let (w, b) = init.linear(hidden, d, 2.0)?;
        p.insert("fusion.mlp1.weight".into(), w);
        p.insert("fusion.mlp1.bias".into(), b);
        p.insert("fusion.mlp2.weight".into(), init.normal(&[d, hidden], 0.02)?);
        p.insert("fusion.mlp2.bias".into(), init.constant(&[d], 0.0)?);
        let half = channels / 2;
        let mut proj = vec![0.0f64; channels * d];
        for j in 0..half {
            proj[j * d + j] = 1.0 / 3.0;
            for block in 1..4 {
                proj[(half + j) * d + block * half + j] = 1.0 / 3.0;
            }
        }
        let proj = Tensor::from_vec(proj, (channels, d), &candle_core::Device::Cpu)?.to_dtype(dtype)?;
        let noise = init.normal(&[channels, d], 0.01)?;
        p.insert("fusion.proj.weight".into(), (proj + noise)?);
        p.insert("fusion.proj.bias".into(), init.constant(&[channels], 0.0)?);
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            params: Params::from_tensors(p, true)?,
        })
    }

    pub fn from_params(cfg: &FusionBlockConfig, channels: usize, params: Params) -> Result<Self> {
        cfg.validate(channels)?;
        let w = params.get("fusion.proj.weight")?;
        if w.dims() != [channels, 2 * channels] {
            return Err(Error::Interface(format!(
                "projection {:?} does not map {} to {channels} channels",
                w.dims(),
                2 * channels
            )));
        }
        for name in ["fusion.qkv.weight", "fusion.attn_out.weight", "fusion.mlp1.weight", "fusion.mlp2.weight"] {
            params.get(name)?;
        }
        Ok(Self {
            cfg: cfg.clone(),
            channels,
            params,
        })
    }

    pub fn config(&self) -> &FusionBlockConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn frozen(&self) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            channels: self.channels,
            params: self.params.frozen()?,
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            cfg: self.cfg.clone(),
            channels: self.channels,
            params: self.params.to_dtype(dtype)?,
        })
    }

    fn p(&self, name: &str) -> Result<&Tensor> {
        self.params.get(&format!("fusion.{name}"))
    }

    fn linear(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        Ok(ops::linear(
            x,
            self.p(&format!("{name}.weight"))?,
            self.p(&format!("{name}.bias"))?,
        )?)
    }

    fn norm(&self, name: &str, x: &Tensor) -> Result<Tensor> {
        Ok(ops::layer_norm(
            x,
            self.p(&format!("{name}.gamma"))?,
            self.p(&format!("{name}.beta"))?,
            LN_EPS,
        )?)
    }

    /// Multi-head self-attention within each `(N, T, D)` window.
    fn window_attention(&self, x: &Tensor) -> Result<Tensor> {
        let (n, t, d) = x.dims3()?;
        let heads = self.cfg.heads;
        let hd = d / heads;
        let qkv = self.linear("qkv", x)?.reshape((n, t, 3, heads, hd))?;
        let part = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i, 1)?
                .squeeze(2)?
                .transpose(1, 2)?
                .contiguous()?
                .reshape((n * heads, t, hd))?)
        };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = (ops::bmm(&q, &k.transpose(1, 2)?)? / (hd as f64).sqrt())?;
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = ops::bmm(&attn, &v)?
            .reshape((n, heads, t, hd))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((n, t, d))?;
        self.linear("attn_out", &out)
    }

    /// One attention block over non-overlapping windows, then the per-pixel
    /// projection. Input `(B, 2C, H, W)` with `H`, `W` multiples of the window.
    pub fn fusion_forward(&self, f_cat: &Tensor, plane: Spectrum) -> Result<FusedFeature> {
        let (b, d, h, w) = f_cat.dims4()?;
        if d != 2 * self.channels {
            return Err(Error::Interface(format!(
                "fusion expects {} channels, got {d}",
                2 * self.channels
            )));
        }
        let win = self.cfg.window;
        if h % win != 0 || w % win != 0 {
            return Err(Error::Interface(format!(
                "{h}x{w} map is not divisible by window {win}"
            )));
        }
        let (nh, nw) = (h / win, w / win);
        let windows = f_cat
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((b * nh, win, nw, win * d))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * nh * nw, win * win, d))?;
        let x = (&windows + self.window_attention(&self.norm("norm1", &windows)?)?)?;
        let hidden = self.linear("mlp1", &self.norm("norm2", &x)?)?.gelu()?;
        let x = (&x + self.linear("mlp2", &hidden)?)?;
        let tokens = x
            .reshape((b * nh, nw, win, win * d))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, h, w, d))?;
        let out = self.linear("proj", &tokens)?.permute((0, 3, 1, 2))?.contiguous()?;
        Ok(FusedFeature { map: out, plane })
    }
}

/// Single-pass backbone outputs for the three spectra of a batch.
#[derive(Clone, Debug)]
pub struct SpectrumOutputs {
    /// Indexed in `Spectrum::ALL` order.
    pub encoded: [Encoded; 3],
    pub predictions: [DepthPrediction; 3],
}

#[derive(Clone, Debug)]
pub struct FusedOutput {
    pub feature: FusedFeature,
    pub prediction: DepthPrediction,
    /// Raw masks in `Spectrum::ALL` order.
    pub masks: [AttentionMask; 3],
    /// `(B, 1, H_s, W_s)` per-spectrum warp validity in the plane.
    pub valid: [Tensor; 3],
}

/// Fused features and depth in `plane`'s frame.
///
/// The other spectra are warped with `depth`, or with the plane's own
/// single-pass prediction when `depth` is `None`.
pub fn fuse_in_plane(
    plane: Spectrum,
    outputs: &SpectrumOutputs,
    rigs: &[&CameraRig],
    module: &FusionModule,
    net: &DepthNet,
    depth: Option<&Tensor>,
) -> Result<FusedOutput> {
    let pi = plane.index();
    let own = &outputs.encoded[pi];
    let (b, _, hs, ws) = own.bundle.full.dims4()?;
    let depth = match depth {
        Some(d) => d.detach(),
        None => outputs.predictions[pi].depth.detach(),
    };
    let ones = Tensor::ones((b, 1, hs, ws), own.bundle.full.dtype(), own.bundle.full.device())?;
    let mut bundles = Vec::with_capacity(3);
    let mut valid = Vec::with_capacity(3);
    for s in Spectrum::ALL {
        if s == plane {
            bundles.push(own.bundle.clone());
            valid.push(ones.clone());
        } else {
            let w = align_to_plane(
                &outputs.encoded[s.index()].bundle.full,
                s,
                &depth,
                None,
                plane,
                rigs,
            )?;
            bundles.push(FeatureBundle::new(w.data)?);
            valid.push(w.valid);
        }
    }
    let bundles: [FeatureBundle; 3] = bundles.try_into().expect("three spectra");
    let valid: [Tensor; 3] = valid.try_into().expect("three spectra");
    let thr_shared = bundles[Spectrum::Thr.index()].shared()?;
    let mut masks = Vec::with_capacity(3);
    let mut weights = Vec::with_capacity(3);
    for (i, bundle) in bundles.iter().enumerate() {
        let m = attention_mask(&thr_shared, &bundle.shared()?, MASK_EPS)?;
        weights.push((m.weights()? * &valid[i])?);
        masks.push(m);
    }
    let weights: [Tensor; 3] = weights.try_into().expect("three spectra");
    let f_cat = aggregate(&bundles, &weights, module.config().normalize_shared)?;
    let win = module.config().window;
    let (ph, pw) = (hs.div_ceil(win) * win, ws.div_ceil(win) * win);
    let padded = f_cat.pad_with_zeros(2, 0, ph - hs)?.pad_with_zeros(3, 0, pw - ws)?;
    let fused = module.fusion_forward(&padded, plane)?;
    let map = fused.map.narrow(2, 0, hs)?.narrow(3, 0, ws)?;
    let (_, _, out_h, out_w) = outputs.predictions[pi].depth.dims4()?;
    let prediction = net.decode(&map, &own.skip, out_h, out_w)?;
    Ok(FusedOutput {
        feature: FusedFeature { map, plane },
        prediction,
        masks: masks.try_into().expect("three spectra"),
        valid,
    })
}

/// Runs the backbone on one image per spectrum.
pub fn single_pass(net: &DepthNet, images: &[Tensor; 3]) -> Result<SpectrumOutputs> {
    let mut encoded = Vec::with_capacity(3);
    let mut predictions = Vec::with_capacity(3);
    for img in images {
        let (e, p) = net.forward_single(img)?;
        encoded.push(e);
        predictions.push(p);
    }
    Ok(SpectrumOutputs {
        encoded: encoded.try_into().expect("three spectra"),
        predictions: predictions.try_into().expect("three spectra"),
    })
}

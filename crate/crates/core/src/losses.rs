//! Training objectives: supervised depth, global and dense contrastive
//! alignment, cross-plane geometric consistency and the stage totals.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variance weight of the scale-invariant log loss.
pub const SILOG_LAMBDA: f64 = 0.85;

const NORM_EPS: f64 = 1e-24;

/// Source of negatives for the dense contrastive term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeMode {
    /// The three spectrum-specific vectors at the query location.
    #[default]
    Local,
    /// Every valid specific vector of the same sample, all locations.
    GlobalPool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub lambda_cont: f64,
    pub gamma: f64,
    pub negatives: NegativeMode,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lambda_cont: 0.01,
            gamma: 0.5,
            negatives: NegativeMode::Local,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be positive, got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(self.lambda_cont >= 0.0) {
            return Err(Error::Config("lambda_cont must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FuseLossConfig {
    pub lambda_geo: f64,
}

impl Default for FuseLossConfig {
    fn default() -> Self {
        Self { lambda_geo: 0.5 }
    }
}

impl FuseLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_geo >= 0.0) {
            return Err(Error::Config("lambda_geo must be nonnegative".into()));
        }
        Ok(())
    }
}

/// One training step's loss breakdown, logged as a JSON line.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub step: usize,
    pub stage: String,
    pub l_sup: f64,
    pub l_global: f64,
    pub l_local: f64,
    pub l_geo: f64,
    pub total: f64,
}

impl LossReport {
    pub fn to_json_line(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn align_total(&self, cfg: &ContrastiveConfig) -> f64 {
        self.l_sup + cfg.lambda_cont * ((1.0 - cfg.gamma) * self.l_global + cfg.gamma * self.l_local)
    }

    pub fn fuse_total(&self, cfg: &FuseLossConfig) -> f64 {
        self.l_sup + cfg.lambda_geo * self.l_geo
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn count(mask: &Tensor) -> Result<f64> {
    scalar(&mask.to_dtype(DType::F64)?.sum_all()?)
}

/// Scale-invariant log loss over valid pixels.
///
/// `pred`, `gt` and `valid` are `(B, 1, H, W)`; `valid` is a 0/1 indicator.
pub fn supervised_depth_loss(pred: &Tensor, gt: &Tensor, valid: &Tensor) -> Result<Tensor> {
    let valid = valid.to_dtype(pred.dtype())?;
    let n = count(&valid)?;
    if n < 1.0 {
        return Err(Error::Domain("supervised loss over an empty valid mask".into()));
    }
    let mask = valid.ne(0.0)?;
    let ones = pred.ones_like()?;
    let p = mask.where_cond(pred, &ones)?;
    let g = mask.where_cond(&gt.to_dtype(pred.dtype())?, &ones)?;
    let diff = ((p.log()? - g.log()?)? * &valid)?;
    let mean = (diff.sum_all()? / n)?;
    let mean_sq = (diff.sqr()?.sum_all()? / n)?;
    Ok((mean_sq - (mean.sqr()? * SILOG_LAMBDA)?)?)
}

/// Stable `log Σ exp` along the last axis, with an optional 0/1 mask
/// selecting which entries take part.
fn masked_logsumexp(x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    let e = match mask {
        Some(mask) => (e * mask)?,
        None => e,
    };
    Ok((e.sum_keepdim(D::Minus1)?.log()? + m)?.squeeze(D::Minus1)?)
}

fn row_dots(q: &Tensor, keys: &[&Tensor]) -> Result<Tensor> {
    let cols = keys
        .iter()
        .map(|k| Ok((q * *k)?.sum_keepdim(D::Minus1)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&cols, D::Minus1)?)
}

/// InfoNCE over pooled embeddings, one term per batch row, batch-meaned.
///
/// All inputs are `(B, D)`. The query is detached.
pub fn global_contrastive(
    q: &Tensor,
    positives: &[&Tensor],
    negatives: &[&Tensor],
    tau: f64,
) -> Result<Tensor> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Domain(
            "contrastive loss needs at least one positive and one negative".into(),
        ));
    }
    let q = q.detach();
    let pos = (row_dots(&q, positives)? / tau)?;
    let neg = (row_dots(&q, negatives)? / tau)?;
    let all = Tensor::cat(&[&pos, &neg], 1)?;
    let per_row = (masked_logsumexp(&all, None)? - masked_logsumexp(&pos, None)?)?;
    Ok(per_row.mean_all()?)
}

/// Unit-normalizes `(B, D, H, W)` maps along channels.
pub fn normalize_channels(x: &Tensor) -> Result<Tensor> {
    let n = (x.sqr()?.sum_keepdim(1)? + NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&n)?)
}

/// Per-spectrum feature halves aligned to a common plane.
#[derive(Clone, Debug)]
pub struct AlignedHalves {
    /// `(B, C/2, H, W)` for RGB, NIR, THR.
    pub shared: [Tensor; 3],
    pub specific: [Tensor; 3],
}

/// Dense InfoNCE: the RGB shared vector at each valid location queries the
/// NIR and THR shared vectors there against specific-feature negatives.
///
/// `valid` is `(B, 1, H, W)`; the result is the mean over valid locations.
pub fn dense_local_contrastive(
    halves: &AlignedHalves,
    valid: &Tensor,
    tau: f64,
    mode: NegativeMode,
) -> Result<Tensor> {
    let dtype = halves.shared[0].dtype();
    let valid = valid.to_dtype(dtype)?;
    let n = count(&valid)?;
    if n < 1.0 {
        return Err(Error::Domain("dense contrastive loss with no valid location".into()));
    }
    let (b, d, h, w) = halves.shared[0].dims4()?;
    // (B, H·W, D) unit vectors
    let tokens = |x: &Tensor| -> Result<Tensor> {
        Ok(normalize_channels(x)?
            .reshape((b, d, h * w))?
            .transpose(1, 2)?
            .contiguous()?)
    };
    let q = tokens(&halves.shared[0])?.detach();
    let pos = [tokens(&halves.shared[1])?, tokens(&halves.shared[2])?];
    let sp = [
        tokens(&halves.specific[0])?,
        tokens(&halves.specific[1])?,
        tokens(&halves.specific[2])?,
    ];
    let pos_logits = (row_dots(&q, &[&pos[0], &pos[1]])? / tau)?;
    let flat_valid = valid.reshape((b, h * w))?;
    let per_loc = match mode {
        NegativeMode::Local => {
            let neg = (row_dots(&q, &[&sp[0], &sp[1], &sp[2]])? / tau)?;
            let all = Tensor::cat(&[&pos_logits, &neg], 2)?;
            (masked_logsumexp(&all, None)? - masked_logsumexp(&pos_logits, None)?)?
        }
        NegativeMode::GlobalPool => {
            // (B, 3·H·W, D) pool of every specific vector in the sample
            let pool = Tensor::cat(&[&sp[0], &sp[1], &sp[2]], 1)?;
            let neg = (crate::ops::bmm(&q, &pool.transpose(1, 2)?)? / tau)?;
            let pool_mask = Tensor::cat(&[&flat_valid, &flat_valid, &flat_valid], 1)?
                .unsqueeze(1)?
                .broadcast_as((b, h * w, 3 * h * w))?;
            let ones = pos_logits.ones_like()?;
            let all = Tensor::cat(&[&pos_logits, &neg], 2)?;
            let mask = Tensor::cat(&[&ones, &pool_mask.contiguous()?], 2)?;
            (masked_logsumexp(&all, Some(&mask))? - masked_logsumexp(&pos_logits, None)?)?
        }
    };
    Ok(((per_loc * flat_valid)?.sum_all()? / n)?)
}

/// Mean of `|a − b| / (a + b)` over valid pixels.
pub fn geometric_consistency(d_warped: &Tensor, d_pred: &Tensor, valid: &Tensor) -> Result<Tensor> {
    let dtype = d_pred.dtype();
    let valid = valid.to_dtype(dtype)?;
    let n = count(&valid)?;
    if n < 1.0 {
        return Err(Error::Domain("geometric consistency over an empty mask".into()));
    }
    let mask = valid.ne(0.0)?;
    let ones = d_pred.ones_like()?;
    let a = mask.where_cond(&d_warped.to_dtype(dtype)?, &ones)?;
    let b = mask.where_cond(d_pred, &ones)?;
    let r = ((&a - &b)?.abs()? / (&a + &b)?)?;
    Ok(((r * valid)?.sum_all()? / n)?)
}

/// Align-stage total: summed supervised terms plus the weighted contrastive
/// mix. Returns the differentiable total and its logged breakdown.
pub fn align_objective(
    l_sup: &[Tensor; 3],
    l_global: &Tensor,
    l_local: &Tensor,
    cfg: &ContrastiveConfig,
) -> Result<(Tensor, LossReport)> {
    let sup = ((&l_sup[0] + &l_sup[1])? + &l_sup[2])?;
    let cont = ((l_global * (1.0 - cfg.gamma))? + (l_local * cfg.gamma)?)?;
    let total = (&sup + (cont * cfg.lambda_cont)?)?;
    let mut report = LossReport {
        stage: "align".into(),
        l_sup: scalar(&sup)?,
        l_global: scalar(l_global)?,
        l_local: scalar(l_local)?,
        ..Default::default()
    };
    report.total = report.align_total(cfg);
    Ok((total, report))
}

/// Fuse-stage total: supervised term plus the pair-averaged consistency.
pub fn fuse_objective(
    l_sup_fused: &Tensor,
    l_geo_pairs: &[Tensor],
    cfg: &FuseLossConfig,
) -> Result<(Tensor, LossReport)> {
    let geo = if l_geo_pairs.is_empty() {
        l_sup_fused.zeros_like()?
    } else {
        (Tensor::stack(l_geo_pairs, 0)?.sum_all()? / l_geo_pairs.len() as f64)?
    };
    let total = (l_sup_fused + (&geo * cfg.lambda_geo)?)?;
    let mut report = LossReport {
        stage: "fuse".into(),
        l_sup: scalar(l_sup_fused)?,
        l_geo: scalar(&geo)?,
        ..Default::default()
    };
    report.total = report.fuse_total(cfg);
    Ok((total, report))
}

//! Model evaluation over datasets, grouped by modality and condition.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{fuse_in_plane, single_pass, FusionModule, SpectrumOutputs};
use crate::geometry::{project_flow_batch, synthesize_depth, CameraRig, ProjectionSetup};
use crate::losses::geometric_consistency;
use crate::metrics::{average_row, with_averages, EvalConfig, MetricAccumulator, MetricReport};
use crate::model::{global_embed, DepthNet};
use crate::spectrum::Spectrum;
use crate::synth::{stack_plane, Condition, Dataset, MultiSpectralSample, PlaneBatch};

pub const FUSED_LABEL: &str = "fused";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    PerSpectrum,
    Fused,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-spectrum" => Ok(EvalMode::PerSpectrum),
            "fused" => Ok(EvalMode::Fused),
            other => Err(Error::Interface(format!("unknown eval mode '{other}'"))),
        }
    }
}

/// Stacked planes and per-sample rigs of a batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub planes: [PlaneBatch; 3],
    pub rigs: Vec<CameraRig>,
    pub conditions: Vec<Condition>,
}

impl Batch {
    pub fn new(samples: &[&MultiSpectralSample], dtype: DType) -> Result<Self> {
        let dev = Device::Cpu;
        let planes = [
            stack_plane(samples, Spectrum::Rgb, dtype, &dev)?,
            stack_plane(samples, Spectrum::Nir, dtype, &dev)?,
            stack_plane(samples, Spectrum::Thr, dtype, &dev)?,
        ];
        Ok(Self {
            planes,
            rigs: samples.iter().map(|s| s.rig.clone()).collect(),
            conditions: samples.iter().map(|s| s.condition).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.rigs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rigs.is_empty()
    }

    pub fn rig_refs(&self) -> Vec<&CameraRig> {
        self.rigs.iter().collect()
    }

    pub fn images(&self) -> [Tensor; 3] {
        [
            self.planes[0].image.clone(),
            self.planes[1].image.clone(),
            self.planes[2].image.clone(),
        ]
    }
}

/// Per-sample `(pred, gt, valid)` slices of a `(B, 1, H, W)` prediction.
fn per_sample(pred: &Tensor, plane: &PlaneBatch) -> Result<Vec<(Vec<f32>, Vec<f32>, Vec<bool>)>> {
    let b = pred.dim(0)?;
    let p: Vec<f32> = pred.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let g: Vec<f32> = plane.depth.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let v: Vec<f32> = plane.valid.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let n = p.len() / b;
    Ok((0..b)
        .map(|i| {
            let r = i * n..(i + 1) * n;
            (
                p[r.clone()].to_vec(),
                g[r.clone()].to_vec(),
                v[r].iter().map(|x| *x > 0.5).collect(),
            )
        })
        .collect())
}

/// Runs the backbone (and the fusion module when given) on every sample.
struct Evaluator<'a> {
    net: &'a DepthNet,
    fusion: Option<&'a FusionModule>,
    mode: EvalMode,
    cfg: &'a EvalConfig,
    acc: BTreeMap<(String, Condition), MetricAccumulator>,
}

impl<'a> Evaluator<'a> {
    fn labels(&self) -> Vec<String> {
        match self.mode {
            EvalMode::PerSpectrum => Spectrum::ALL.iter().map(|s| s.to_string()).collect(),
            EvalMode::Fused => Spectrum::ALL
                .iter()
                .map(|s| format!("{FUSED_LABEL}-{s}"))
                .collect(),
        }
    }

    fn add_batch(&mut self, samples: &[&MultiSpectralSample]) -> Result<()> {
        let batch = Batch::new(samples, DType::F32)?;
        let outs = single_pass(self.net, &batch.images())?;
        let preds: Vec<Tensor> = match self.mode {
            EvalMode::PerSpectrum => outs.predictions.iter().map(|p| p.depth.clone()).collect(),
            EvalMode::Fused => {
                let module = self
                    .fusion
                    .ok_or_else(|| Error::Interface("fused evaluation needs a fusion module".into()))?;
                let rigs = batch.rig_refs();
                Spectrum::ALL
                    .iter()
                    .map(|p| Ok(fuse_in_plane(*p, &outs, &rigs, module, self.net, None)?.prediction.depth))
                    .collect::<Result<_>>()?
            }
        };
        let labels = self.labels();
        for (k, pred) in preds.iter().enumerate() {
            for (i, (p, g, v)) in per_sample(pred, &batch.planes[k])?.into_iter().enumerate() {
                self.acc
                    .entry((labels[k].clone(), batch.conditions[i]))
                    .or_default()
                    .add(&p, &g, &v, self.cfg)?;
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<Vec<MetricReport>> {
        let mut rows = Vec::new();
        let mut fused: BTreeMap<Condition, Vec<MetricReport>> = BTreeMap::new();
        for label in self.labels() {
            for c in Condition::ALL {
                match self.acc.get(&(label.clone(), c)) {
                    Some(a) if a.pixels() > 0 => {
                        let r = a.report(&label, c.as_str())?;
                        if self.mode == EvalMode::Fused {
                            fused.entry(c).or_default().push(r.clone());
                        }
                        rows.push(r);
                    }
                    _ => warn!("no samples for {label}/{c}; row omitted"),
                }
            }
        }
        if self.mode == EvalMode::Fused {
            // the headline fused row of a condition is the mean over the three planes
            let mut headline = Vec::new();
            for c in Condition::ALL {
                if let Some(group) = fused.get(&c) {
                    let refs: Vec<&MetricReport> = group.iter().collect();
                    if let Some(mut r) = average_row(&refs, FUSED_LABEL) {
                        r.condition = c.as_str().to_string();
                        headline.push(r);
                    }
                }
            }
            headline.extend(rows);
            rows = headline;
        }
        Ok(with_averages(rows))
    }
}

/// Metric rows per (modality, condition), each modality followed by its
/// `avg` row. Fused mode reports `fused-<plane>` rows plus a `fused` row
/// averaging the three planes.
pub fn evaluate_samples(
    net: &DepthNet,
    fusion: Option<&FusionModule>,
    samples: &[MultiSpectralSample],
    mode: EvalMode,
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    if mode == EvalMode::Fused && fusion.is_none() {
        return Err(Error::Interface("fused evaluation needs a fusion checkpoint".into()));
    }
    let mut ev = Evaluator {
        net,
        fusion,
        mode,
        cfg,
        acc: BTreeMap::new(),
    };
    let refs: Vec<&MultiSpectralSample> = samples.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        ev.add_batch(chunk)?;
    }
    ev.finish()
}

/// Like [`evaluate_samples`], rendering the dataset chunk by chunk.
pub fn evaluate_dataset(
    net: &DepthNet,
    fusion: Option<&FusionModule>,
    data: &Dataset,
    mode: EvalMode,
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<Vec<MetricReport>> {
    cfg.validate()?;
    if mode == EvalMode::Fused && fusion.is_none() {
        return Err(Error::Interface("fused evaluation needs a fusion checkpoint".into()));
    }
    let mut ev = Evaluator {
        net,
        fusion,
        mode,
        cfg,
        acc: BTreeMap::new(),
    };
    let bs = batch_size.max(1);
    for start in (0..data.len()).step_by(bs) {
        let samples = (start..(start + bs).min(data.len()))
            .map(|i| data.get(i))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&MultiSpectralSample> = samples.iter().collect();
        ev.add_batch(&refs)?;
    }
    ev.finish()
}

/// Mean RMSE over the `avg` rows of a report list.
pub fn mean_avg_rmse(reports: &[MetricReport], modalities: &[&str]) -> Option<f64> {
    let vals: Vec<f64> = reports
        .iter()
        .filter(|r| r.condition == crate::metrics::AVG_LABEL && modalities.contains(&r.modality.as_str()))
        .map(|r| r.rmse)
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean cosine between pooled shared embeddings of the three spectrum pairs.
pub fn shared_embedding_cosine(net: &DepthNet, samples: &[MultiSpectralSample], batch_size: usize) -> Result<f64> {
    let (sh, _) = embedding_cosines(net, samples, batch_size)?;
    Ok(sh)
}

/// `(shared, specific)` mean cross-spectrum cosines of pooled embeddings.
pub fn embedding_cosines(
    net: &DepthNet,
    samples: &[MultiSpectralSample],
    batch_size: usize,
) -> Result<(f64, f64)> {
    let refs: Vec<&MultiSpectralSample> = samples.iter().collect();
    let (mut sh_sum, mut sp_sum, mut n) = (0.0, 0.0, 0usize);
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, DType::F32)?;
        let outs = single_pass(net, &batch.images())?;
        let emb = |f: &dyn Fn(&SpectrumOutputs, usize) -> Result<Tensor>| -> Result<Vec<Tensor>> {
            (0..3).map(|i| Ok(global_embed(&f(&outs, i)?)?.vector)).collect()
        };
        let sh = emb(&|o, i| o.encoded[i].bundle.shared())?;
        let sp = emb(&|o, i| o.encoded[i].bundle.specific())?;
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let cs: Vec<f32> = (&sh[a] * &sh[b])?.sum(1)?.to_dtype(DType::F32)?.to_vec1()?;
            let cp: Vec<f32> = (&sp[a] * &sp[b])?.sum(1)?.to_dtype(DType::F32)?.to_vec1()?;
            sh_sum += cs.iter().map(|x| *x as f64).sum::<f64>();
            sp_sum += cp.iter().map(|x| *x as f64).sum::<f64>();
            n += cs.len();
        }
    }
    if n == 0 {
        return Err(Error::Domain("no samples to embed".into()));
    }
    Ok((sh_sum / n as f64, sp_sum / n as f64))
}

/// Depth of `reference` synthesized into `target` from the two planes'
/// predictions, and the per-pair consistency loss.
pub fn pair_consistency(
    depth_tgt: &Tensor,
    depth_ref: &Tensor,
    target: Spectrum,
    reference: Spectrum,
    rigs: &[&CameraRig],
) -> Result<Option<Tensor>> {
    let setups = rigs
        .iter()
        .map(|rig| {
            Ok(ProjectionSetup {
                cam_tgt: rig.camera(target)?.clone(),
                cam_ref: rig.camera(reference)?.clone(),
                transform: rig.transform(target, reference)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let flow = project_flow_batch(&depth_tgt.detach(), None, &setups)?;
    let synth = synthesize_depth(depth_ref, None, &flow)?;
    if synth.valid.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()? < 1.0 {
        return Ok(None);
    }
    Ok(Some(geometric_consistency(&synth.data, depth_tgt, &synth.valid)?))
}

/// Mean cross-plane consistency of fused predictions over all ordered pairs.
pub fn cross_plane_consistency(
    net: &DepthNet,
    module: &FusionModule,
    samples: &[MultiSpectralSample],
    batch_size: usize,
) -> Result<f64> {
    let refs: Vec<&MultiSpectralSample> = samples.iter().collect();
    let (mut total, mut n) = (0.0, 0usize);
    for chunk in refs.chunks(batch_size.max(1)) {
        let batch = Batch::new(chunk, DType::F32)?;
        let rigs = batch.rig_refs();
        let outs = single_pass(net, &batch.images())?;
        let fused = Spectrum::ALL
            .iter()
            .map(|p| Ok(fuse_in_plane(*p, &outs, &rigs, module, net, None)?.prediction.depth))
            .collect::<Result<Vec<_>>>()?;
        for (t, r) in Spectrum::ordered_pairs() {
            if let Some(l) = pair_consistency(&fused[t.index()], &fused[r.index()], t, r, &rigs)? {
                total += l.to_dtype(DType::F64)?.to_scalar::<f64>()?;
                n += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::Domain("no co-visible pixels between planes".into()));
    }
    Ok(total / n as f64)
}

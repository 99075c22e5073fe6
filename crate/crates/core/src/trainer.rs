//! Two-stage training: joint align-stage training of the shared backbone,
//! then fuse-stage training of the fusion module on a frozen backbone.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::eval::{evaluate_samples, mean_avg_rmse, pair_consistency, Batch, EvalMode, FUSED_LABEL};
use crate::fusion::{fuse_in_plane, single_pass, FusionModule};
use crate::geometry::align_to_plane;
use crate::losses::{
    align_objective, dense_local_contrastive, fuse_objective, global_contrastive,
    supervised_depth_loss, AlignedHalves, LossReport,
};
use crate::metrics::MetricReport;
use crate::model::{global_embed, DepthNet, FeatureBundle};
use crate::params::Params;
use crate::spectrum::Spectrum;
use crate::synth::{augment, Dataset, MultiSpectralSample};

pub const ALIGN_CKPT: &str = "align.safetensors";
pub const FUSE_CKPT: &str = "fuse.safetensors";
pub const TRAIN_LOG: &str = "train_log.jsonl";
pub const VAL_LOG: &str = "val_log.jsonl";

/// Align-stage loss of one batch: supervised terms per spectrum plus global
/// and dense contrastive terms on features warped to the thermal plane.
pub fn align_step_loss(net: &DepthNet, batch: &Batch, cfg: &Config) -> Result<(Tensor, LossReport)> {
    let outs = single_pass(net, &batch.images())?;
    let mut l_sup = Vec::with_capacity(3);
    for s in Spectrum::ALL {
        let plane = &batch.planes[s.index()];
        l_sup.push(supervised_depth_loss(
            &outs.predictions[s.index()].depth,
            &plane.depth,
            &plane.valid,
        )?);
    }
    let l_sup: [Tensor; 3] = l_sup.try_into().expect("three spectra");

    let bundles: Vec<&FeatureBundle> = outs.encoded.iter().map(|e| &e.bundle).collect();
    let shared = bundles
        .iter()
        .map(|b| Ok(global_embed(&b.shared()?)?.vector))
        .collect::<Result<Vec<_>>>()?;
    let specific = bundles
        .iter()
        .map(|b| Ok(global_embed(&b.specific()?)?.vector))
        .collect::<Result<Vec<_>>>()?;
    let tau = cfg.contrastive.tau;
    let l_global = global_contrastive(
        &shared[0],
        &[&shared[1], &shared[2]],
        &[&specific[0], &specific[1], &specific[2]],
        tau,
    )?;

    let rigs = batch.rig_refs();
    let thr = Spectrum::Thr.index();
    let thr_depth = outs.predictions[thr].depth.detach();
    let mut aligned = Vec::with_capacity(3);
    let mut valid: Option<Tensor> = None;
    for s in Spectrum::ALL {
        if s == Spectrum::Thr {
            aligned.push(bundles[thr].clone());
            continue;
        }
        let w = align_to_plane(&bundles[s.index()].full, s, &thr_depth, None, Spectrum::Thr, &rigs)?;
        valid = Some(match valid {
            Some(v) => (v * &w.valid)?,
            None => w.valid.clone(),
        });
        aligned.push(FeatureBundle::new(w.data)?);
    }
    let valid = valid.expect("two warped spectra");
    let halves = AlignedHalves {
        shared: [aligned[0].shared()?, aligned[1].shared()?, aligned[2].shared()?],
        specific: [aligned[0].specific()?, aligned[1].specific()?, aligned[2].specific()?],
    };
    let l_local = match dense_local_contrastive(&halves, &valid, tau, cfg.contrastive.negatives) {
        Ok(l) => l,
        Err(Error::Domain(_)) => {
            warn!("no co-visible location in the thermal plane; dense term skipped");
            l_global.zeros_like()?
        }
        Err(e) => return Err(e),
    };
    align_objective(&l_sup, &l_global, &l_local, &cfg.contrastive)
}

/// Fuse-stage loss of one batch: supervised loss on the three fused planes
/// plus cross-plane consistency of the fused depths.
pub fn fuse_step_loss(
    net: &DepthNet,
    module: &FusionModule,
    batch: &Batch,
    cfg: &Config,
) -> Result<(Tensor, LossReport)> {
    let rigs = batch.rig_refs();
    let outs = single_pass(net, &batch.images())?;
    let mut fused = Vec::with_capacity(3);
    let mut sup = Vec::with_capacity(3);
    for plane in Spectrum::ALL {
        let out = fuse_in_plane(plane, &outs, &rigs, module, net, None)?;
        let gt = &batch.planes[plane.index()];
        sup.push(supervised_depth_loss(&out.prediction.depth, &gt.depth, &gt.valid)?);
        fused.push(out.prediction.depth);
    }
    let l_sup = (Tensor::stack(&sup, 0)?.sum_all()? / 3.0)?;
    let mut pairs = Vec::with_capacity(6);
    for (t, r) in Spectrum::ordered_pairs() {
        if let Some(l) = pair_consistency(&fused[t.index()], &fused[r.index()], t, r, &rigs)? {
            pairs.push(l);
        }
    }
    fuse_objective(&l_sup, &pairs, &cfg.fuse_loss)
}

fn check_finite(report: &LossReport) -> Result<()> {
    if !report.total.is_finite() {
        return Err(Error::Contract(format!(
            "{} loss diverged at step {} (total = {})",
            report.stage, report.step, report.total
        )));
    }
    Ok(())
}

fn optimizer(params: &Params, stage: &crate::config::StageConfig) -> Result<AdamW> {
    Ok(AdamW::new(
        params.vars(),
        ParamsAdamW {
            lr: stage.lr,
            weight_decay: stage.weight_decay,
            ..Default::default()
        },
    )?)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64 + 1) << 40));
    order.shuffle(&mut rng);
    order
}

fn augment_seed(seed: u64, epoch: usize, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ ((epoch as u64) << 32) ^ index as u64
}

/// JSON-lines sink that is a no-op without an output directory.
struct Log(Option<BufWriter<File>>);

impl Log {
    fn open(dir: Option<&Path>, name: &str) -> Result<Self> {
        match dir {
            Some(d) => {
                std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
                let path = d.join(name);
                let f = File::create(&path).map_err(|e| Error::io(&path, e))?;
                Ok(Log(Some(BufWriter::new(f))))
            }
            None => Ok(Log(None)),
        }
    }

    fn line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        if let Some(w) = &mut self.0 {
            let text = serde_json::to_string(value)?;
            writeln!(w, "{text}").map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if let Some(w) = &mut self.0 {
            w.flush().map_err(|e| Error::io("log", e))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct ValLine<'a> {
    epoch: usize,
    stage: Stage,
    #[serde(flatten)]
    report: &'a MetricReport,
}

/// Result of one training stage.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub checkpoint: Checkpoint,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
    pub steps: usize,
    pub losses: Vec<LossReport>,
}

fn prepare_batch(
    samples: &[MultiSpectralSample],
    idx: &[usize],
    cfg: &Config,
    epoch: usize,
) -> Result<Batch> {
    let aug = idx
        .iter()
        .map(|&i| augment(&samples[i], &cfg.augment, augment_seed(cfg.seed, epoch, i)))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&MultiSpectralSample> = aug.iter().collect();
    Batch::new(&refs, DType::F32)
}

/// Trains the backbone from a seeded initialization and keeps the epoch
/// with the lowest mean validation RMSE. Writes `align.safetensors` and the
/// logs under `out` when given.
pub fn train_align(
    cfg: &Config,
    train: &[MultiSpectralSample],
    val: &[MultiSpectralSample],
    out: Option<&Path>,
) -> Result<(DepthNet, StageOutcome)> {
    cfg.validate()?;
    let stage = &cfg.align;
    let net = DepthNet::new(&cfg.backbone, cfg.seed, DType::F32)?;
    let mut opt = optimizer(net.params(), stage)?;
    let mut train_log = Log::open(out, TRAIN_LOG)?;
    let mut val_log = Log::open(out, VAL_LOG)?;
    let mut best = (net.params().snapshot()?, 0usize, f64::INFINITY);
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..stage.epochs {
        for idx in epoch_order(train.len(), cfg.seed, epoch).chunks(stage.batch_size) {
            let batch = prepare_batch(train, idx, cfg, epoch)?;
            let (loss, mut report) = align_step_loss(&net, &batch, cfg)?;
            report.step = step;
            check_finite(&report)?;
            opt.backward_step(&loss)?;
            train_log.line(&report)?;
            losses.push(report);
            step += 1;
        }
        let rows = evaluate_samples(&net, None, val, EvalMode::PerSpectrum, &cfg.eval, stage.batch_size)?;
        for r in &rows {
            val_log.line(&ValLine { epoch, stage: Stage::Align, report: r })?;
        }
        train_log.flush()?;
        val_log.flush()?;
        let rmse = mean_avg_rmse(&rows, &["rgb", "nir", "thr"]).unwrap_or(f64::INFINITY);
        info!("align epoch {epoch}: mean val rmse {rmse:.4}");
        if rmse < best.2 {
            best = (net.params().snapshot()?, epoch, rmse);
        }
    }
    let (tensors, best_epoch, best_rmse) = best;
    let checkpoint = Checkpoint::new(
        Stage::Align,
        cfg.seed,
        best_epoch,
        serde_json::to_value(cfg)?,
        tensors.clone(),
        None,
    )?;
    if let Some(dir) = out {
        checkpoint.save(&dir.join(ALIGN_CKPT))?;
    }
    let best_net = DepthNet::from_params(&cfg.backbone, Params::from_tensors(tensors, false)?)?;
    Ok((
        best_net,
        StageOutcome {
            checkpoint,
            best_epoch,
            best_val_rmse: best_rmse,
            steps: step,
            losses,
        },
    ))
}

/// Backbone stored in an align checkpoint, loaded frozen.
pub fn load_backbone(cfg: &Config, align: &Checkpoint) -> Result<DepthNet> {
    align.require_stage(Stage::Align)?;
    DepthNet::from_params(&cfg.backbone, Params::from_tensors(align.tensors.clone(), false)?)
}

/// Fusion module stored in a fuse checkpoint trained on `align`.
pub fn load_fusion(cfg: &Config, fuse: &Checkpoint, align: &Checkpoint) -> Result<FusionModule> {
    fuse.verify_align(align)?;
    FusionModule::from_params(
        &cfg.fusion,
        cfg.backbone.bottleneck_channels,
        Params::from_tensors(fuse.tensors.clone(), false)?,
    )
}

/// Trains only the fusion module on the frozen backbone of `align`, then
/// verifies that the backbone is bitwise unchanged.
pub fn train_fuse(
    cfg: &Config,
    train: &[MultiSpectralSample],
    val: &[MultiSpectralSample],
    align: &Checkpoint,
    out: Option<&Path>,
) -> Result<(FusionModule, StageOutcome)> {
    cfg.validate()?;
    let stage = &cfg.fuse;
    let net = load_backbone(cfg, align)?;
    let module = FusionModule::new(
        &cfg.fusion,
        cfg.backbone.bottleneck_channels,
        cfg.seed ^ 0xF05E,
        DType::F32,
    )?;
    let mut opt = optimizer(module.params(), stage)?;
    let mut train_log = Log::open(out, TRAIN_LOG)?;
    let mut val_log = Log::open(out, VAL_LOG)?;
    let mut best = (module.params().snapshot()?, 0usize, f64::INFINITY);
    let mut losses = Vec::new();
    let mut step = 0;
    for epoch in 0..stage.epochs {
        for idx in epoch_order(train.len(), cfg.seed, epoch).chunks(stage.batch_size) {
            let batch = prepare_batch(train, idx, cfg, epoch)?;
            let (loss, mut report) = fuse_step_loss(&net, &module, &batch, cfg)?;
            report.step = step;
            check_finite(&report)?;
            opt.backward_step(&loss)?;
            train_log.line(&report)?;
            losses.push(report);
            step += 1;
        }
        let rows = evaluate_samples(&net, Some(&module), val, EvalMode::Fused, &cfg.eval, stage.batch_size)?;
        for r in &rows {
            val_log.line(&ValLine { epoch, stage: Stage::Fuse, report: r })?;
        }
        train_log.flush()?;
        val_log.flush()?;
        let rmse = mean_avg_rmse(&rows, &[FUSED_LABEL]).unwrap_or(f64::INFINITY);
        info!("fuse epoch {epoch}: fused val rmse {rmse:.4}");
        if rmse < best.2 {
            best = (module.params().snapshot()?, epoch, rmse);
        }
    }
    let backbone_digest = net.params().digest()?;
    if backbone_digest != align.hash() {
        return Err(Error::Contract(format!(
            "backbone changed during fuse training: {backbone_digest} != {}",
            align.hash()
        )));
    }
    let (tensors, best_epoch, best_rmse) = best;
    let checkpoint = Checkpoint::new(
        Stage::Fuse,
        cfg.seed,
        best_epoch,
        serde_json::to_value(cfg)?,
        tensors.clone(),
        Some(align.hash().to_string()),
    )?;
    if let Some(dir) = out {
        checkpoint.save(&dir.join(FUSE_CKPT))?;
    }
    let best_module = FusionModule::from_params(
        &cfg.fusion,
        cfg.backbone.bottleneck_channels,
        Params::from_tensors(tensors, false)?,
    )?;
    Ok((
        best_module,
        StageOutcome {
            checkpoint,
            best_epoch,
            best_val_rmse: best_rmse,
            steps: step,
            losses,
        },
    ))
}

/// The train/val/test datasets a configuration describes.
pub fn datasets(cfg: &Config) -> Result<(Dataset, Dataset, Dataset)> {
    use crate::geometry::CameraRig;
    use crate::synth::{make_dataset, Split};
    let rig = CameraRig::desk();
    let d = &cfg.data;
    Ok((
        make_dataset(d.train_size, d.split_seed, Split::Train, &d.mix, &rig, &cfg.corruption)?,
        make_dataset(d.val_size, d.split_seed, Split::Val, &d.mix, &rig, &cfg.corruption)?,
        make_dataset(d.test_size, d.split_seed, Split::Test, &d.mix, &rig, &cfg.corruption)?,
    ))
}

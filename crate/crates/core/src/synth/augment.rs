use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{MultiSpectralSample, SpectrumPlane};
use crate::error::{Error, Result};
use crate::geometry::{CameraModel, RigCalibration, RigidTransform};
use crate::spectrum::Spectrum;

/// Ranges of the random augmentations. A range `(1.0, 1.0)` disables the
/// corresponding jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Side fraction kept by the center crop before resizing back.
    pub crop_scale: (f64, f64),
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    /// RGB only.
    pub saturation: (f64, f64),
    /// RGB only; a factor `f` rotates hue by `(f - 1) · 180°`.
    pub hue: (f64, f64),
    pub horizontal_flip: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.85, 1.0),
            brightness: (0.9, 1.1),
            contrast: (0.9, 1.1),
            saturation: (0.9, 1.1),
            hue: (0.95, 1.05),
            horizontal_flip: false,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            saturation: (1.0, 1.0),
            hue: (1.0, 1.0),
            horizontal_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.5 && hi <= 1.0 && lo <= hi) {
            return Err(Error::Config(format!(
                "crop_scale must lie in (0.5, 1.0], got {:?}",
                self.crop_scale
            )));
        }
        for (name, (lo, hi)) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(lo >= 0.5 && hi <= 1.5 && lo <= hi) {
                return Err(Error::Config(format!(
                    "{name} jitter must lie in [0.5, 1.5], got ({lo}, {hi})"
                )));
            }
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Resamples a plane onto the centered window of relative size `scale`.
/// Output pixel `j` reads source coordinate `x0 + j·scale`.
fn crop_resize(plane: &SpectrumPlane, scale: f64) -> SpectrumPlane {
    let (c, h, w) = plane.image.dim();
    let x0 = (w as f64 - scale * w as f64) / 2.0;
    let y0 = (h as f64 - scale * h as f64) / 2.0;
    let mut image = Array3::<f32>::zeros((c, h, w));
    let mut depth = Array2::<f32>::zeros((h, w));
    let mut valid = Array2::from_elem((h, w), false);
    for y in 0..h {
        let sy = (y0 + y as f64 * scale).min((h - 1) as f64);
        let iy = sy.floor() as usize;
        let iy1 = (iy + 1).min(h - 1);
        let fy = (sy - iy as f64) as f32;
        for x in 0..w {
            let sx = (x0 + x as f64 * scale).min((w - 1) as f64);
            let ix = sx.floor() as usize;
            let ix1 = (ix + 1).min(w - 1);
            let fx = (sx - ix as f64) as f32;
            for k in 0..c {
                let a = plane.image[[k, iy, ix]] * (1.0 - fx) + plane.image[[k, iy, ix1]] * fx;
                let b = plane.image[[k, iy1, ix]] * (1.0 - fx) + plane.image[[k, iy1, ix1]] * fx;
                image[[k, y, x]] = a * (1.0 - fy) + b * fy;
            }
            let (ny, nx) = (sy.round() as usize, sx.round() as usize);
            depth[[y, x]] = plane.depth[[ny, nx]];
            valid[[y, x]] = plane.valid[[ny, nx]];
        }
    }
    SpectrumPlane {
        image,
        depth,
        valid,
    }
}

fn flip_plane(plane: &mut SpectrumPlane) {
    plane.image.invert_axis(ndarray::Axis(2));
    plane.depth.invert_axis(ndarray::Axis(1));
    plane.valid.invert_axis(ndarray::Axis(1));
}

fn jitter_brightness_contrast(img: &mut Array3<f32>, brightness: f64, contrast: f64) {
    if brightness != 1.0 {
        let b = brightness as f32;
        img.mapv_inplace(|v| (v * b).clamp(0.0, 1.0));
    }
    if contrast != 1.0 {
        let mean = img.mean().unwrap_or(0.0);
        let c = contrast as f32;
        img.mapv_inplace(|v| (mean + c * (v - mean)).clamp(0.0, 1.0));
    }
}

fn jitter_saturation_hue(img: &mut Array3<f32>, saturation: f64, hue: f64) {
    let (_, h, w) = img.dim();
    // rotation about the gray axis (1,1,1)/√3 by angle θ
    let theta = (hue - 1.0) * std::f64::consts::PI;
    let (s, c) = theta.sin_cos();
    let k = 1.0 / 3.0;
    let q = (1.0f64 / 3.0).sqrt();
    let rot = [
        [c + (1.0 - c) * k, (1.0 - c) * k - q * s, (1.0 - c) * k + q * s],
        [(1.0 - c) * k + q * s, c + (1.0 - c) * k, (1.0 - c) * k - q * s],
        [(1.0 - c) * k - q * s, (1.0 - c) * k + q * s, c + (1.0 - c) * k],
    ];
    for y in 0..h {
        for x in 0..w {
            let mut px = [
                img[[0, y, x]] as f64,
                img[[1, y, x]] as f64,
                img[[2, y, x]] as f64,
            ];
            if saturation != 1.0 {
                let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                for v in &mut px {
                    *v = gray + saturation * (*v - gray);
                }
            }
            if hue != 1.0 {
                let p = px;
                for i in 0..3 {
                    px[i] = rot[i][0] * p[0] + rot[i][1] * p[1] + rot[i][2] * p[2];
                }
            }
            for i in 0..3 {
                img[[i, y, x]] = px[i].clamp(0.0, 1.0) as f32;
            }
        }
    }
}

/// Center crop-and-resize (and optional flip) shared by all spectra with
/// consistent intrinsics, followed by independent photometric jitter.
pub fn augment(
    sample: &MultiSpectralSample,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<MultiSpectralSample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();

    let scale = draw(&mut rng, cfg.crop_scale);
    let flip = cfg.horizontal_flip && rng.random_bool(0.5);
    if scale != 1.0 {
        for s in Spectrum::ALL {
            let cam = sample.rig.camera(s)?.clone();
            let (w, h) = (cam.width(), cam.height());
            let x0 = (w as f64 - scale * w as f64) / 2.0;
            let y0 = (h as f64 - scale * h as f64) / 2.0;
            let cropped = cam.cropped(x0, y0, w, h)?;
            let resized = CameraModel::from_focal(
                cropped.fx() / scale,
                cropped.fy() / scale,
                cropped.cx() / scale,
                cropped.cy() / scale,
                w,
                h,
            )?;
            out.rig.set_camera(s, resized);
            *out.plane_mut(s) = crop_resize(sample.plane(s), scale);
        }
    }
    if flip {
        let mirror = RigidTransform::from_rt(
            [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        );
        let mut calib = RigCalibration::default();
        for (a, b) in Spectrum::ordered_pairs() {
            let t = out.rig.transform(a, b)?;
            // S·T·S with S = diag(-1, 1, 1) keeps the transform rigid
            let m = mirror.matrix();
            let mirrored = RigidTransform::from_matrix(
                mul4(&mul4(&m, &t.matrix()), &m),
            )?;
            calib.insert(a, b, mirrored);
        }
        let mut rig = crate::geometry::CameraRig::new(Default::default(), calib);
        for s in Spectrum::ALL {
            let cam = out.rig.camera(s)?.clone();
            let w = cam.width();
            rig.set_camera(
                s,
                CameraModel::from_focal(cam.fx(), cam.fy(), (w - 1) as f64 - cam.cx(), cam.cy(), w, cam.height())?,
            );
            flip_plane(out.plane_mut(s));
        }
        out.rig = rig;
    }

    for s in Spectrum::ALL {
        let brightness = draw(&mut rng, cfg.brightness);
        let contrast = draw(&mut rng, cfg.contrast);
        let img = &mut out.plane_mut(s).image;
        jitter_brightness_contrast(img, brightness, contrast);
        if s == Spectrum::Rgb {
            let saturation = draw(&mut rng, cfg.saturation);
            let hue = draw(&mut rng, cfg.hue);
            jitter_saturation_hue(img, saturation, hue);
        }
    }
    Ok(out)
}

fn mul4(a: &[[f64; 4]; 4], b: &[[f64; 4]; 4]) -> [[f64; 4]; 4] {
    let mut m = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            m[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

//! Analytic ray casting of a scene into the three spectral planes plus the
//! condition-dependent sensor corruptions.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::scene::{dot, Primitive, SceneSpec, Texture, Vec3};
use super::{Condition, MultiSpectralSample, SpectrumPlane};
use crate::error::Result;
use crate::geometry::CameraRig;
use crate::spectrum::Spectrum;

/// Severity knobs of the per-condition sensor degradations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorruptionConfig {
    pub night_rgb_gain: f64,
    pub night_rgb_noise_sigma: f64,
    pub night_nir_gain: f64,
    /// Fraction range of pixels covered by rain streaks in RGB and NIR.
    pub rain_streak_fraction: (f64, f64),
    pub rain_contrast_gain: f64,
    /// Box-blur size applied to thermal under rain.
    pub rain_thr_blur: usize,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            night_rgb_gain: 0.2,
            night_rgb_noise_sigma: 0.05,
            night_nir_gain: 0.7,
            rain_streak_fraction: (0.05, 0.15),
            rain_contrast_gain: 0.6,
            rain_thr_blur: 3,
        }
    }
}

/// Thermal path attenuation length (m).
const THERMAL_FADE: f64 = 120.0;

fn pattern(tex: &Texture, st: [f64; 2]) -> f64 {
    let (s, c) = tex.orientation.sin_cos();
    let a = c * st[0] + s * st[1];
    let b = -s * st[0] + c * st[1];
    let tau = std::f64::consts::TAU;
    if tex.checker {
        let ca = (a * tex.freq[0]).floor() as i64;
        let cb = (b * tex.freq[1]).floor() as i64;
        if (ca + cb).rem_euclid(2) == 0 {
            1.0
        } else {
            -1.0
        }
    } else {
        0.6 * (tau * tex.freq[0] * a + tex.phase).sin()
            + 0.4 * (tau * tex.freq[1] * b + 2.0 * tex.phase).sin()
    }
}

fn shading(scene: &SceneSpec, normal: Vec3) -> f64 {
    let lambert = (-dot(normal, scene.sun_dir)).max(0.0);
    0.35 + 0.65 * lambert
}

fn shade_rgb(scene: &SceneSpec, prim: &Primitive, normal: Vec3, st: [f64; 2]) -> [f64; 3] {
    let p = pattern(&prim.texture, st);
    let k = shading(scene, normal) * (1.0 + prim.texture.contrast * p);
    let c = prim.texture.base_color;
    [
        (c[0] * k).clamp(0.0, 1.0),
        (c[1] * k).clamp(0.0, 1.0),
        (c[2] * k).clamp(0.0, 1.0),
    ]
}

fn shade_nir(scene: &SceneSpec, prim: &Primitive, normal: Vec3, st: [f64; 2]) -> f64 {
    // same texture layout, different reflectance and a flatter pattern
    let p = pattern(&prim.texture, [st[1] * 0.5, st[0]]);
    let k = shading(scene, normal) * (1.0 + 0.6 * prim.texture.contrast * p);
    (prim.texture.nir_albedo * k).clamp(0.0, 1.0)
}

fn shade_thr(scene: &SceneSpec, prim: &Primitive, st: [f64; 2], depth: f64) -> f64 {
    // smooth emissive field; only a faint large-scale variation
    let drift = 0.02 * (0.15 * st[0] + prim.texture.phase).sin();
    let emitted = prim.temperature + drift;
    let fade = (-depth / THERMAL_FADE).exp();
    (emitted * fade + scene.ambient_temperature * (1.0 - fade)).clamp(0.0, 1.0)
}

/// Clean (daytime) rendering of one spectrum.
pub fn render_plane(scene: &SceneSpec, rig: &CameraRig, spectrum: Spectrum) -> Result<SpectrumPlane> {
    let cam = rig.camera(spectrum)?;
    let pose = rig.transform(spectrum, Spectrum::Rgb)?;
    let r = pose.rotation();
    let origin = pose.apply([0.0; 3]);
    let (h, w) = (cam.height(), cam.width());
    let channels = spectrum.channels();
    let mut image = Array3::<f32>::zeros((channels, h, w));
    let mut depth = Array2::<f32>::zeros((h, w));
    let mut valid = Array2::<bool>::from_elem((h, w), false);
    for y in 0..h {
        for x in 0..w {
            let ray = cam.ray(x as f64, y as f64);
            let dir = [
                r[0][0] * ray[0] + r[0][1] * ray[1] + r[0][2] * ray[2],
                r[1][0] * ray[0] + r[1][1] * ray[1] + r[1][2] * ray[2],
                r[2][0] * ray[0] + r[2][1] * ray[1] + r[2][2] * ray[2],
            ];
            match scene.trace(origin, dir) {
                Some(hit) => {
                    // unit-z camera rays: the ray parameter is the z-depth
                    depth[[y, x]] = hit.t as f32;
                    valid[[y, x]] = true;
                    let prim = &scene.primitives[hit.index];
                    match spectrum {
                        Spectrum::Rgb => {
                            let c = shade_rgb(scene, prim, hit.normal, hit.st);
                            for k in 0..3 {
                                image[[k, y, x]] = c[k] as f32;
                            }
                        }
                        Spectrum::Nir => {
                            image[[0, y, x]] = shade_nir(scene, prim, hit.normal, hit.st) as f32
                        }
                        Spectrum::Thr => {
                            image[[0, y, x]] = shade_thr(scene, prim, hit.st, hit.t) as f32
                        }
                    }
                }
                None => {
                    let up = (-(dir[1]) / (dir[0] * dir[0] + dir[1] * dir[1] + 1.0).sqrt()).max(0.0);
                    match spectrum {
                        Spectrum::Rgb => {
                            for k in 0..3 {
                                image[[k, y, x]] =
                                    (scene.sky_color[k] * (0.85 + 0.15 * up)).min(1.0) as f32;
                            }
                        }
                        Spectrum::Nir => image[[0, y, x]] = (0.55 + 0.1 * up) as f32,
                        Spectrum::Thr => image[[0, y, x]] = (0.5 * scene.ambient_temperature) as f32,
                    }
                }
            }
        }
    }
    Ok(SpectrumPlane {
        image,
        depth,
        valid,
    })
}

fn box_blur(img: &Array3<f32>, size: usize) -> Array3<f32> {
    let (c, h, w) = img.dim();
    let r = (size / 2) as isize;
    let mut out = Array3::<f32>::zeros((c, h, w));
    for k in 0..c {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f32;
                let mut n = 0.0f32;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let (yy, xx) = (y + dy, x + dx);
                        if yy >= 0 && xx >= 0 && yy < h as isize && xx < w as isize {
                            acc += img[[k, yy as usize, xx as usize]];
                            n += 1.0;
                        }
                    }
                }
                out[[k, y as usize, x as usize]] = acc / n;
            }
        }
    }
    out
}

/// Slanted streak mask covering a target fraction of the frame.
fn streak_mask(h: usize, w: usize, fraction: f64, rng: &mut ChaCha8Rng) -> Array2<bool> {
    let mut mask = Array2::from_elem((h, w), false);
    let target = (fraction * (h * w) as f64).round() as usize;
    let slant: f64 = rng.random_range(-0.35..0.35);
    let mut covered = 0;
    let mut guard = 0;
    while covered < target && guard < 100_000 {
        guard += 1;
        let len = rng.random_range(5..=15);
        let x0: f64 = rng.random_range(0.0..w as f64);
        let y0 = rng.random_range(0..h);
        for i in 0..len {
            let y = y0 + i;
            let x = (x0 + slant * i as f64).round();
            if y >= h || x < 0.0 || x >= w as f64 {
                break;
            }
            let cell = &mut mask[[y, x as usize]];
            if !*cell {
                *cell = true;
                covered += 1;
                if covered >= target {
                    break;
                }
            }
        }
    }
    mask
}

fn contrast(img: &mut Array3<f32>, gain: f64) {
    let mean = img.mean().unwrap_or(0.0);
    img.mapv_inplace(|v| (mean + gain as f32 * (v - mean)).clamp(0.0, 1.0));
}

/// Applies the sensor degradation of `condition` to a clean rendering.
pub fn corrupt(
    plane: &mut SpectrumPlane,
    spectrum: Spectrum,
    condition: Condition,
    cfg: &CorruptionConfig,
    rng: &mut ChaCha8Rng,
) {
    match (condition, spectrum) {
        (Condition::Day, _) => {}
        (Condition::Night, Spectrum::Rgb) => {
            let noise = Normal::new(0.0, cfg.night_rgb_noise_sigma).expect("finite sigma");
            let gain = cfg.night_rgb_gain as f32;
            plane
                .image
                .mapv_inplace(|v| (v * gain + noise.sample(rng) as f32).clamp(0.0, 1.0));
        }
        (Condition::Night, Spectrum::Nir) => {
            let gain = cfg.night_nir_gain as f32;
            plane.image.mapv_inplace(|v| v * gain);
        }
        (Condition::Night, Spectrum::Thr) => {}
        (Condition::Rain, Spectrum::Rgb | Spectrum::Nir) => {
            let (_, h, w) = plane.image.dim();
            let (lo, hi) = cfg.rain_streak_fraction;
            let fraction = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let mask = streak_mask(h, w, fraction, rng);
            let blurred = box_blur(&plane.image, 5);
            for ((k, y, x), v) in plane.image.indexed_iter_mut() {
                if mask[[y, x]] {
                    *v = blurred[[k, y, x]];
                }
            }
            contrast(&mut plane.image, cfg.rain_contrast_gain);
        }
        (Condition::Rain, Spectrum::Thr) => {
            if cfg.rain_thr_blur > 1 {
                plane.image = box_blur(&plane.image, cfg.rain_thr_blur);
            }
        }
    }
}

/// Renders all three planes of `scene` under `condition`.
pub fn render_sample(
    scene: &SceneSpec,
    rig: &CameraRig,
    condition: Condition,
    cfg: &CorruptionConfig,
) -> Result<MultiSpectralSample> {
    rig.require_complete()?;
    let mut planes = Vec::with_capacity(3);
    for s in Spectrum::ALL {
        let mut plane = render_plane(scene, rig, s)?;
        let mut rng = ChaCha8Rng::seed_from_u64(
            scene.seed ^ ((condition.index() as u64 + 1) << 40) ^ ((s.index() as u64 + 1) << 48),
        );
        corrupt(&mut plane, s, condition, cfg, &mut rng);
        planes.push(plane);
    }
    let planes: [SpectrumPlane; 3] = planes.try_into().expect("three planes");
    Ok(MultiSpectralSample {
        planes,
        condition,
        rig: rig.clone(),
        seed: scene.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::scene::{generate_scene, Shape};

    fn single_sphere_scene() -> SceneSpec {
        let mut scene = generate_scene(3);
        let mut sphere = scene.primitives[2].clone();
        sphere.shape = Shape::Sphere {
            center: [0.0, 0.0, 8.0],
            radius: 2.5,
        };
        sphere.texture.contrast = 0.5;
        scene.primitives = vec![sphere];
        scene
    }

    #[test]
    fn night_rgb_mean_follows_gain() {
        let rig = CameraRig::desk();
        let cfg = CorruptionConfig::default();
        for seed in [0, 1, 2] {
            let scene = generate_scene(seed);
            let day = render_sample(&scene, &rig, Condition::Day, &cfg).unwrap();
            let night = render_sample(&scene, &rig, Condition::Night, &cfg).unwrap();
            let md = day.plane(Spectrum::Rgb).image.mean().unwrap() as f64;
            let mn = night.plane(Spectrum::Rgb).image.mean().unwrap() as f64;
            assert!((mn - 0.2 * md).abs() <= 0.05, "{mn} vs {md}");
            assert!(mn < md);
            assert_eq!(day.plane(Spectrum::Thr).image, night.plane(Spectrum::Thr).image);
        }
    }

    #[test]
    fn thermal_sphere_is_flatter_than_rgb() {
        let rig = CameraRig::desk();
        let scene = single_sphere_scene();
        let sample = render_sample(&scene, &rig, Condition::Day, &CorruptionConfig::default()).unwrap();
        let std_on = |s: Spectrum| {
            let p = sample.plane(s);
            let vals: Vec<f64> = p
                .valid
                .indexed_iter()
                .filter(|(_, v)| **v)
                .flat_map(|((y, x), _)| (0..s.channels()).map(move |k| (k, y, x)))
                .map(|(k, y, x)| p.image[[k, y, x]] as f64)
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
        };
        assert!(std_on(Spectrum::Thr) < std_on(Spectrum::Rgb));
    }

    #[test]
    fn fronto_parallel_plane_depth_is_exact() {
        let rig = CameraRig::desk();
        let mut scene = generate_scene(0);
        let mut wall = scene.primitives[1].clone();
        wall.shape = Shape::Rect {
            center: [0.0, 0.0, 10.0],
            axis_u: [1.0, 0.0, 0.0],
            axis_v: [0.0, 1.0, 0.0],
            half_u: 3.0,
            half_v: 2.0,
        };
        scene.primitives = vec![wall];
        let plane = render_plane(&scene, &rig, Spectrum::Rgb).unwrap();
        let covered: Vec<f32> = plane
            .depth
            .iter()
            .zip(plane.valid.iter())
            .filter(|(_, v)| **v)
            .map(|(d, _)| *d)
            .collect();
        assert!(!covered.is_empty());
        assert!(covered.iter().all(|d| *d == 10.0));
    }

    #[test]
    fn rain_streaks_cover_requested_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = streak_mask(64, 96, 0.1, &mut rng);
        let n = m.iter().filter(|v| **v).count();
        assert_eq!(n, (0.1f64 * 64.0 * 96.0).round() as usize);
    }

    #[test]
    fn incomplete_rig_is_rejected() {
        use std::collections::BTreeMap;
        let rig = CameraRig::new(BTreeMap::new(), Default::default());
        let err = render_sample(&generate_scene(0), &rig, Condition::Day, &CorruptionConfig::default());
        assert!(matches!(err, Err(crate::Error::Calibration(_))));
    }
}

//! Procedural scene description: a ground plane, a back wall and a handful
//! of spheres and upright panels, all expressed in the RGB camera frame
//! (x right, y down, z forward).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Height of the cameras above the ground plane (m).
pub const CAMERA_HEIGHT: f64 = 1.5;
pub const MIN_DEPTH: f64 = 1.0;
pub const MAX_DEPTH: f64 = 80.0;

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn add_scaled(a: Vec3, b: Vec3, s: f64) -> Vec3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Shape {
    /// Finite rectangle spanned by two orthonormal in-plane axes.
    Rect {
        center: Vec3,
        axis_u: Vec3,
        axis_v: Vec3,
        half_u: f64,
        half_v: f64,
    },
    Sphere {
        center: Vec3,
        radius: f64,
    },
}

/// Surface appearance parameters shared by all three renderers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Texture {
    pub base_color: Vec3,
    /// Near-infrared reflectance, decoupled from the visible color.
    pub nir_albedo: f64,
    /// Spatial frequencies (cycles / m) of the two pattern components.
    pub freq: [f64; 2],
    pub orientation: f64,
    pub phase: f64,
    /// Amplitude of the albedo pattern in `[0, 1]`.
    pub contrast: f64,
    pub checker: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub texture: Texture,
    /// Normalized emissive temperature in `[0, 1]` for the thermal render.
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    pub primitives: Vec<Primitive>,
    /// Unit direction the sunlight travels along.
    pub sun_dir: Vec3,
    pub sky_color: Vec3,
    pub ambient_temperature: f64,
}

/// Surface hit of a ray.
#[derive(Clone, Copy, Debug)]
pub struct Hit {
    /// Ray parameter; equals camera z-depth for rays with unit z in the
    /// camera frame.
    pub t: f64,
    pub index: usize,
    pub normal: Vec3,
    /// Surface coordinates in meters, used for texturing.
    pub st: [f64; 2],
}

impl Shape {
    pub fn intersect(&self, origin: Vec3, dir: Vec3) -> Option<(f64, Vec3, [f64; 2])> {
        match *self {
            Shape::Rect {
                center,
                axis_u,
                axis_v,
                half_u,
                half_v,
            } => {
                let n = cross(axis_u, axis_v);
                let denom = dot(n, dir);
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = dot(n, sub(center, origin)) / denom;
                if t <= 0.0 {
                    return None;
                }
                let p = add_scaled(origin, dir, t);
                let rel = sub(p, center);
                let (a, b) = (dot(rel, axis_u), dot(rel, axis_v));
                if a.abs() > half_u || b.abs() > half_v {
                    return None;
                }
                let facing = if denom > 0.0 { [-n[0], -n[1], -n[2]] } else { n };
                Some((t, facing, [a, b]))
            }
            Shape::Sphere { center, radius } => {
                let oc = sub(origin, center);
                let a = dot(dir, dir);
                let b = 2.0 * dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t0 = (-b - sq) / (2.0 * a);
                let t1 = (-b + sq) / (2.0 * a);
                let t = if t0 > 0.0 { t0 } else if t1 > 0.0 { t1 } else { return None };
                let p = add_scaled(origin, dir, t);
                let rel = sub(p, center);
                let n = [rel[0] / radius, rel[1] / radius, rel[2] / radius];
                // longitude / latitude scaled to meters on the surface
                let st = [n[0].atan2(-n[2]) * radius, n[1].asin() * radius];
                Some((t, n, st))
            }
        }
    }

    /// Euclidean distance from `p` to the closest point of the shape.
    pub fn distance_to(&self, p: Vec3) -> f64 {
        match *self {
            Shape::Rect {
                center,
                axis_u,
                axis_v,
                half_u,
                half_v,
            } => {
                let rel = sub(p, center);
                let a = dot(rel, axis_u).clamp(-half_u, half_u);
                let b = dot(rel, axis_v).clamp(-half_v, half_v);
                let q = add_scaled(add_scaled(center, axis_u, a), axis_v, b);
                norm(sub(p, q))
            }
            Shape::Sphere { center, radius } => (norm(sub(p, center)) - radius).max(0.0),
        }
    }
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

impl SceneSpec {
    /// Closest hit along `origin + t·dir`, `t > 0`.
    pub fn trace(&self, origin: Vec3, dir: Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (index, prim) in self.primitives.iter().enumerate() {
            if let Some((t, normal, st)) = prim.shape.intersect(origin, dir) {
                if best.map_or(true, |b| t < b.t) {
                    best = Some(Hit {
                        t,
                        index,
                        normal,
                        st,
                    });
                }
            }
        }
        best
    }
}

fn random_texture(rng: &mut ChaCha8Rng) -> Texture {
    Texture {
        base_color: [
            rng.random_range(0.15..0.95),
            rng.random_range(0.15..0.95),
            rng.random_range(0.15..0.95),
        ],
        nir_albedo: rng.random_range(0.2..0.9),
        freq: [rng.random_range(0.3..2.5), rng.random_range(0.3..2.5)],
        orientation: rng.random_range(0.0..std::f64::consts::PI),
        phase: rng.random_range(0.0..std::f64::consts::TAU),
        contrast: rng.random_range(0.25..0.6),
        checker: rng.random_bool(0.4),
    }
}

/// Deterministic scene for `seed`: ground, back wall and 1–10 objects.
pub fn generate_scene(seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut primitives = Vec::new();

    let ground_tex = random_texture(&mut rng);
    primitives.push(Primitive {
        shape: Shape::Rect {
            center: [0.0, CAMERA_HEIGHT, 40.0],
            axis_u: [1.0, 0.0, 0.0],
            axis_v: [0.0, 0.0, 1.0],
            half_u: 40.0,
            half_v: 38.0,
        },
        texture: ground_tex,
        temperature: rng.random_range(0.35..0.55),
    });

    let wall_z: f64 = rng.random_range(30.0..75.0);
    let wall_height: f64 = rng.random_range(8.0..40.0);
    primitives.push(Primitive {
        shape: Shape::Rect {
            center: [0.0, CAMERA_HEIGHT - wall_height / 2.0, wall_z],
            axis_u: [1.0, 0.0, 0.0],
            axis_v: [0.0, 1.0, 0.0],
            half_u: 80.0,
            half_v: wall_height / 2.0,
        },
        texture: random_texture(&mut rng),
        temperature: rng.random_range(0.2..0.45),
    });

    let n_objects = rng.random_range(1..=10usize);
    for _ in 0..n_objects {
        let z: f64 = rng.random_range(4.0..(wall_z - 3.0).min(35.0));
        let x: f64 = rng.random_range(-0.55..0.55) * z;
        let texture = random_texture(&mut rng);
        let temperature = rng.random_range(0.3..1.0);
        let shape = if rng.random_bool(0.5) {
            let radius: f64 = rng.random_range(0.4..2.2);
            Shape::Sphere {
                center: [x, CAMERA_HEIGHT - radius, z],
                radius,
            }
        } else {
            let yaw: f64 = rng.random_range(-0.9..0.9);
            let half_u: f64 = rng.random_range(0.4..2.5);
            let half_v: f64 = rng.random_range(0.5..3.0);
            Shape::Rect {
                center: [x, CAMERA_HEIGHT - half_v, z],
                axis_u: [yaw.cos(), 0.0, yaw.sin()],
                axis_v: [0.0, 1.0, 0.0],
                half_u,
                half_v,
            }
        };
        primitives.push(Primitive {
            shape,
            texture,
            temperature,
        });
    }

    let elevation: f64 = rng.random_range(0.3..1.0);
    let azimuth: f64 = rng.random_range(-1.2..1.2);
    let sun = [
        elevation.cos() * azimuth.sin(),
        elevation.sin(),
        elevation.cos() * azimuth.cos(),
    ];
    SceneSpec {
        seed,
        primitives,
        sun_dir: sun,
        sky_color: [
            rng.random_range(0.45..0.65),
            rng.random_range(0.6..0.8),
            rng.random_range(0.85..1.0),
        ],
        ambient_temperature: rng.random_range(0.05..0.15),
    }
}

//! Pinhole projection flow and differentiable inverse warping between the
//! camera planes of a multi-spectral rig.
//!
//! Conventions: pixel centers sit on integer coordinates with the origin at
//! the top-left pixel, depth is the z-coordinate in the camera frame, and a
//! transform `T_tgt^ref` maps points from the target camera frame into the
//! reference camera frame.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectrum::Spectrum;

/// Tolerance for accepting a 4×4 matrix as a rigid transform.
pub const RIGIDITY_TOL: f64 = 1e-6;

/// Zero-skew pinhole camera.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraModel {
    k: [[f64; 3]; 3],
    width: usize,
    height: usize,
}

impl CameraModel {
    pub fn new(k: [[f64; 3]; 3], width: usize, height: usize) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Calibration("camera resolution must be positive".into()));
        }
        if k[2] != [0.0, 0.0, 1.0] {
            return Err(Error::Calibration(format!(
                "last row of K must be [0, 0, 1], got {:?}",
                k[2]
            )));
        }
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return Err(Error::Calibration("focal lengths must be positive".into()));
        }
        if k[0][1] != 0.0 || k[1][0] != 0.0 {
            return Err(Error::Calibration("skewed intrinsics are not supported".into()));
        }
        Ok(Self { k, width, height })
    }

    pub fn from_focal(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        Self::new([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]], width, height)
    }

    pub fn k(&self) -> [[f64; 3]; 3] {
        self.k
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn fx(&self) -> f64 {
        self.k[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.k[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.k[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.k[1][2]
    }

    /// Intrinsics for a map of `width × height` covering the same field of
    /// view: focal lengths and principal point scale per axis.
    pub fn scaled_to(&self, width: usize, height: usize) -> Result<Self> {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self::from_focal(
            self.fx() * sx,
            self.fy() * sy,
            self.cx() * sx,
            self.cy() * sy,
            width,
            height,
        )
    }

    /// Intrinsics after cutting out the window starting at `(x0, y0)`.
    pub fn cropped(&self, x0: f64, y0: f64, width: usize, height: usize) -> Result<Self> {
        Self::from_focal(
            self.fx(),
            self.fy(),
            self.cx() - x0,
            self.cy() - y0,
            width,
            height,
        )
    }

    /// Normalized viewing ray `K⁻¹·[u, v, 1]` with unit z.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), 1.0]
    }

    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [
            self.fx() * p[0] / p[2] + self.cx(),
            self.fy() * p[1] / p[2] + self.cy(),
        ]
    }

    pub fn contains(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u <= (self.width - 1) as f64 && v <= (self.height - 1) as f64
    }
}

/// Rigid transform stored as a homogeneous 4×4 matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    m: [[f64; 4]; 4],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self::from_rt(
            [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            [0.0; 3],
        )
    }

    pub fn from_rt(r: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Self { m }
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        let mut out = Self::identity();
        for (i, ti) in t.iter().enumerate() {
            out.m[i][3] = *ti;
        }
        out
    }

    /// Rotation about the camera y axis (yaw) followed by a translation.
    pub fn from_yaw(yaw_rad: f64, t: [f64; 3]) -> Self {
        let (s, c) = yaw_rad.sin_cos();
        Self::from_rt([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]], t)
    }

    /// Validates a raw matrix: bottom row `[0,0,0,1]` and orthonormal
    /// rotation block with determinant +1.
    pub fn from_matrix(m: [[f64; 4]; 4]) -> Result<Self> {
        let out = Self { m };
        if m[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::Calibration(format!(
                "transform bottom row must be [0,0,0,1], got {:?}",
                m[3]
            )));
        }
        let err = out.orthonormality_error();
        if err > RIGIDITY_TOL {
            return Err(Error::Calibration(format!(
                "transform is not rigid: orthonormality error {err:.3e}"
            )));
        }
        Ok(out)
    }

    pub fn matrix(&self) -> [[f64; 4]; 4] {
        self.m
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            row.copy_from_slice(&self.m[i][..3]);
        }
        r
    }

    pub fn translation(&self) -> [f64; 3] {
        [self.m[0][3], self.m[1][3], self.m[2][3]]
    }

    /// Max deviation of `RᵀR` from identity plus the deviation of det(R)
    /// from one.
    pub fn orthonormality_error(&self) -> f64 {
        let r = self.rotation();
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                err = err.max((dot - want).abs());
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        err.max((det - 1.0).abs())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity()
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation();
        let t = self.translation();
        let mut rt = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                rt[i][j] = r[j][i];
            }
        }
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self::from_rt(rt, ti)
    }

    /// `self · other`: apply `other` first.
    pub fn compose(&self, other: &Self) -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..4).map(|k| self.m[i][k] * other.m[k][j]).sum();
            }
        }
        Self { m }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.m;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                d = d.max((self.m[i][j] - other.m[i][j]).abs());
            }
        }
        d
    }
}

/// Pairwise extrinsics of the rig, keyed by `(tgt, ref)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RigCalibration {
    extrinsic: BTreeMap<(Spectrum, Spectrum), RigidTransform>,
}

impl RigCalibration {
    /// Builds all ordered pairs from per-camera poses in a common rig frame
    /// (camera-to-rig transforms).
    pub fn from_poses(poses: &BTreeMap<Spectrum, RigidTransform>) -> Self {
        let mut extrinsic = BTreeMap::new();
        for (&a, pa) in poses {
            for (&b, pb) in poses {
                if a != b {
                    extrinsic.insert((a, b), pb.inverse().compose(pa));
                }
            }
        }
        Self { extrinsic }
    }

    pub fn insert(&mut self, tgt: Spectrum, reference: Spectrum, t: RigidTransform) {
        self.extrinsic.insert((tgt, reference), t);
    }

    /// `T_tgt^ref`; identity for a spectrum paired with itself.
    pub fn transform(&self, tgt: Spectrum, reference: Spectrum) -> Result<RigidTransform> {
        if tgt == reference {
            return Ok(RigidTransform::identity());
        }
        self.extrinsic
            .get(&(tgt, reference))
            .copied()
            .ok_or_else(|| {
                Error::Calibration(format!("missing extrinsics for pair {tgt}->{reference}"))
            })
    }

    /// Checks that every stored pair has its inverse stored consistently.
    pub fn validate(&self) -> Result<()> {
        for (&(a, b), t) in &self.extrinsic {
            let err = t.orthonormality_error();
            if err > RIGIDITY_TOL {
                return Err(Error::Calibration(format!(
                    "{a}->{b} is not rigid (error {err:.3e})"
                )));
            }
            if let Some(back) = self.extrinsic.get(&(b, a)) {
                let d = t.compose(back).max_abs_diff(&RigidTransform::identity());
                if d > 1e-9 {
                    return Err(Error::Calibration(format!(
                        "{a}->{b} and {b}->{a} are not inverse (error {d:.3e})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn pairs(&self) -> impl Iterator<Item = (&(Spectrum, Spectrum), &RigidTransform)> {
        self.extrinsic.iter()
    }
}

/// Intrinsics of every spectrum plus their pairwise calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct CameraRig {
    cameras: BTreeMap<Spectrum, CameraModel>,
    calibration: RigCalibration,
}

impl CameraRig {
    pub fn new(cameras: BTreeMap<Spectrum, CameraModel>, calibration: RigCalibration) -> Self {
        Self {
            cameras,
            calibration,
        }
    }

    /// Desk-scale rig: RGB 64×96, NIR 56×88 and a wide-angle THR 48×80 on a
    /// short horizontal bar with slight yaw offsets.
    pub fn desk() -> Self {
        let mut cameras = BTreeMap::new();
        let mut poses = BTreeMap::new();
        let specs = [
            (Spectrum::Rgb, 96usize, 64usize, 60f64, 0.0f64, 0.0f64),
            (Spectrum::Nir, 88, 56, 62.0, 0.15, 0.6),
            (Spectrum::Thr, 80, 48, 76.0, -0.2, -0.8),
        ];
        for (s, w, h, hfov_deg, x, yaw_deg) in specs {
            let f = (w as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
            let cam = CameraModel::from_focal(
                f,
                f,
                (w as f64 - 1.0) / 2.0,
                (h as f64 - 1.0) / 2.0,
                w,
                h,
            )
            .expect("desk intrinsics are valid");
            cameras.insert(s, cam);
            poses.insert(s, RigidTransform::from_yaw(yaw_deg.to_radians(), [x, 0.0, 0.0]));
        }
        Self::new(cameras, RigCalibration::from_poses(&poses))
    }

    pub fn camera(&self, s: Spectrum) -> Result<&CameraModel> {
        self.cameras
            .get(&s)
            .ok_or_else(|| Error::Calibration(format!("missing intrinsics for {s}")))
    }

    pub fn set_camera(&mut self, s: Spectrum, cam: CameraModel) {
        self.cameras.insert(s, cam);
    }

    pub fn calibration(&self) -> &RigCalibration {
        &self.calibration
    }

    pub fn transform(&self, tgt: Spectrum, reference: Spectrum) -> Result<RigidTransform> {
        self.calibration.transform(tgt, reference)
    }

    /// Errors unless intrinsics and both directions of every pair exist.
    pub fn require_complete(&self) -> Result<()> {
        for s in Spectrum::ALL {
            self.camera(s)?;
        }
        for (a, b) in Spectrum::ordered_pairs() {
            self.transform(a, b)?;
        }
        self.calibration.validate()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = CalibrationFile {
            intrinsics: self
                .cameras
                .iter()
                .map(|(s, c)| {
                    (
                        s.as_str().to_string(),
                        IntrinsicsEntry {
                            k: c.k.iter().flatten().copied().collect(),
                            width: c.width,
                            height: c.height,
                        },
                    )
                })
                .collect(),
            extrinsics: self
                .calibration
                .pairs()
                .map(|((a, b), t)| {
                    (
                        format!("{a}->{b}"),
                        ExtrinsicsEntry {
                            t: t.m.iter().flatten().copied().collect(),
                        },
                    )
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CalibrationFile = serde_json::from_str(text)
            .map_err(|e| Error::Calibration(format!("malformed calibration JSON: {e}")))?;
        let mut cameras = BTreeMap::new();
        for (name, entry) in file.intrinsics {
            let s: Spectrum = name
                .parse()
                .map_err(|_| Error::Calibration(format!("unknown spectrum key '{name}'")))?;
            if entry.k.len() != 9 {
                return Err(Error::Calibration(format!("{name}: K needs 9 values")));
            }
            let mut k = [[0.0; 3]; 3];
            for (i, v) in entry.k.iter().enumerate() {
                k[i / 3][i % 3] = *v;
            }
            cameras.insert(s, CameraModel::new(k, entry.width, entry.height)?);
        }
        let mut calibration = RigCalibration::default();
        for (key, entry) in file.extrinsics {
            let (a, b) = key
                .split_once("->")
                .ok_or_else(|| Error::Calibration(format!("bad pair key '{key}'")))?;
            let parse = |s: &str| {
                s.parse::<Spectrum>()
                    .map_err(|_| Error::Calibration(format!("bad pair key '{key}'")))
            };
            if entry.t.len() != 16 {
                return Err(Error::Calibration(format!("{key}: T needs 16 values")));
            }
            let mut m = [[0.0; 4]; 4];
            for (i, v) in entry.t.iter().enumerate() {
                m[i / 4][i % 4] = *v;
            }
            calibration.insert(parse(a)?, parse(b)?, RigidTransform::from_matrix(m)?);
        }
        calibration.validate()?;
        Ok(Self::new(cameras, calibration))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct CalibrationFile {
    intrinsics: BTreeMap<String, IntrinsicsEntry>,
    extrinsics: BTreeMap<String, ExtrinsicsEntry>,
}

#[derive(Serialize, Deserialize)]
struct IntrinsicsEntry {
    #[serde(rename = "K")]
    k: Vec<f64>,
    width: usize,
    height: usize,
}

#[derive(Serialize, Deserialize)]
struct ExtrinsicsEntry {
    #[serde(rename = "T")]
    t: Vec<f64>,
}

/// Calibration of one target→reference projection.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSetup {
    pub cam_tgt: CameraModel,
    pub cam_ref: CameraModel,
    /// `T_tgt^ref`
    pub transform: RigidTransform,
}

/// Per-pixel sub-pixel positions of target pixels in the reference plane.
#[derive(Clone, Debug)]
pub struct FlowField {
    /// `(B, 1, H, W)` horizontal reference coordinate; zero where invalid.
    pub u: Tensor,
    /// `(B, 1, H, W)` vertical reference coordinate; zero where invalid.
    pub v: Tensor,
    /// `(B, 1, H, W)` indicator (1.0 / 0.0) in the depth dtype.
    pub valid: Tensor,
    setups: Vec<ProjectionSetup>,
}

impl FlowField {
    /// `(B, H, W, 2)` stack of `(u, v)`.
    pub fn coords(&self) -> Result<Tensor> {
        let u = self.u.squeeze(1)?;
        let v = self.v.squeeze(1)?;
        Ok(Tensor::stack(&[&u, &v], 3)?)
    }

    /// Number of validly projected pixels over the whole batch.
    pub fn valid_count(&self) -> Result<usize> {
        let s = self.valid.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
        Ok(s.round() as usize)
    }

    pub fn setups(&self) -> &[ProjectionSetup] {
        &self.setups
    }

    pub fn batch(&self) -> usize {
        self.setups.len()
    }

    /// `(height, width)` of the reference frame.
    pub fn reference_size(&self) -> (usize, usize) {
        let c = &self.setups[0].cam_ref;
        (c.height(), c.width())
    }

    pub fn with_reference_shrunk(&self, width: usize, height: usize) -> Result<Self> {
        let mut setups = self.setups.clone();
        for s in &mut setups {
            s.cam_ref = CameraModel::new(s.cam_ref.k(), width, height)?;
        }
        let dims = self.u.dims().to_vec();
        let u: Vec<f64> = self.u.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let v: Vec<f64> = self.v.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let mut valid: Vec<f64> = self.valid.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        for i in 0..valid.len() {
            if u[i] > (width - 1) as f64 || v[i] > (height - 1) as f64 {
                valid[i] = 0.0;
            }
        }
        let valid = Tensor::from_vec(valid, dims, self.u.device())?.to_dtype(self.u.dtype())?;
        Ok(Self {
            u: (&self.u * &valid)?,
            v: (&self.v * &valid)?,
            valid,
            setups,
        })
    }
}

/// Warped map plus the validity it inherited from the flow.
#[derive(Clone, Debug)]
pub struct WarpResult {
    /// `(B, C, H, W)` in the target plane, zero where invalid.
    pub data: Tensor,
    /// `(B, 1, H, W)` indicator.
    pub valid: Tensor,
}

/// Projection flow from the target plane into the reference plane for a
/// batch sharing one calibration.
///
/// `depth_tgt` is `(B, 1, H, W)` matching `cam_tgt`'s resolution; `valid`
/// optionally restricts which target pixels carry depth.
pub fn project_flow(
    depth_tgt: &Tensor,
    valid: Option<&Tensor>,
    cam_tgt: &CameraModel,
    cam_ref: &CameraModel,
    transform: &RigidTransform,
) -> Result<FlowField> {
    let b = depth_tgt.dim(0)?;
    let setup = ProjectionSetup {
        cam_tgt: cam_tgt.clone(),
        cam_ref: cam_ref.clone(),
        transform: *transform,
    };
    project_flow_batch(depth_tgt, valid, &vec![setup; b])
}

/// Projection flow with one calibration per batch element.
pub fn project_flow_batch(
    depth_tgt: &Tensor,
    valid: Option<&Tensor>,
    setups: &[ProjectionSetup],
) -> Result<FlowField> {
    let (b, c, h, w) = depth_tgt.dims4()?;
    if c != 1 {
        return Err(Error::Interface(format!("depth must have one channel, got {c}")));
    }
    if setups.len() != b {
        return Err(Error::Interface(format!(
            "{} projection setups for a batch of {b}",
            setups.len()
        )));
    }
    let dev = depth_tgt.device();
    let dtype = depth_tgt.dtype();
    let n = h * w;

    let mut coeff = Vec::with_capacity(b * 3 * n);
    let mut offset = Vec::with_capacity(b * 3);
    for s in setups {
        if s.cam_tgt.width() != w || s.cam_tgt.height() != h {
            return Err(Error::Interface(format!(
                "depth is {h}x{w} but target camera is {}x{}",
                s.cam_tgt.height(),
                s.cam_tgt.width()
            )));
        }
        let err = s.transform.orthonormality_error();
        if err > RIGIDITY_TOL {
            return Err(Error::Calibration(format!(
                "transform is not rigid: orthonormality error {err:.3e}"
            )));
        }
        let r = s.transform.rotation();
        let t = s.transform.translation();
        let kr = s.cam_ref.k();
        // M = K_ref · R; with identical intrinsics and no rotation the
        // coefficients are the pixel grid itself, kept exact.
        let passthrough = s.cam_ref.k() == s.cam_tgt.k() && s.transform.rotation() == RigidTransform::identity().rotation();
        let mut m = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = (0..3).map(|k| kr[i][k] * r[k][j]).sum();
            }
        }
        for row in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    let value = if passthrough {
                        [x as f64, y as f64, 1.0][row]
                    } else {
                        let ray = s.cam_tgt.ray(x as f64, y as f64);
                        m[row][0] * ray[0] + m[row][1] * ray[1] + m[row][2] * ray[2]
                    };
                    coeff.push(value);
                }
            }
        }
        for row in 0..3 {
            offset.push((0..3).map(|k| kr[row][k] * t[k]).sum::<f64>());
        }
    }
    let coeff = Tensor::from_vec(coeff, (b, 3, h, w), dev)?.to_dtype(dtype)?;
    let offset = Tensor::from_vec(offset, (b, 3, 1, 1), dev)?.to_dtype(dtype)?;

    let depth_valid = match valid {
        Some(v) => v.to_dtype(dtype)?,
        None => depth_tgt.ones_like()?,
    };
    check_positive_depth(depth_tgt, &depth_valid)?;
    let one = depth_tgt.ones_like()?;
    let depth_safe = depth_valid.ge(0.5)?.where_cond(depth_tgt, &one)?;

    // (a + c/d): dividing numerator and denominator of the projection by d
    let inv_d = depth_safe.recip()?;
    let proj = coeff.broadcast_add(&offset.broadcast_mul(&inv_d)?)?;
    let num_x = proj.narrow(1, 0, 1)?;
    let num_y = proj.narrow(1, 1, 1)?;
    let den = proj.narrow(1, 2, 1)?;

    let num_x_v: Vec<f64> = num_x.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let num_y_v: Vec<f64> = num_y.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let den_v: Vec<f64> = den.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let dv: Vec<f64> = depth_valid.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut mask = vec![0.0f64; b * n];
    for bi in 0..b {
        let cam = &setups[bi].cam_ref;
        for i in 0..n {
            let idx = bi * n + i;
            if dv[idx] < 0.5 || den_v[idx] <= 0.0 {
                continue;
            }
            let u = num_x_v[idx] / den_v[idx];
            let v = num_y_v[idx] / den_v[idx];
            if cam.contains(u, v) {
                mask[idx] = 1.0;
            }
        }
    }
    let valid_t = Tensor::from_vec(mask, (b, 1, h, w), dev)?.to_dtype(dtype)?;
    let is_valid = valid_t.ge(0.5)?;
    let den_safe = is_valid.where_cond(&den, &one)?;
    let zeros = depth_tgt.zeros_like()?;
    let u = is_valid.where_cond(&num_x.div(&den_safe)?, &zeros)?;
    let v = is_valid.where_cond(&num_y.div(&den_safe)?, &zeros)?;
    Ok(FlowField {
        u,
        v,
        valid: valid_t,
        setups: setups.to_vec(),
    })
}

fn check_positive_depth(depth: &Tensor, valid: &Tensor) -> Result<()> {
    let d: Vec<f64> = depth.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let m: Vec<f64> = valid.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if let Some((i, v)) = d
        .iter()
        .zip(&m)
        .enumerate()
        .find(|(_, (d, m))| **m >= 0.5 && !(**d > 0.0))
        .map(|(i, (d, _))| (i, *d))
    {
        return Err(Error::Domain(format!(
            "non-positive depth {v} at valid pixel index {i}"
        )));
    }
    Ok(())
}

/// Bilinear resampling of `src` (reference plane) at the flow positions.
///
/// Differentiable with respect to both `src` and the flow coordinates.
pub fn inverse_warp(src: &Tensor, flow: &FlowField) -> Result<WarpResult> {
    let (b, c, hr, wr) = src.dims4()?;
    let (fh, fw) = flow.reference_size();
    if (hr, wr) != (fh, fw) || b != flow.batch() {
        return Err(Error::Interface(format!(
            "source map {b}x{c}x{hr}x{wr} does not match flow reference frame {}x{fh}x{fw}",
            flow.batch()
        )));
    }
    let (_, _, h, w) = flow.u.dims4()?;
    let n = h * w;
    let dev = src.device();
    let dtype = src.dtype();

    let us: Vec<f64> = flow.u.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let vs: Vec<f64> = flow.v.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let mut x0 = Vec::with_capacity(b * n);
    let mut y0 = Vec::with_capacity(b * n);
    let mut corner_idx: [Vec<u32>; 4] = Default::default();
    for i in 0..b * n {
        let fx = us[i].floor().clamp(0.0, (wr - 1) as f64);
        let fy = vs[i].floor().clamp(0.0, (hr - 1) as f64);
        x0.push(fx);
        y0.push(fy);
        let (xa, ya) = (fx as usize, fy as usize);
        let xb = (xa + 1).min(wr - 1);
        let yb = (ya + 1).min(hr - 1);
        for (k, (xx, yy)) in [(xa, ya), (xb, ya), (xa, yb), (xb, yb)].into_iter().enumerate() {
            corner_idx[k].push((yy * wr + xx) as u32);
        }
    }
    let x0 = Tensor::from_vec(x0, (b, 1, h, w), dev)?.to_dtype(dtype)?;
    let y0 = Tensor::from_vec(y0, (b, 1, h, w), dev)?.to_dtype(dtype)?;
    let wx1 = (&flow.u.to_dtype(dtype)? - &x0)?;
    let wy1 = (&flow.v.to_dtype(dtype)? - &y0)?;
    let wx0 = (1.0 - &wx1)?;
    let wy0 = (1.0 - &wy1)?;
    let weights = [
        (&wx0 * &wy0)?,
        (&wx1 * &wy0)?,
        (&wx0 * &wy1)?,
        (&wx1 * &wy1)?,
    ];

    let flat = src.contiguous()?.reshape((b, c, hr * wr))?;
    let mut data: Option<Tensor> = None;
    for (idx, weight) in corner_idx.iter().zip(weights.iter()) {
        let index = Tensor::from_slice(idx, (b, 1, n), dev)?
            .repeat((1, c, 1))?
            .contiguous()?;
        let sampled = flat.gather(&index, 2)?.reshape((b, c, h, w))?;
        let term = sampled.broadcast_mul(weight)?;
        data = Some(match data {
            None => term,
            Some(acc) => (acc + term)?,
        });
    }
    let valid = flow.valid.to_dtype(dtype)?;
    let data = data.expect("four corners").broadcast_mul(&valid)?;
    Ok(WarpResult { data, valid })
}

/// Resamples `src_map`, which lives in `src`'s plane at some integer
/// downsampling of that camera's resolution, onto `plane` at the same
/// downsampling, driven by `plane`'s depth.
///
/// `depth_plane` is `(B, 1, H, W)` at either `plane`'s full resolution or
/// the map resolution; `rigs` holds one rig for the whole batch or one per
/// element.
pub fn align_to_plane(
    src_map: &Tensor,
    src: Spectrum,
    depth_plane: &Tensor,
    depth_valid: Option<&Tensor>,
    plane: Spectrum,
    rigs: &[&CameraRig],
) -> Result<WarpResult> {
    let (b, _, hs, ws) = src_map.dims4()?;
    if rigs.is_empty() || (rigs.len() != 1 && rigs.len() != b) {
        return Err(Error::Interface(format!(
            "{} rigs for a batch of {b}",
            rigs.len()
        )));
    }
    let rig_at = |i: usize| if rigs.len() == 1 { rigs[0] } else { rigs[i] };
    let cam_src_full = rig_at(0).camera(src)?;
    let scale = map_scale(cam_src_full, hs, ws)?;
    let cam_plane_full = rig_at(0).camera(plane)?;
    if cam_plane_full.height() % scale != 0 || cam_plane_full.width() % scale != 0 {
        return Err(Error::Interface(format!(
            "{plane} resolution is not divisible by map scale {scale}"
        )));
    }
    let (hp, wp) = (cam_plane_full.height() / scale, cam_plane_full.width() / scale);
    let (_, _, hd, wd) = depth_plane.dims4()?;
    let (depth, dvalid) = if (hd, wd) == (hp, wp) {
        (depth_plane.clone(), depth_valid.cloned())
    } else if (hd, wd) == (cam_plane_full.height(), cam_plane_full.width()) {
        (
            crate::ops::subsample(depth_plane, scale)?,
            depth_valid
                .map(|v| crate::ops::subsample(v, scale))
                .transpose()?,
        )
    } else {
        return Err(Error::Interface(format!(
            "depth {hd}x{wd} fits neither {plane} ({}x{}) nor the map scale",
            cam_plane_full.height(),
            cam_plane_full.width()
        )));
    };
    let mut setups = Vec::with_capacity(b);
    for i in 0..b {
        let rig = rig_at(i);
        setups.push(ProjectionSetup {
            cam_tgt: rig.camera(plane)?.scaled_to(wp, hp)?,
            cam_ref: rig.camera(src)?.scaled_to(ws, hs)?,
            transform: rig.transform(plane, src)?,
        });
    }
    let flow = project_flow_batch(&depth, dvalid.as_ref(), &setups)?;
    inverse_warp(src_map, &flow)
}

fn map_scale(cam: &CameraModel, h: usize, w: usize) -> Result<usize> {
    if h == 0 || cam.height() % h != 0 || cam.width() % w != 0 {
        return Err(Error::Interface(format!(
            "map {h}x{w} is not an integer downsampling of {}x{}",
            cam.height(),
            cam.width()
        )));
    }
    let s = cam.height() / h;
    if cam.width() / w != s {
        return Err(Error::Interface(format!(
            "map {h}x{w} has anisotropic scale against {}x{}",
            cam.height(),
            cam.width()
        )));
    }
    Ok(s)
}

/// Depth of the reference plane re-expressed in the target plane: samples
/// the reference depth along the flow, lifts it to 3D in the reference
/// frame and reads the z-coordinate in the target frame.
///
/// `ref_valid` optionally marks reference pixels with depth; target pixels
/// whose bilinear footprint touches an invalid one are dropped.
pub fn synthesize_depth(
    depth_ref: &Tensor,
    ref_valid: Option<&Tensor>,
    flow: &FlowField,
) -> Result<WarpResult> {
    let sampled = inverse_warp(depth_ref, flow)?;
    let dev = depth_ref.device();
    let dtype = depth_ref.dtype();
    let b = flow.batch();
    let mut valid = sampled.valid.clone();
    if let Some(rv) = ref_valid {
        let coverage = inverse_warp(&rv.to_dtype(dtype)?, flow)?.data;
        valid = (valid * coverage.ge(1.0 - 1e-6)?.to_dtype(dtype)?)?;
    }
    // z_tgt = d · (r20·x̂ + r21·ŷ + r22) + t2 with T_ref^tgt = (T_tgt^ref)⁻¹
    let mut rows = Vec::with_capacity(b * 6);
    for s in flow.setups() {
        let back = s.transform.inverse();
        let r = back.rotation();
        let t = back.translation();
        let c = &s.cam_ref;
        rows.extend_from_slice(&[
            r[2][0] / c.fx(),
            r[2][1] / c.fy(),
            r[2][2] - r[2][0] * c.cx() / c.fx() - r[2][1] * c.cy() / c.fy(),
            t[2],
        ]);
    }
    let coef = Tensor::from_vec(rows, (b, 4, 1, 1), dev)?.to_dtype(dtype)?;
    let ax = coef.narrow(1, 0, 1)?;
    let ay = coef.narrow(1, 1, 1)?;
    let a0 = coef.narrow(1, 2, 1)?;
    let tz = coef.narrow(1, 3, 1)?;
    let u = flow.u.to_dtype(dtype)?;
    let v = flow.v.to_dtype(dtype)?;
    let scale = u
        .broadcast_mul(&ax)?
        .add(&v.broadcast_mul(&ay)?)?
        .broadcast_add(&a0)?;
    let z = sampled.data.mul(&scale)?.broadcast_add(&tz)?;
    let valid = (valid.clone() * z.gt(0.0)?.to_dtype(dtype)?)?;
    Ok(WarpResult {
        data: z.mul(&valid)?,
        valid,
    })
}

/// Pixel grid `(B, 1, H, W)` pair used by identity-flow checks.
pub fn pixel_grid(b: usize, h: usize, w: usize, dtype: DType, dev: &Device) -> Result<(Tensor, Tensor)> {
    let u = Tensor::arange(0u32, w as u32, dev)?
        .to_dtype(dtype)?
        .reshape((1, 1, 1, w))?
        .broadcast_as((b, 1, h, w))?
        .contiguous()?;
    let v = Tensor::arange(0u32, h as u32, dev)?
        .to_dtype(dtype)?
        .reshape((1, 1, h, 1))?
        .broadcast_as((b, 1, h, w))?
        .contiguous()?;
    Ok((u, v))
}

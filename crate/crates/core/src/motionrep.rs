//! Whole-body motion features: root yaw rate, root-local planar velocity, root
//! height, root-local joint positions, joint velocities and face coefficients.
//! Also the pose-error metrics computed on recovered joint positions.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::Array;

pub const FACE_DIM: usize = 50;

/// Width of the root block (yaw rate, planar velocity, height).
pub const ROOT_DIM: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skeleton {
    /// Parent of each joint; the root's parent is `-1`.
    pub parents: Vec<i32>,
    pub body: Vec<usize>,
    pub hand: Vec<usize>,
    pub left_hip: usize,
    pub right_hip: usize,
    pub frame_rate: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Part {
    All,
    Body,
    Hand,
}

impl Skeleton {
    /// 22 body joints in the usual SMPL order followed by 15 joints per hand
    /// (five fingers of three joints each, chained from the wrists).
    pub fn desk() -> Self {
        let mut parents: Vec<i32> = vec![-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19];
        for wrist in [20, 21] {
            for _finger in 0..5 {
                let base = parents.len() as i32;
                parents.push(wrist);
                parents.push(base);
                parents.push(base + 1);
            }
        }
        Self {
            parents,
            body: (0..22).collect(),
            hand: (22..52).collect(),
            left_hip: 1,
            right_hip: 2,
            frame_rate: 30.0,
        }
    }

    pub fn joint_count(&self) -> usize {
        self.parents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.joint_count();
        if n < 3 || self.parents[0] != -1 {
            return Err(Error::Invalid("skeleton root must be joint 0 with no parent".into()));
        }
        for (j, &p) in self.parents.iter().enumerate().skip(1) {
            if p < 0 || p as usize >= j {
                return Err(Error::Invalid(format!("joint {j} has parent {p}; parents must precede children")));
            }
        }
        let mut seen = vec![0u8; n];
        for &j in self.body.iter().chain(&self.hand) {
            if j >= n {
                return Err(Error::Invalid(format!("joint index {j} out of range")));
            }
            seen[j] += 1;
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Invalid("body and hand joint sets must partition the skeleton".into()));
        }
        if !self.body.contains(&0) {
            return Err(Error::Invalid("root must belong to the body set".into()));
        }
        if self.left_hip >= n || self.right_hip >= n || self.left_hip == self.right_hip {
            return Err(Error::Invalid("hip joints must be distinct valid joints".into()));
        }
        Ok(())
    }

    pub fn joints(&self, part: Part) -> Vec<usize> {
        match part {
            Part::All => (0..self.joint_count()).collect(),
            Part::Body => self.body.clone(),
            Part::Hand => self.hand.clone(),
        }
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

/// Column bookkeeping for the per-frame feature vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub joints: usize,
    pub d: usize,
    pub body_cols: Vec<usize>,
    pub hand_cols: Vec<usize>,
    pub face_cols: Vec<usize>,
}

impl Layout {
    fn new(skel: &Skeleton) -> Self {
        let n = skel.joint_count();
        let pos = |j: usize| ROOT_DIM + 3 * (j - 1);
        let vel = |j: usize| ROOT_DIM + 3 * (n - 1) + 3 * j;
        let mut sorted_body = skel.body.clone();
        sorted_body.sort_unstable();
        let mut sorted_hand = skel.hand.clone();
        sorted_hand.sort_unstable();
        let mut body_cols: Vec<usize> = (0..ROOT_DIM).collect();
        for &j in sorted_body.iter().filter(|&&j| j != 0) {
            body_cols.extend(pos(j)..pos(j) + 3);
        }
        for &j in &sorted_body {
            body_cols.extend(vel(j)..vel(j) + 3);
        }
        let mut hand_cols = Vec::new();
        for &j in &sorted_hand {
            hand_cols.extend(pos(j)..pos(j) + 3);
        }
        for &j in &sorted_hand {
            hand_cols.extend(vel(j)..vel(j) + 3);
        }
        let face_start = ROOT_DIM + 3 * (n - 1) + 3 * n;
        Self {
            joints: n,
            d: face_start + FACE_DIM,
            body_cols,
            hand_cols,
            face_cols: (face_start..face_start + FACE_DIM).collect(),
        }
    }

    pub fn d_b(&self) -> usize {
        self.body_cols.len()
    }

    pub fn d_h(&self) -> usize {
        self.hand_cols.len()
    }

    pub fn d_f(&self) -> usize {
        self.face_cols.len()
    }

    fn pos_col(&self, j: usize) -> usize {
        ROOT_DIM + 3 * (j - 1)
    }

    fn vel_col(&self, j: usize) -> usize {
        ROOT_DIM + 3 * (self.joints - 1) + 3 * j
    }

    /// First column of the joint-velocity block.
    pub fn velocity_start(&self) -> usize {
        self.vel_col(0)
    }
}

/// Global joint positions `[L, N, 3]` in meters plus face coefficients `[L, 50]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawMotion {
    pub positions: Array,
    pub face: Array,
}

impl RawMotion {
    pub fn frames(&self) -> usize {
        self.positions.shape()[0]
    }

    pub fn joint(&self, t: usize, j: usize) -> Vector3<f64> {
        let n = self.positions.shape()[1];
        let p = &self.positions.data()[(t * n + j) * 3..(t * n + j) * 3 + 3];
        Vector3::new(p[0], p[1], p[2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionRepr {
    /// `[L, d]`.
    pub frames: Array,
    pub velocity_included: bool,
}

impl MotionRepr {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Global planar root position and heading of the first decoded frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RootAnchor {
    pub x: f64,
    pub z: f64,
    pub yaw: f64,
}

impl RootAnchor {
    pub fn of(raw: &RawMotion, skel: &Skeleton) -> Result<Self> {
        let yaw = facing_yaw(raw, skel, 0)?;
        let r = raw.joint(0, 0);
        Ok(Self { x: r.x, z: r.z, yaw })
    }
}

/// Rotation about +y by `yaw` (right-handed, so +z turns toward +x).
pub fn rot_y(yaw: f64, v: Vector3<f64>) -> Vector3<f64> {
    let (s, c) = yaw.sin_cos();
    Vector3::new(c * v.x + s * v.z, v.y, -s * v.x + c * v.z)
}

fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut w = a.rem_euclid(two_pi);
    if w > std::f64::consts::PI {
        w -= two_pi;
    }
    w
}

/// Heading of frame `t` from the ground projection of the hip axis.
pub fn facing_yaw(raw: &RawMotion, skel: &Skeleton, t: usize) -> Result<f64> {
    let h = raw.joint(t, skel.left_hip) - raw.joint(t, skel.right_hip);
    let (fx, fz) = (-h.z, h.x);
    if (fx * fx + fz * fz).sqrt() < 1e-9 {
        return Err(Error::DegenerateFacing { frame: t });
    }
    Ok(fx.atan2(fz))
}

pub fn encode(raw: &RawMotion, skel: &Skeleton, include_velocity: bool) -> Result<MotionRepr> {
    let layout = skel.layout();
    let l = raw.frames();
    let n = skel.joint_count();
    if raw.positions.shape() != [l, n, 3] || raw.face.shape() != [l, FACE_DIM] {
        return Err(Error::shape(
            "encode",
            format!("positions {:?}, face {:?} for {n} joints", raw.positions.shape(), raw.face.shape()),
        ));
    }
    if l < 2 {
        return Err(Error::Invalid(format!("motion needs at least 2 frames, got {l}")));
    }
    if !raw.positions.all_finite() {
        return Err(Error::NonFinite { what: "joint positions".into() });
    }
    let yaws: Vec<f64> = (0..l).map(|t| facing_yaw(raw, skel, t)).collect::<Result<_>>()?;
    let d = layout.d;
    let mut out = vec![0.0; l * d];
    for t in 0..l {
        let row = &mut out[t * d..(t + 1) * d];
        let yaw = yaws[t];
        let root = raw.joint(t, 0);
        // velocities look one frame ahead; the last frame repeats the previous one
        let (a, b) = if t + 1 < l { (t, t + 1) } else { (t - 1, t) };
        let yaw_a = yaws[a];
        row[0] = wrap_angle(yaws[b] - yaws[a]);
        let dv = rot_y(-yaw_a, raw.joint(b, 0) - raw.joint(a, 0));
        row[1] = dv.x;
        row[2] = dv.z;
        row[3] = root.y;
        for j in 1..n {
            let p = rot_y(-yaw, raw.joint(t, j) - root);
            let c = layout.pos_col(j);
            row[c..c + 3].copy_from_slice(p.as_slice());
        }
        if include_velocity {
            for j in 0..n {
                let v = rot_y(-yaw_a, raw.joint(b, j) - raw.joint(a, j));
                let c = layout.vel_col(j);
                row[c..c + 3].copy_from_slice(v.as_slice());
            }
        }
        let f0 = layout.face_cols[0];
        row[f0..f0 + FACE_DIM].copy_from_slice(raw.face.row(t));
    }
    Ok(MotionRepr { frames: Array::new(&[l, d], out)?, velocity_included: include_velocity })
}

/// Integrates the root channels from `anchor` and places joints from the
/// root-local positions. Joint velocities are not used.
pub fn decode(repr: &MotionRepr, skel: &Skeleton, anchor: RootAnchor) -> Result<RawMotion> {
    let layout = skel.layout();
    let s = repr.frames.shape();
    if s.len() != 2 || s[1] != layout.d {
        return Err(Error::shape("decode", format!("frames {s:?}, layout expects width {}", layout.d)));
    }
    let (l, d, n) = (s[0], layout.d, skel.joint_count());
    let f = repr.frames.data();
    let mut pos = vec![0.0; l * n * 3];
    let mut face = vec![0.0; l * FACE_DIM];
    let (mut x, mut z, mut yaw) = (anchor.x, anchor.z, anchor.yaw);
    for t in 0..l {
        let row = &f[t * d..(t + 1) * d];
        let root = Vector3::new(x, row[3], z);
        pos[t * n * 3..t * n * 3 + 3].copy_from_slice(root.as_slice());
        for j in 1..n {
            let c = layout.pos_col(j);
            let p = root + rot_y(yaw, Vector3::new(row[c], row[c + 1], row[c + 2]));
            pos[(t * n + j) * 3..(t * n + j) * 3 + 3].copy_from_slice(p.as_slice());
        }
        let f0 = layout.face_cols[0];
        face[t * FACE_DIM..(t + 1) * FACE_DIM].copy_from_slice(&row[f0..f0 + FACE_DIM]);
        let step = rot_y(yaw, Vector3::new(row[1], 0.0, row[2]));
        x += step.x;
        z += step.z;
        yaw += row[0];
    }
    Ok(RawMotion { positions: Array::new(&[l, n, 3], pos)?, face: Array::new(&[l, FACE_DIM], face)? })
}

fn gather_cols(frames: &Array, cols: &[usize]) -> Array {
    let (l, d) = (frames.shape()[0], frames.shape()[1]);
    let src = frames.data();
    let mut out = Vec::with_capacity(l * cols.len());
    for t in 0..l {
        out.extend(cols.iter().map(|&c| src[t * d + c]));
    }
    Array::from_parts(vec![l, cols.len()], out)
}

/// Splits `[L, d]` into body, hand and face column blocks.
pub fn split_parts(frames: &Array, layout: &Layout) -> Result<(Array, Array, Array)> {
    let s = frames.shape();
    if s.len() != 2 || s[1] != layout.d {
        return Err(Error::shape("split_parts", format!("frames {s:?}, expected width {}", layout.d)));
    }
    Ok((
        gather_cols(frames, &layout.body_cols),
        gather_cols(frames, &layout.hand_cols),
        gather_cols(frames, &layout.face_cols),
    ))
}

pub fn merge_parts(body: &Array, hand: &Array, face: &Array, layout: &Layout) -> Result<Array> {
    let l = body.shape()[0];
    let widths = [(body, layout.d_b()), (hand, layout.d_h()), (face, layout.d_f())];
    for (a, w) in widths {
        if a.shape() != [l, w] {
            return Err(Error::shape(
                "merge_parts",
                format!("body {:?}, hand {:?}, face {:?}", body.shape(), hand.shape(), face.shape()),
            ));
        }
    }
    let d = layout.d;
    let mut out = vec![0.0; l * d];
    for (a, cols) in [(body, &layout.body_cols), (hand, &layout.hand_cols), (face, &layout.face_cols)] {
        let w = cols.len();
        for t in 0..l {
            for (k, &c) in cols.iter().enumerate() {
                out[t * d + c] = a.data()[t * w + k];
            }
        }
    }
    Array::new(&[l, d], out)
}

fn check_pair(op: &'static str, pred: &RawMotion, gt: &RawMotion) -> Result<(usize, usize)> {
    let (a, b) = (pred.positions.shape(), gt.positions.shape());
    if a != b || a.len() != 3 || a[2] != 3 {
        return Err(Error::shape(op, format!("pred {a:?} vs gt {b:?}")));
    }
    Ok((a[0], a[1]))
}

fn check_joints(op: &'static str, joints: &[usize], n: usize) -> Result<()> {
    if joints.is_empty() || joints.iter().any(|&j| j >= n) {
        return Err(Error::shape(op, format!("joint selection out of range for {n} joints")));
    }
    Ok(())
}

/// Mean per-joint position error in millimeters over the selected joints.
pub fn mpjpe(pred: &RawMotion, gt: &RawMotion, joints: &[usize]) -> Result<f64> {
    let (l, n) = check_pair("mpjpe", pred, gt)?;
    check_joints("mpjpe", joints, n)?;
    let mut total = 0.0;
    for t in 0..l {
        for &j in joints {
            total += (pred.joint(t, j) - gt.joint(t, j)).norm();
        }
    }
    Ok(1000.0 * total / (l * joints.len()) as f64)
}

/// Optimal similarity transform (scale, rotation, translation) taking `src`
/// onto `dst` in the least-squares sense.
pub fn similarity_align(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Option<(f64, Matrix3<f64>, Vector3<f64>)> {
    let k = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / k;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / k;
    let var_s: f64 = src.iter().map(|p| (p - mu_s).norm_squared()).sum::<f64>() / k;
    if var_s < 1e-18 {
        return None;
    }
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    cov /= k;
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut sign = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        sign[(2, 2)] = -1.0;
    }
    let r = u * sign * vt;
    let sv = svd.singular_values;
    let trace = sv[0] * sign[(0, 0)] + sv[1] * sign[(1, 1)] + sv[2] * sign[(2, 2)];
    let scale = trace / var_s;
    let t = mu_d - scale * r * mu_s;
    Some((scale, r, t))
}

/// MPJPE after per-frame similarity alignment of the prediction.
pub fn pa_mpjpe(pred: &RawMotion, gt: &RawMotion, joints: &[usize]) -> Result<f64> {
    let (l, n) = check_pair("pa_mpjpe", pred, gt)?;
    check_joints("pa_mpjpe", joints, n)?;
    let mut total = 0.0;
    for t in 0..l {
        let src: Vec<Vector3<f64>> = joints.iter().map(|&j| pred.joint(t, j)).collect();
        let dst: Vec<Vector3<f64>> = joints.iter().map(|&j| gt.joint(t, j)).collect();
        let (s, r, tr) = similarity_align(&src, &dst).ok_or(Error::DegenerateFrame { frame: t })?;
        for (p, g) in src.iter().zip(&dst) {
            total += (s * r * p + tr - g).norm();
        }
    }
    Ok(1000.0 * total / (l * joints.len()) as f64)
}

/// Mean norm of the difference of second finite differences, mm/frame².
pub fn accel_error(pred: &RawMotion, gt: &RawMotion, joints: &[usize]) -> Result<f64> {
    let (l, n) = check_pair("accel_error", pred, gt)?;
    check_joints("accel_error", joints, n)?;
    if l < 3 {
        return Err(Error::Invalid(format!("acceleration needs at least 3 frames, got {l}")));
    }
    let acc = |m: &RawMotion, t: usize, j: usize| m.joint(t + 1, j) - 2.0 * m.joint(t, j) + m.joint(t - 1, j);
    let mut total = 0.0;
    for t in 1..l - 1 {
        for &j in joints {
            total += (acc(pred, t, j) - acc(gt, t, j)).norm();
        }
    }
    Ok(1000.0 * total / ((l - 2) * joints.len()) as f64)
}

/// Per-column affine standardization fitted on a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    const STD_FLOOR: f64 = 1e-3;

    /// Fits on the rows of every `[L, d]` array in `items`.
    pub fn fit<'a>(items: impl IntoIterator<Item = &'a Array>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut n = 0usize;
        for a in items {
            let d = a.cols();
            if sum.is_empty() {
                sum = vec![0.0; d];
                sq = vec![0.0; d];
            } else if sum.len() != d {
                return Err(Error::shape("normalizer", format!("width {d} vs {}", sum.len())));
            }
            for r in 0..a.rows() {
                for (c, v) in a.row(r).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
            n += a.rows();
        }
        if n == 0 {
            return Err(Error::Invalid("normalizer needs at least one frame".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(Self::STD_FLOOR))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn width(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, a: &Array) -> Result<Array> {
        self.apply(a, |v, m, s| (v - m) / s)
    }

    pub fn denormalize(&self, a: &Array) -> Result<Array> {
        self.apply(a, |v, m, s| v * s + m)
    }

    fn apply(&self, a: &Array, f: impl Fn(f64, f64, f64) -> f64) -> Result<Array> {
        if a.cols() != self.width() {
            return Err(Error::shape("normalizer", format!("input {:?}, width {}", a.shape(), self.width())));
        }
        let d = self.width();
        let mut out = a.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let c = i % d;
            *v = f(*v, self.mean[c], self.std[c]);
        }
        Ok(out)
    }

    /// Restriction to a subset of columns.
    pub fn select(&self, cols: &[usize]) -> Self {
        Self { mean: cols.iter().map(|&c| self.mean[c]).collect(), std: cols.iter().map(|&c| self.std[c]).collect() }
    }
}

//! Procedural whole-body motion corpus with paired texts.
//!
//! Every item is a forward-kinematics animation of the desk skeleton drawn
//! from one of eight families (forward/backward walks, clockwise and
//! counter-clockwise circles, waving, fist clenching, jumping, squatting),
//! refined by an attribute (speed, hand side or repetition count), plus a
//! facial coefficient trajectory drawn from one of five expressions.

use nalgebra::{UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, TAU};

use crate::error::{Error, Result};
use crate::gradcore::Array;
use crate::motionrep::{self, MotionRepr, RawMotion, RootAnchor, Skeleton, FACE_DIM};

pub const FAMILIES: [&str; 8] = ["walk_forward", "walk_backward", "circle_cw", "circle_ccw", "wave", "fist", "jump", "squat"];
pub const EMOTIONS: [&str; 5] = ["happy", "sad", "angry", "surprised", "neutral"];
const SPEEDS: [&str; 3] = ["slowly", "steadily", "quickly"];
const SIDES: [&str; 3] = ["left", "right", "both"];
const COUNTS: [&str; 3] = ["once", "twice", "three times"];

/// Proportions of the train/validation/test split.
pub const SPLIT_FRACTIONS: [f64; 3] = [0.80, 0.05, 0.15];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub seed: u64,
    pub count: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Lengths are multiples of this value.
    pub len_multiple: usize,
    pub families: Vec<String>,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            count: 512,
            min_len: 32,
            max_len: 64,
            len_multiple: 4,
            families: FAMILIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemMeta {
    pub id: usize,
    pub family: String,
    /// Family plus attribute, e.g. `circle_cw:quickly`.
    pub class: String,
    pub text: String,
    pub face_text: String,
    pub emotion: String,
    pub split: Split,
    pub frames: usize,
    pub anchor: RootAnchor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    pub meta: ItemMeta,
    /// `[L, d]`, values exactly representable in 32-bit storage.
    pub repr: Array,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub skeleton: Skeleton,
    pub items: Vec<Item>,
}

/// A (family, attribute) pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MotionClass {
    pub family: &'static str,
    pub attribute: &'static str,
}

impl MotionClass {
    pub fn label(&self) -> String {
        format!("{}:{}", self.family, self.attribute)
    }

    /// Text variants of this class; all are word-order permutations of one another.
    pub fn texts(&self) -> Vec<String> {
        let a = self.attribute;
        match self.family {
            "walk_forward" | "walk_backward" => {
                let dir = if self.family == "walk_forward" { "forward" } else { "backward" };
                vec![
                    format!("a person walks {dir} {a}"),
                    format!("a person {a} walks {dir}"),
                    format!("{a} a person walks {dir}"),
                ]
            }
            "circle_cw" | "circle_ccw" => {
                let rot = if self.family == "circle_cw" { "clockwise" } else { "counterclockwise" };
                vec![
                    format!("a person circles {rot} {a}"),
                    format!("a person {a} circles {rot}"),
                    format!("{a} a person circles {rot}"),
                ]
            }
            "wave" | "fist" => {
                let (verb, obj, objs) = if self.family == "wave" { ("waves", "hand", "hands") } else { ("clenches", "fist", "fists") };
                if a == "both" {
                    vec![format!("a person {verb} both {objs}"), format!("both {objs} a person {verb}")]
                } else {
                    vec![format!("a person {verb} the {a} {obj}"), format!("the {a} {obj} a person {verb}")]
                }
            }
            _ => {
                let verb = if self.family == "jump" { "jumps" } else { "squats" };
                vec![format!("a person {verb} {a}"), format!("{a} a person {verb}")]
            }
        }
    }
}

pub fn classes(families: &[String]) -> Vec<MotionClass> {
    let mut out = Vec::new();
    for fam in FAMILIES {
        if !families.iter().any(|f| f == fam) {
            continue;
        }
        let attrs: &[&'static str] = match fam {
            "walk_forward" | "walk_backward" | "circle_cw" | "circle_ccw" => &SPEEDS,
            "wave" | "fist" => &SIDES,
            _ => &COUNTS,
        };
        out.extend(attrs.iter().map(|&a| MotionClass { family: fam, attribute: a }));
    }
    out
}

pub fn face_texts(emotion: &str) -> Vec<String> {
    vec![format!("a {emotion} face"), format!("the face looks {emotion}"), format!("a {emotion} facial expression")]
}

/// Per-item random draws shared by the animation programs.
struct Draw {
    len: usize,
    scale: f64,
    speed: f64,
    phase: f64,
    cadence: f64,
    yaw0: f64,
    origin: Vector3<f64>,
    wave_rate: f64,
}

/// Joint offsets from each parent in the rest pose (facing +z, left is +x).
pub fn rest_offsets(skel: &Skeleton) -> Vec<Vector3<f64>> {
    let body: [[f64; 3]; 22] = [
        [0.0, 0.0, 0.0],
        [0.09, -0.08, 0.0],
        [-0.09, -0.08, 0.0],
        [0.0, 0.12, -0.02],
        [0.01, -0.38, 0.0],
        [-0.01, -0.38, 0.0],
        [0.0, 0.14, 0.0],
        [0.0, -0.40, -0.03],
        [0.0, -0.40, -0.03],
        [0.0, 0.05, 0.02],
        [0.0, -0.05, 0.12],
        [0.0, -0.05, 0.12],
        [0.0, 0.22, -0.02],
        [0.07, 0.12, 0.0],
        [-0.07, 0.12, 0.0],
        [0.0, 0.12, 0.04],
        [0.12, 0.03, 0.0],
        [-0.12, 0.03, 0.0],
        [0.26, 0.0, 0.0],
        [-0.26, 0.0, 0.0],
        [0.25, 0.0, 0.0],
        [-0.25, 0.0, 0.0],
    ];
    let mut out: Vec<Vector3<f64>> = body.iter().map(|o| Vector3::new(o[0], o[1], o[2])).collect();
    for side in [1.0, -1.0] {
        for finger in 0..5 {
            let spread = 0.035 - 0.0175 * finger as f64;
            out.push(Vector3::new(side * 0.08, 0.0, spread));
            out.push(Vector3::new(side * 0.03, 0.0, 0.0));
            out.push(Vector3::new(side * 0.025, 0.0, 0.0));
        }
    }
    assert_eq!(out.len(), skel.joint_count(), "rest pose is defined for the desk skeleton");
    out
}

fn rx(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::x_axis(), a)
}

fn ry(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::y_axis(), a)
}

fn rz(a: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), a)
}

/// Root-relative joint positions from local joint rotations.
fn forward_kinematics(skel: &Skeleton, offsets: &[Vector3<f64>], local: &[UnitQuaternion<f64>]) -> Vec<Vector3<f64>> {
    let n = skel.joint_count();
    let mut rot = vec![UnitQuaternion::identity(); n];
    let mut pos = vec![Vector3::zeros(); n];
    rot[0] = local[0];
    for j in 1..n {
        let p = skel.parents[j] as usize;
        pos[j] = pos[p] + rot[p] * offsets[j];
        rot[j] = rot[p] * local[j];
    }
    pos
}

const L_HIP: usize = 1;
const R_HIP: usize = 2;
const L_KNEE: usize = 4;
const R_KNEE: usize = 5;
const L_SHOULDER: usize = 16;
const R_SHOULDER: usize = 17;
const L_ELBOW: usize = 18;
const R_ELBOW: usize = 19;
const FEET: [usize; 4] = [7, 8, 10, 11];

/// Local rotations of a standing pose with relaxed arms and hands.
fn idle_pose(n: usize, t: f64, phase: f64) -> Vec<UnitQuaternion<f64>> {
    let mut local = vec![UnitQuaternion::identity(); n];
    let sway = 0.03 * (0.15 * t + phase).sin();
    local[L_SHOULDER] = rz(-1.25 + sway);
    local[R_SHOULDER] = rz(1.25 - sway);
    local[L_ELBOW] = rz(-0.15);
    local[R_ELBOW] = rz(0.15);
    curl_fingers(&mut local, 0, 0.25 + 0.05 * (0.2 * t + phase).sin());
    curl_fingers(&mut local, 1, 0.25 + 0.05 * (0.2 * t + phase + 1.0).sin());
    local
}

/// Bends every finger joint of one hand (0 = left, 1 = right) by `amount` radians.
fn curl_fingers(local: &mut [UnitQuaternion<f64>], hand: usize, amount: f64) {
    let sign = if hand == 0 { -1.0 } else { 1.0 };
    for finger in 0..5 {
        let base = 22 + hand * 15 + finger * 3;
        let k = if finger == 0 { 0.6 } else { 1.0 };
        for seg in 0..3 {
            local[base + seg] = ry(sign * 0.1 * (finger as f64 - 2.0) * (seg == 0) as u8 as f64) * rz(sign * k * amount);
        }
    }
}

fn walk_legs(local: &mut [UnitQuaternion<f64>], phi: f64, amp: f64) {
    let s = phi.sin();
    local[L_HIP] = rx(-amp * s);
    local[R_HIP] = rx(amp * s);
    local[L_KNEE] = rx(1.2 * amp * (phi + 0.5 * PI).sin().max(0.0));
    local[R_KNEE] = rx(1.2 * amp * (phi - 0.5 * PI).sin().max(0.0));
    local[L_SHOULDER] *= rx(0.6 * amp * s);
    local[R_SHOULDER] *= rx(-0.6 * amp * s);
}

struct Frame {
    yaw: f64,
    planar: Vector3<f64>,
    lift: f64,
    local: Vec<UnitQuaternion<f64>>,
}

fn animate(class: &MotionClass, d: &Draw, n: usize) -> Vec<Frame> {
    let l = d.len;
    let span = (l - 1) as f64;
    let mut frames = Vec::with_capacity(l);
    let mut planar = d.origin;
    let mut yaw = d.yaw0;
    for ti in 0..l {
        let t = ti as f64;
        let mut local = idle_pose(n, t, d.phase);
        let mut lift = 0.0;
        let u = t / span;
        let (dyaw, step) = match class.family {
            "walk_forward" | "walk_backward" | "circle_cw" | "circle_ccw" => {
                let backward = class.family == "walk_backward";
                let phi = if backward { -d.cadence * t } else { d.cadence * t } + d.phase;
                walk_legs(&mut local, phi, 0.25 + 6.0 * d.speed);
                lift = 0.015 * (2.0 * phi).cos();
                let dir = if backward { -1.0 } else { 1.0 };
                let dyaw = match class.family {
                    "circle_cw" => -TAU / span,
                    "circle_ccw" => TAU / span,
                    _ => 0.0,
                };
                (dyaw, dir * d.speed)
            }
            "wave" => {
                let w = (d.wave_rate * t + d.phase).sin();
                for (hand, side) in [(0usize, "left"), (1, "right")] {
                    if class.attribute != side && class.attribute != "both" {
                        continue;
                    }
                    let sign = if hand == 0 { 1.0 } else { -1.0 };
                    let (sh, el) = if hand == 0 { (L_SHOULDER, L_ELBOW) } else { (R_SHOULDER, R_ELBOW) };
                    local[sh] = rz(sign * 1.35) * ry(sign * 0.3);
                    local[el] = rz(sign * (0.55 + 0.55 * w));
                    curl_fingers(&mut local, hand, 0.05 + 0.1 * w);
                }
                (0.0, 0.0)
            }
            "fist" => {
                let c = (PI * 2.0 * u).sin().powi(2);
                for (hand, side) in [(0usize, "left"), (1, "right")] {
                    if class.attribute != side && class.attribute != "both" {
                        continue;
                    }
                    let sign = if hand == 0 { 1.0 } else { -1.0 };
                    let (sh, el) = if hand == 0 { (L_SHOULDER, L_ELBOW) } else { (R_SHOULDER, R_ELBOW) };
                    local[sh] = ry(-sign * 1.3) * rz(sign * 0.2);
                    local[el] = ry(-sign * 0.2);
                    curl_fingers(&mut local, hand, 0.1 + 1.4 * c);
                }
                (0.0, 0.0)
            }
            _ => {
                let reps = match class.attribute {
                    "once" => 1.0,
                    "twice" => 2.0,
                    _ => 3.0,
                };
                let s = (PI * reps * u).sin().powi(2);
                if class.family == "jump" {
                    let crouch = (PI * reps * u).cos().powi(2) * (1.0 - (2.0 * u - 1.0).powi(8));
                    local[L_HIP] = rx(-0.5 * crouch);
                    local[R_HIP] = rx(-0.5 * crouch);
                    local[L_KNEE] = rx(0.9 * crouch);
                    local[R_KNEE] = rx(0.9 * crouch);
                    local[L_SHOULDER] = rz(-1.25 + 0.9 * s);
                    local[R_SHOULDER] = rz(1.25 - 0.9 * s);
                    lift = 0.25 * s;
                } else {
                    local[L_HIP] = rx(-1.2 * s);
                    local[R_HIP] = rx(-1.2 * s);
                    local[L_KNEE] = rx(2.0 * s);
                    local[R_KNEE] = rx(2.0 * s);
                    local[L_SHOULDER] = rz(-1.25 + 0.3 * s) * ry(-1.2 * s);
                    local[R_SHOULDER] = rz(1.25 - 0.3 * s) * ry(1.2 * s);
                }
                (0.0, 0.0)
            }
        };
        frames.push(Frame { yaw, planar, lift, local });
        planar += motionrep::rot_y(yaw, Vector3::new(0.0, 0.0, step));
        yaw += dyaw;
    }
    frames
}

fn emotion_directions(seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    let unit = |rng: &mut ChaCha8Rng| {
        let v: Vec<f64> = (0..FACE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n * (FACE_DIM as f64).sqrt() * 0.5).collect::<Vec<f64>>()
    };
    EMOTIONS.iter().map(|_| (unit(&mut rng), unit(&mut rng))).collect()
}

fn face_track(emotion: usize, dirs: &[(Vec<f64>, Vec<f64>)], l: usize, rng: &mut ChaCha8Rng) -> Array {
    let amp = if EMOTIONS[emotion] == "neutral" { 0.1 } else { rng.gen_range(0.8..1.2) };
    let rate = rng.gen_range(0.15..0.25);
    let phase = rng.gen_range(0.0..TAU);
    let (main, second) = &dirs[emotion];
    let mut out = Vec::with_capacity(l * FACE_DIM);
    for t in 0..l {
        let env = 0.5 - 0.5 * (PI * t as f64 / (l - 1) as f64 * 1.5).cos();
        let osc = 0.25 * amp * (rate * t as f64 + phase).sin();
        out.extend((0..FACE_DIM).map(|c| amp * env * main[c] + osc * second[c]));
    }
    Array::from_parts(vec![l, FACE_DIM], out)
}

fn round_f32(a: Array) -> Array {
    a.map(|v| v as f32 as f64)
}

/// Assigns splits by a seeded shuffle: the first 80% train, the next 5%
/// validation, the rest test (counts rounded to nearest).
pub fn assign_splits(count: usize, seed: u64) -> Vec<Split> {
    let mut order: Vec<usize> = (0..count).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX - 1);
    order.shuffle(&mut rng);
    let n_train = (SPLIT_FRACTIONS[0] * count as f64).round() as usize;
    let n_val = (SPLIT_FRACTIONS[1] * count as f64).round() as usize;
    let mut out = vec![Split::Test; count];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    out
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        Self::generate_parallel(config, 1)
    }

    /// Items are generated from per-item seeds, so the result does not
    /// depend on `threads`.
    pub fn generate_parallel(config: &CorpusConfig, threads: usize) -> Result<Self> {
        let skeleton = Skeleton::desk();
        if config.count < 20 {
            return Err(Error::Invalid(format!("corpus of {} items cannot fill an 80/5/15 split", config.count)));
        }
        if config.len_multiple == 0 || config.min_len < 3 || config.min_len > config.max_len {
            return Err(Error::Invalid("invalid corpus length range".into()));
        }
        let lengths: Vec<usize> =
            (config.min_len..=config.max_len).filter(|l| l % config.len_multiple == 0).collect();
        if lengths.is_empty() {
            return Err(Error::Invalid("no admissible corpus length in range".into()));
        }
        for f in &config.families {
            if !FAMILIES.contains(&f.as_str()) {
                return Err(Error::Invalid(format!("unknown motion family {f}")));
            }
        }
        let classes = classes(&config.families);
        if classes.is_empty() {
            return Err(Error::Invalid("no motion families selected".into()));
        }
        let offsets = rest_offsets(&skeleton);
        let dirs = emotion_directions(config.seed);
        let splits = assign_splits(config.count, config.seed);
        let n = skeleton.joint_count();
        let make = |id: usize| -> Result<Item> {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(id as u64);
            let class = &classes[id % classes.len()];
            let speed_base = match class.attribute {
                "slowly" => 0.015,
                "steadily" => 0.03,
                _ => 0.05,
            };
            let speed = speed_base * rng.gen_range(0.9..1.1);
            let draw = Draw {
                len: *lengths.choose(&mut rng).unwrap(),
                scale: rng.gen_range(0.95..1.05),
                speed,
                phase: rng.gen_range(0.0..TAU),
                cadence: TAU * (1.0 + 15.0 * speed) / skeleton.frame_rate,
                yaw0: rng.gen_range(-PI..PI),
                origin: Vector3::new(rng.gen_range(-1.0..1.0), 0.0, rng.gen_range(-1.0..1.0)),
                wave_rate: TAU * rng.gen_range(1.6..2.4) / skeleton.frame_rate,
            };
            let scaled: Vec<Vector3<f64>> = offsets.iter().map(|o| o * draw.scale).collect();
            let frames = animate(class, &draw, n);
            let l = draw.len;
            let mut pos = Vec::with_capacity(l * n * 3);
            for f in &frames {
                let rel = forward_kinematics(&skeleton, &scaled, &f.local);
                let floor = FEET.iter().map(|&j| rel[j].y).fold(f64::INFINITY, f64::min);
                let root = f.planar + Vector3::new(0.0, 0.02 - floor + f.lift, 0.0);
                for p in &rel {
                    let g = root + motionrep::rot_y(f.yaw, *p);
                    pos.extend_from_slice(g.as_slice());
                }
            }
            let emotion = rng.gen_range(0..EMOTIONS.len());
            let face = face_track(emotion, &dirs, l, &mut rng);
            let raw = RawMotion { positions: Array::new(&[l, n, 3], pos)?, face };
            let anchor = RootAnchor::of(&raw, &skeleton)?;
            let MotionRepr { frames: repr, .. } = motionrep::encode(&raw, &skeleton, true)?;
            let texts = class.texts();
            let text = texts.choose(&mut rng).unwrap().clone();
            let face_text = face_texts(EMOTIONS[emotion]).choose(&mut rng).unwrap().clone();
            Ok(Item {
                meta: ItemMeta {
                    id,
                    family: class.family.to_string(),
                    class: class.label(),
                    text,
                    face_text,
                    emotion: EMOTIONS[emotion].to_string(),
                    split: splits[id],
                    frames: l,
                    anchor,
                },
                repr: round_f32(repr),
            })
        };
        let threads = threads.clamp(1, config.count);
        let items = if threads == 1 {
            (0..config.count).map(make).collect::<Result<Vec<_>>>()?
        } else {
            let chunk = config.count.div_ceil(threads);
            std::thread::scope(|scope| {
                let handles: Vec<_> = (0..config.count)
                    .step_by(chunk)
                    .map(|start| {
                        let make = &make;
                        scope.spawn(move || (start..(start + chunk).min(config.count)).map(make).collect::<Result<Vec<_>>>())
                    })
                    .collect();
                let mut out = Vec::with_capacity(config.count);
                for h in handles {
                    out.extend(h.join().expect("corpus worker panicked")?);
                }
                Ok::<_, Error>(out)
            })?
        };
        Ok(Self { config: config.clone(), skeleton, items })
    }

    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.items.iter().filter(|i| i.meta.split == split).collect()
    }
}

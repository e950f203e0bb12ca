//! Synthetic binary movement videos of a stick figure.
//!
//! A whole-body primitive combines one arm motion per side, a phase relation
//! between the arms, and one leg motion. Subjects differ by deterministic
//! jitter of amplitude, period, limb length and phase.
//!
//! Angles are in degrees. Shoulder and hip angles are measured from straight
//! down, positive away from the body midline; elbow and knee bends rotate the
//! distal segment further (arms) or back toward the midline (legs).

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::sequence::FrameSequence;
use crate::tensor::{Frame, MapStack};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArmMotion {
    /// A1: arms extend sideways from a bent position.
    HorizontalExtension,
    /// A2: arms extend upward.
    VerticalExtension,
    /// A3: hands draw large circles.
    Circle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LegMotion {
    /// L1: legs lift in alternation.
    Raise,
    /// L2: standing still.
    Stand,
    /// L3: knees bend into a squat.
    Bend,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArmPhase {
    Co,
    Anti,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PrimitiveId {
    P1,
    P2,
    P3,
    P4,
    P5,
    P6,
}

impl PrimitiveId {
    pub const ALL: [PrimitiveId; 6] =
        [PrimitiveId::P1, PrimitiveId::P2, PrimitiveId::P3, PrimitiveId::P4, PrimitiveId::P5, PrimitiveId::P6];

    pub fn spec(self) -> PrimitiveSpec {
        use ArmMotion::*;
        use LegMotion::*;
        let (left_arm, right_arm, arm_phase, legs) = match self {
            PrimitiveId::P1 => (VerticalExtension, HorizontalExtension, ArmPhase::Co, Raise),
            PrimitiveId::P2 => (HorizontalExtension, VerticalExtension, ArmPhase::Anti, Stand),
            PrimitiveId::P3 => (Circle, Circle, ArmPhase::Co, Raise),
            PrimitiveId::P4 => (Circle, Circle, ArmPhase::Anti, Stand),
            PrimitiveId::P5 => (HorizontalExtension, HorizontalExtension, ArmPhase::Co, Bend),
            PrimitiveId::P6 => (VerticalExtension, VerticalExtension, ArmPhase::Anti, Bend),
        };
        PrimitiveSpec { id: self, left_arm, right_arm, arm_phase, legs }
    }
}

impl fmt::Display for PrimitiveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "P{}", *self as usize + 1)
    }
}

impl FromStr for PrimitiveId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PrimitiveId::ALL
            .iter()
            .copied()
            .find(|p| p.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown primitive {s:?} (expected P1..P6)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PrimitiveSpec {
    pub id: PrimitiveId,
    pub left_arm: ArmMotion,
    pub right_arm: ArmMotion,
    pub arm_phase: ArmPhase,
    pub legs: LegMotion,
}

/// Per-subject style, derived from `(subject, seed)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubjectProfile {
    pub subject: u32,
    pub amplitude_scale: f64,
    pub period_scale: f64,
    pub limb_length_scale: f64,
    /// Radians in `[0, 2pi)`.
    pub phase_offset: f64,
}

pub const JITTER_RANGE: (f64, f64) = (0.85, 1.15);

impl SubjectProfile {
    pub fn new(subject: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ subject as u64);
        let (lo, hi) = JITTER_RANGE;
        SubjectProfile {
            subject,
            amplitude_scale: rng.gen_range(lo..=hi),
            period_scale: rng.gen_range(lo..=hi),
            limb_length_scale: rng.gen_range(lo..=hi),
            phase_offset: rng.gen_range(0.0..TAU),
        }
    }

    /// No jitter.
    pub fn neutral(subject: u32) -> Self {
        SubjectProfile { subject, amplitude_scale: 1.0, period_scale: 1.0, limb_length_scale: 1.0, phase_offset: 0.0 }
    }

    /// Frames per cycle for a nominal period.
    pub fn period_frames(&self, period: usize) -> usize {
        ((period as f64 * self.period_scale).round() as usize).max(2)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmPose {
    pub shoulder: f64,
    pub elbow: f64,
    /// Apparent arm length as a fraction of the full length (foreshortening).
    pub reach: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegPose {
    pub hip: f64,
    pub knee: f64,
}

/// Joint angles of one frame; index 0 is the figure's left (image left).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub arms: [ArmPose; 2],
    pub legs: [LegPose; 2],
}

impl Pose {
    pub fn neutral() -> Self {
        Pose {
            arms: [ArmPose { shoulder: 20.0, elbow: 10.0, reach: 1.0 }; 2],
            legs: [LegPose { hip: 6.0, knee: 0.0 }; 2],
        }
    }

    fn lerp(&self, other: &Pose, t: f64) -> Pose {
        let l = |a: f64, b: f64| a + (b - a) * t;
        let arm = |a: &ArmPose, b: &ArmPose| ArmPose {
            shoulder: l(a.shoulder, b.shoulder),
            elbow: l(a.elbow, b.elbow),
            reach: l(a.reach, b.reach),
        };
        let leg = |a: &LegPose, b: &LegPose| LegPose { hip: l(a.hip, b.hip), knee: l(a.knee, b.knee) };
        Pose {
            arms: [arm(&self.arms[0], &other.arms[0]), arm(&self.arms[1], &other.arms[1])],
            legs: [leg(&self.legs[0], &other.legs[0]), leg(&self.legs[1], &other.legs[1])],
        }
    }

    fn clamped(&self) -> Pose {
        let arm = |a: &ArmPose| ArmPose {
            shoulder: a.shoulder.clamp(-40.0, 220.0),
            elbow: a.elbow.clamp(0.0, 150.0),
            reach: a.reach.clamp(0.2, 1.0),
        };
        let leg = |g: &LegPose| LegPose { hip: g.hip.clamp(-20.0, 90.0), knee: g.knee.clamp(0.0, 140.0) };
        Pose { arms: [arm(&self.arms[0]), arm(&self.arms[1])], legs: [leg(&self.legs[0]), leg(&self.legs[1])] }
    }
}

fn arm_pose(motion: ArmMotion, phase: f64, amp: f64) -> ArmPose {
    let c = phase.cos();
    match motion {
        ArmMotion::HorizontalExtension => ArmPose { shoulder: 90.0, elbow: amp * 60.0 * (1.0 + c), reach: 1.0 },
        ArmMotion::VerticalExtension => {
            ArmPose { shoulder: 135.0 + amp * 35.0 * c, elbow: amp * 45.0 * (1.0 - c), reach: 1.0 }
        }
        ArmMotion::Circle => {
            // hand on a circle beside the shoulder, seen from the front
            let r = 0.4 * amp;
            let (x, y) = (0.55 + r * phase.cos(), -r * phase.sin());
            let reach = (x * x + y * y).sqrt().min(1.0);
            let shoulder = x.atan2(y).to_degrees();
            ArmPose { shoulder, elbow: 0.0, reach }
        }
    }
}

fn leg_poses(motion: LegMotion, phase: f64, amp: f64) -> [LegPose; 2] {
    match motion {
        LegMotion::Stand => [LegPose { hip: 6.0, knee: 0.0 }; 2],
        LegMotion::Raise => {
            let lift = |r: f64| LegPose { hip: 6.0 + amp * 40.0 * r, knee: amp * 85.0 * r };
            [lift(phase.sin().max(0.0)), lift((-phase.sin()).max(0.0))]
        }
        LegMotion::Bend => {
            let b = 0.5 * (1.0 - phase.cos());
            [LegPose { hip: 6.0 + amp * 38.0 * b, knee: amp * 76.0 * b }; 2]
        }
    }
}

/// Pose of `spec` at cycle phase `phase` (radians, before subject offset).
pub fn primitive_pose(spec: &PrimitiveSpec, phase: f64, profile: &SubjectProfile) -> Pose {
    let phase = phase + profile.phase_offset;
    let amp = profile.amplitude_scale;
    let right_phase = match spec.arm_phase {
        ArmPhase::Co => phase,
        ArmPhase::Anti => phase + std::f64::consts::PI,
    };
    Pose {
        arms: [arm_pose(spec.left_arm, phase, amp), arm_pose(spec.right_arm, right_phase, amp)],
        legs: leg_poses(spec.legs, phase, amp),
    }
}

/// Body proportions in frame units (the frame spans `[0, 1]` on both axes).
struct Body {
    head_center: (f64, f64),
    head_radius: f64,
    neck: (f64, f64),
    hip: (f64, f64),
    shoulder_half_width: f64,
    hip_half_width: f64,
    upper_arm: f64,
    forearm: f64,
    thigh: f64,
    shin: f64,
    ground: f64,
}

impl Body {
    fn new(limb_scale: f64) -> Body {
        Body {
            head_center: (0.5, 0.14),
            head_radius: 0.075,
            neck: (0.5, 0.23),
            hip: (0.5, 0.52),
            shoulder_half_width: 0.07,
            hip_half_width: 0.05,
            upper_arm: 0.14 * limb_scale,
            forearm: 0.13 * limb_scale,
            thigh: 0.2 * limb_scale,
            shin: 0.2 * limb_scale,
            ground: 0.95,
        }
    }
}

/// Unit vector at `deg` from straight down, toward `side` (-1 left, +1 right).
fn direction(deg: f64, side: f64) -> (f64, f64) {
    let r = deg.to_radians();
    (side * r.sin(), r.cos())
}

fn add(p: (f64, f64), d: (f64, f64), len: f64) -> (f64, f64) {
    (p.0 + d.0 * len, p.1 + d.1 * len)
}

/// Segments and the head disk of a posed figure, in frame units.
fn skeleton(pose: &Pose, profile: &SubjectProfile) -> (Vec<((f64, f64), (f64, f64))>, (f64, f64), f64) {
    let body = Body::new(profile.limb_length_scale);
    let pose = pose.clamped();
    let mut segs = Vec::new();
    let mut feet = Vec::new();
    let mut leg_segs = Vec::new();
    for (k, side) in [-1.0, 1.0].into_iter().enumerate() {
        let leg = pose.legs[k];
        let hip = (body.hip.0 + side * body.hip_half_width, body.hip.1);
        let knee = add(hip, direction(leg.hip, side), body.thigh);
        let foot = add(knee, direction(leg.hip - leg.knee, side), body.shin);
        leg_segs.push((hip, knee));
        leg_segs.push((knee, foot));
        feet.push(foot.1);
    }
    // the lower foot rests on the ground; the whole body drops with it
    let drop = body.ground - feet.iter().cloned().fold(f64::MIN, f64::max);
    let shift = |p: (f64, f64)| (p.0, p.1 + drop);
    for (a, b) in leg_segs {
        segs.push((shift(a), shift(b)));
    }
    let neck = shift(body.neck);
    segs.push((neck, shift(body.hip)));
    segs.push((
        shift((body.hip.0 - body.hip_half_width, body.hip.1)),
        shift((body.hip.0 + body.hip_half_width, body.hip.1)),
    ));
    for (k, side) in [-1.0, 1.0].into_iter().enumerate() {
        let arm = pose.arms[k];
        let shoulder = (neck.0 + side * body.shoulder_half_width, neck.1 + 0.02);
        segs.push((neck, shoulder));
        let scale = arm.reach;
        let elbow = add(shoulder, direction(arm.shoulder, side), body.upper_arm * scale);
        let hand = add(elbow, direction(arm.shoulder + arm.elbow, side), body.forearm * scale);
        segs.push((shoulder, elbow));
        segs.push((elbow, hand));
    }
    (segs, shift(body.head_center), body.head_radius)
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0) };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Line thickness in pixels: 2 at 36 pixels, proportional otherwise, at least 1.
pub fn limb_thickness(size: (usize, usize)) -> f64 {
    (2.0 * size.0.min(size.1) as f64 / 36.0).max(1.0)
}

/// Rasterises `pose`: body pixels `+1`, background `-1`.
pub fn render_frame(pose: &Pose, profile: &SubjectProfile, size: (usize, usize)) -> Frame {
    let (h, w) = size;
    let (segs, head, head_r) = skeleton(pose, profile);
    // pixel (y, x) has its center at ((x + 0.5) / w, (y + 0.5) / h) in frame units
    let to_px = |p: (f64, f64)| (p.0 * w as f64 - 0.5, p.1 * h as f64 - 0.5);
    let segs: Vec<_> = segs.into_iter().map(|(a, b)| (to_px(a), to_px(b))).collect();
    let head = to_px(head);
    let head_r = head_r * h.min(w) as f64;
    let half = 0.5 * limb_thickness(size) + 0.05;
    let mut data = vec![-1.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let p = (x as f64, y as f64);
            let in_head = ((p.0 - head.0).powi(2) + (p.1 - head.1).powi(2)).sqrt() <= head_r;
            if in_head || segs.iter().any(|&(a, b)| point_segment_distance(p, a, b) <= half) {
                data[y * w + x] = 1.0;
            }
        }
    }
    MapStack::from_vec(1, h, w, data).expect("frame size")
}

fn primitive_poses(spec: &PrimitiveSpec, profile: &SubjectProfile, cycles: usize, period: usize) -> Vec<Pose> {
    let p = profile.period_frames(period);
    (0..cycles * p).map(|t| primitive_pose(spec, TAU * t as f64 / p as f64, profile)).collect()
}

/// `cycles` cycles of one primitive; `cycles * period_frames(period)` frames.
pub fn generate_primitive(
    id: PrimitiveId,
    profile: &SubjectProfile,
    cycles: usize,
    period: usize,
    size: (usize, usize),
) -> Result<FrameSequence> {
    generate_script(&[(id, cycles)], profile, period, size)
}

/// Ordered `(primitive, cycles)` segments.
pub type Script = Vec<(PrimitiveId, usize)>;

/// Frames at a segment boundary whose pose is interpolated from the previous segment.
pub const BLEND_FRAMES: usize = 2;

pub fn concat_a() -> Script {
    use PrimitiveId::*;
    [P1, P2, P3, P4, P5].into_iter().map(|p| (p, 4)).collect()
}

pub fn concat_b() -> Script {
    use PrimitiveId::*;
    [P5, P4, P3, P2, P1].into_iter().map(|p| (p, 4)).collect()
}

pub const SWITCH_ORDER: [PrimitiveId; 11] = {
    use PrimitiveId::*;
    [P1, P2, P5, P3, P4, P6, P4, P3, P5, P2, P1]
};

/// The switching test, with repetitions chosen so the stream is about `target_frames` long.
pub fn switch_test(period: usize, target_frames: usize) -> Script {
    let reps = ((target_frames as f64 / (SWITCH_ORDER.len() * period) as f64).round() as usize).max(1);
    SWITCH_ORDER.iter().map(|&p| (p, reps)).collect()
}

/// Switching test restricted to `allowed` primitives, with repeated neighbours merged.
pub fn switch_test_restricted(allowed: &[PrimitiveId], reps: usize) -> Script {
    let mut out: Script = Vec::new();
    for p in SWITCH_ORDER.iter().filter(|p| allowed.contains(p)) {
        if out.last().map(|(q, _)| q) != Some(p) {
            out.push((*p, reps));
        }
    }
    out
}

/// Resolves a builtin script name (`CONCAT_A`, `CONCAT_B`, `SWITCH_TEST`) or a
/// list like `P1x4,P2x4`.
pub fn parse_script(text: &str, period: usize) -> Result<Script> {
    match text.trim().to_ascii_uppercase().as_str() {
        "CONCAT_A" => return Ok(concat_a()),
        "CONCAT_B" => return Ok(concat_b()),
        "SWITCH_TEST" => return Ok(switch_test(period, 2000)),
        _ => {}
    }
    let script: Script = text
        .split(',')
        .map(|item| {
            let item = item.trim();
            let (id, reps) = match item.to_ascii_lowercase().split_once('x') {
                Some((id, r)) => (
                    id.to_string(),
                    r.parse::<usize>().map_err(|_| Error::InvalidArgument(format!("bad repetition in {item:?}")))?,
                ),
                None => (item.to_string(), 1),
            };
            Ok((id.parse()?, reps))
        })
        .collect::<Result<_>>()?;
    Ok(script)
}

/// Boundaries between consecutive segments, as frame indices, for a rendered script.
pub fn script_boundaries(script: &[(PrimitiveId, usize)], profile: &SubjectProfile, period: usize) -> Vec<usize> {
    let p = profile.period_frames(period);
    let mut at = 0;
    let mut out = Vec::new();
    for (k, (_, reps)) in script.iter().enumerate() {
        if k > 0 {
            out.push(at);
        }
        at += reps * p;
    }
    out
}

/// Renders the segments back to back; each boundary blends poses over [`BLEND_FRAMES`] frames.
pub fn generate_script(
    script: &[(PrimitiveId, usize)],
    profile: &SubjectProfile,
    period: usize,
    size: (usize, usize),
) -> Result<FrameSequence> {
    if script.is_empty() {
        return Err(Error::InvalidArgument("empty script".into()));
    }
    if let Some((p, _)) = script.iter().find(|(_, r)| *r == 0) {
        return Err(Error::InvalidArgument(format!("{p} has zero cycles")));
    }
    let mut poses: Vec<Pose> = Vec::new();
    for &(id, cycles) in script {
        let seg = primitive_poses(&id.spec(), profile, cycles, period);
        let start = poses.len();
        let prev = poses.last().copied();
        poses.extend(seg);
        if let Some(prev) = prev {
            for k in 0..BLEND_FRAMES.min(poses.len() - start) {
                let t = (k + 1) as f64 / (BLEND_FRAMES + 1) as f64;
                poses[start + k] = prev.lerp(&poses[start + k], t);
            }
        }
    }
    let frames = poses.iter().map(|p| render_frame(p, profile, size)).collect();
    FrameSequence::from_frames(size.0, size.1, frames)
}

/// One sequence per `(primitive, subject)` pair, primitives outermost.
pub fn generate_dataset(
    primitives: &[PrimitiveId],
    subjects: &[u32],
    seed: u64,
    cycles: usize,
    period: usize,
    size: (usize, usize),
) -> Result<Vec<FrameSequence>> {
    let mut out = Vec::new();
    for &p in primitives {
        for &s in subjects {
            out.push(generate_primitive(p, &SubjectProfile::new(s, seed), cycles, period, size)?);
        }
    }
    Ok(out)
}

/// ASCII rendering for debugging (`#` body, `.` background).
pub fn ascii(frame: &Frame) -> String {
    let mut s = String::new();
    for y in 0..frame.height() {
        for x in 0..frame.width() {
            s.push(if frame.get(0, y, x) > 0.0 { '#' } else { '.' });
        }
        s.push('\n');
    }
    s
}

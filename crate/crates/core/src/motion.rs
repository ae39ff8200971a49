//! Skeleton layout and the per-frame motion representation.
//!
//! A frame is 159 values: root translation (3, meters) followed by 52
//! axis-angle joint rotations (3 each, radians). Joints 0..22 are the body,
//! 22..37 the left hand and 37..52 the right hand.

use std::f64::consts::PI;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use choreo_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const JOINTS: usize = 52;
pub const BODY_JOINTS: usize = 22;
pub const HAND_JOINTS: usize = 30;
pub const FRAME_DIM: usize = 3 + JOINTS * 3;
/// Root translation plus body joint rotations.
pub const BODY_DIM: usize = 3 + BODY_JOINTS * 3;
pub const HAND_DIM: usize = HAND_JOINTS * 3;
pub const DEFAULT_FPS: f32 = 30.0;
/// Frames in one 4-second clip at the default frame rate.
pub const CLIP_FRAMES: usize = 120;
pub const CLIP_SECONDS: f64 = 4.0;

const BODY_NAMES: [&str; BODY_JOINTS] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

const BODY_PARENTS: [i32; BODY_JOINTS] = [
    -1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
];

const FINGERS: [&str; 5] = ["index", "middle", "pinky", "ring", "thumb"];
const LEFT_WRIST: usize = 20;
const RIGHT_WRIST: usize = 21;

/// The 52-joint hierarchy.
#[derive(Clone, Debug)]
pub struct Skeleton {
    names: Vec<String>,
    parents: Vec<Option<usize>>,
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::standard()
    }
}

impl Skeleton {
    pub fn standard() -> Self {
        let mut names: Vec<String> = BODY_NAMES.iter().map(|s| s.to_string()).collect();
        let mut parents: Vec<Option<usize>> = BODY_PARENTS
            .iter()
            .map(|&p| (p >= 0).then_some(p as usize))
            .collect();
        for (side, wrist) in [("left", LEFT_WRIST), ("right", RIGHT_WRIST)] {
            for finger in FINGERS {
                for seg in 1..=3 {
                    let parent = if seg == 1 { wrist } else { names.len() - 1 };
                    names.push(format!("{side}_{finger}{seg}"));
                    parents.push(Some(parent));
                }
            }
        }
        debug_assert_eq!(names.len(), JOINTS);
        Skeleton { names, parents }
    }

    pub fn joint_count(&self) -> usize {
        self.names.len()
    }

    pub fn name(&self, joint: usize) -> &str {
        &self.names[joint]
    }

    pub fn parent(&self, joint: usize) -> Option<usize> {
        self.parents[joint]
    }

    pub fn body_joints(&self) -> std::ops::Range<usize> {
        0..BODY_JOINTS
    }

    pub fn hand_joints(&self) -> std::ops::Range<usize> {
        BODY_JOINTS..JOINTS
    }

    pub fn left_hand_joints(&self) -> std::ops::Range<usize> {
        BODY_JOINTS..BODY_JOINTS + 15
    }

    pub fn right_hand_joints(&self) -> std::ops::Range<usize> {
        BODY_JOINTS + 15..JOINTS
    }
}

/// First column of a joint's rotation inside a frame.
pub fn joint_column(joint: usize) -> usize {
    3 + joint * 3
}

/// A `T × 159` motion clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionFragment {
    fps: f32,
    frames: Tensor,
}

/// Root translation and body joints: `T × 69`.
#[derive(Clone, Debug, PartialEq)]
pub struct BodySlice(pub Tensor);

/// Hand joints: `T × 90`.
#[derive(Clone, Debug, PartialEq)]
pub struct HandSlice(pub Tensor);

impl MotionFragment {
    pub fn new(fps: f32, frames: Tensor) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::Format(format!("invalid fps {fps}")));
        }
        if frames.rank() != 2 || frames.shape()[1] != FRAME_DIM {
            return Err(Error::Format(format!(
                "motion needs shape [T, {FRAME_DIM}], got {:?}",
                frames.shape()
            )));
        }
        if frames.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite motion value".into()));
        }
        Ok(MotionFragment {
            fps,
            frames: frames.with_grad(false),
        })
    }

    pub fn from_rows(fps: f32, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Format("motion has no frames".into()));
        }
        if let Some(bad) = rows.iter().find(|r| r.len() != FRAME_DIM) {
            return Err(Error::Format(format!(
                "frame has {} columns, expected {FRAME_DIM}",
                bad.len()
            )));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(fps, Tensor::new([rows.len(), FRAME_DIM], data)?)
    }

    pub fn zeros(fps: f32, frames: usize) -> Self {
        MotionFragment {
            fps,
            frames: Tensor::zeros([frames, FRAME_DIM]),
        }
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor {
        self.frames
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        self.frames.row_mut(t)
    }

    pub fn root_translation(&self, t: usize) -> [f64; 3] {
        let f = self.frame(t);
        [f[0], f[1], f[2]]
    }

    pub fn joint_rotation(&self, t: usize, joint: usize) -> [f64; 3] {
        let c = joint_column(joint);
        let f = self.frame(t);
        [f[c], f[c + 1], f[c + 2]]
    }

    /// Frames `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<MotionFragment> {
        if start >= end || end > self.len() {
            return Err(Error::contract(format!(
                "frame range {start}..{end} out of 0..{}",
                self.len()
            )));
        }
        Ok(MotionFragment {
            fps: self.fps,
            frames: self.frames.slice_axis(0, start, end)?,
        })
    }

    /// Squared L2 distance between two equally sized fragments.
    pub fn sq_distance(&self, other: &MotionFragment) -> f64 {
        self.frames
            .data()
            .iter()
            .zip(other.frames.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// Largest L2 distance between consecutive frames inside `[start, end)`.
    pub fn max_frame_jump(&self, start: usize, end: usize) -> f64 {
        (start.max(1)..end.min(self.len()))
            .map(|t| frame_distance(self.frame(t - 1), self.frame(t)))
            .fold(0.0, f64::max)
    }
}

pub fn frame_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Splits a fragment into its body (69 columns) and hand (90 columns) parts.
pub fn split_full_body(m: &MotionFragment) -> Result<(BodySlice, HandSlice)> {
    if m.frames.shape()[1] != FRAME_DIM {
        return Err(Error::Format(format!(
            "expected {FRAME_DIM} columns, got {}",
            m.frames.shape()[1]
        )));
    }
    let body = m.frames.slice_axis(1, 0, BODY_DIM)?;
    let hand = m.frames.slice_axis(1, BODY_DIM, FRAME_DIM)?;
    Ok((BodySlice(body), HandSlice(hand)))
}

pub fn recombine(fps: f32, body: &BodySlice, hand: &HandSlice) -> Result<MotionFragment> {
    let (b, h) = (&body.0, &hand.0);
    if b.rank() != 2 || h.rank() != 2 || b.shape()[1] != BODY_DIM || h.shape()[1] != HAND_DIM {
        return Err(Error::Format(format!(
            "body {:?} / hand {:?} do not form a full-body frame",
            b.shape(),
            h.shape()
        )));
    }
    if b.shape()[0] != h.shape()[0] {
        return Err(Error::contract(format!(
            "body has {} frames, hand has {}",
            b.shape()[0],
            h.shape()[0]
        )));
    }
    MotionFragment::new(fps, Tensor::concat(&[b, h], 1)?)
}

/// Rewrites a rotation vector so its angle lies in `[0, π]`.
pub fn canonical_rotation(v: [f64; 3]) -> [f64; 3] {
    let theta = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if theta <= PI {
        return v;
    }
    let two_pi = 2.0 * PI;
    let mut reduced = theta - two_pi * (theta / two_pi).round();
    if reduced <= -PI {
        reduced = PI;
    }
    let s = reduced / theta;
    [v[0] * s, v[1] * s, v[2] * s]
}

/// Canonicalizes every joint rotation; the root translation is untouched.
pub fn canonicalize_axis_angle(m: &MotionFragment) -> Result<MotionFragment> {
    if m.frames.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite value in axis-angle data".into()));
    }
    let mut out = m.clone();
    for t in 0..out.len() {
        let f = out.frame_mut(t);
        for j in 0..JOINTS {
            let c = joint_column(j);
            let r = canonical_rotation([f[c], f[c + 1], f[c + 2]]);
            f[c..c + 3].copy_from_slice(&r);
        }
    }
    Ok(out)
}

/// Joins fragments end to end.
pub fn concat_fragments(parts: &[MotionFragment]) -> Result<MotionFragment> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat_fragments: no fragments"))?;
    if let Some(bad) = parts.iter().find(|p| p.fps != first.fps) {
        return Err(Error::contract(format!(
            "fps mismatch: {} vs {}",
            first.fps, bad.fps
        )));
    }
    let frames: Vec<&Tensor> = parts.iter().map(|p| &p.frames).collect();
    Ok(MotionFragment {
        fps: first.fps,
        frames: Tensor::concat(&frames, 0)?,
    })
}

pub const MOTN_MAGIC: &[u8; 4] = b"MOTN";
pub const CONTAINER_VERSION: u32 = 1;

/// Writes the little-endian frame container shared by motion (`MOTN`) and
/// feature (`FEAT`) files: magic, version, rate, rows, columns, f32 payload.
pub fn write_container<W: Write>(mut w: W, magic: &[u8; 4], rate: f32, data: &Tensor) -> Result<()> {
    let (rows, cols) = (data.shape()[0], data.shape()[1]);
    let mut buf = Vec::with_capacity(20 + data.numel() * 4);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&rate.to_le_bytes());
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    for &v in data.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)
        .map_err(|e| Error::Format(format!("write failed: {e}")))?;
    Ok(())
}

pub fn read_container<R: Read>(mut r: R, magic: &[u8; 4]) -> Result<(f32, Tensor)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("read failed: {e}")))?;
    let name = String::from_utf8_lossy(magic).into_owned();
    if bytes.len() < 20 {
        return Err(Error::Format(format!("{name}: truncated header")));
    }
    if &bytes[..4] != magic {
        return Err(Error::Format(format!("{name}: bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != CONTAINER_VERSION {
        return Err(Error::Format(format!("{name}: unsupported version {version}")));
    }
    let rate = f32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let rows = u32_at(12) as usize;
    let cols = u32_at(16) as usize;
    let payload = &bytes[20..];
    if rows == 0 || cols == 0 || payload.len() != rows * cols * 4 {
        return Err(Error::Format(format!(
            "{name}: payload of {} bytes does not match {rows}x{cols}",
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok((rate, Tensor::new([rows, cols], data)?))
}

impl MotionFragment {
    pub fn write_motn<W: Write>(&self, w: W) -> Result<()> {
        write_container(w, MOTN_MAGIC, self.fps, &self.frames)
    }

    pub fn read_motn<R: Read>(r: R) -> Result<Self> {
        let (fps, frames) = read_container(r, MOTN_MAGIC)?;
        MotionFragment::new(fps, frames)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.write_motn(&mut buf)?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_motn(&bytes[..])
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MotionJson {
            fps: self.fps,
            frames: (0..self.len()).map(|t| self.frame(t).to_vec()).collect(),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MotionJson = serde_json::from_str(s)?;
        Self::from_rows(doc.fps, &doc.frames)
    }
}

#[derive(Serialize, Deserialize)]
struct MotionJson {
    fps: f32,
    frames: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(frames: usize) -> MotionFragment {
        MotionFragment::new(
            DEFAULT_FPS,
            Tensor::from_fn([frames, FRAME_DIM], |i| (i % 97) as f64 * 0.01 - 0.4),
        )
        .unwrap()
    }

    #[test]
    fn skeleton_partition() {
        let s = Skeleton::standard();
        assert_eq!(s.joint_count(), 52);
        assert_eq!(s.parent(0), None);
        for j in 1..52 {
            assert!(s.parent(j).unwrap() < j, "joint {j}");
        }
        let body: Vec<_> = s.body_joints().collect();
        let hands: Vec<_> = s.hand_joints().collect();
        assert_eq!(body.len() + hands.len(), 52);
        assert_eq!(s.left_hand_joints().len(), 15);
        assert_eq!(s.right_hand_joints().len(), 15);
        assert_eq!(s.parent(22), Some(20));
        assert_eq!(s.parent(37), Some(21));
        assert_eq!(s.name(51), "right_thumb3");
    }

    #[test]
    fn split_shapes_and_roundtrip() {
        let m = ramp(120);
        let (b, h) = split_full_body(&m).unwrap();
        assert_eq!(b.0.shape(), &[120, 69]);
        assert_eq!(h.0.shape(), &[120, 90]);
        assert_eq!(recombine(m.fps(), &b, &h).unwrap(), m);
    }

    #[test]
    fn zero_hands_give_zero_slice() {
        let mut m = ramp(10);
        for t in 0..10 {
            m.frame_mut(t)[BODY_DIM..].fill(0.0);
        }
        let (_, h) = split_full_body(&m).unwrap();
        assert!(h.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_column_count_is_format_error() {
        assert!(matches!(
            MotionFragment::new(30.0, Tensor::zeros([4, 158])),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn canonical_examples() {
        let r = canonical_rotation([0.0, 0.0, 1.5 * PI]);
        assert!((r[2] + 0.5 * PI).abs() < 1e-12 && r[0] == 0.0 && r[1] == 0.0);
        assert_eq!(canonical_rotation([0.0; 3]), [0.0; 3]);
        assert_eq!(canonical_rotation([0.0, PI, 0.0]), [0.0, PI, 0.0]);
        let big = canonical_rotation([7.0 * PI, 0.0, 0.0]);
        assert!((big[0] - PI).abs() < 1e-9);
    }

    #[test]
    fn canonicalize_rejects_nan() {
        let mut m = ramp(2);
        m.frames.data_mut()[5] = f64::NAN;
        assert!(canonicalize_axis_angle(&m).is_err());
    }

    #[test]
    fn concat_examples() {
        let a = ramp(120);
        let b = MotionFragment::zeros(DEFAULT_FPS, 120);
        let c = concat_fragments(&[a.clone(), b.clone(), a.clone()]).unwrap();
        assert_eq!(c.len(), 360);
        assert_eq!(c.slice(0, 120).unwrap(), a);
        assert_eq!(concat_fragments(&[a.clone()]).unwrap(), a);
        assert_eq!(concat_fragments(&[a.clone(), b]).unwrap().len(), 240);
        let other = MotionFragment::zeros(60.0, 3);
        assert!(matches!(concat_fragments(&[a, other]), Err(Error::Contract(_))));
    }

    #[test]
    fn motn_layout_and_json_mirror() {
        let m = MotionFragment::new(DEFAULT_FPS, Tensor::from_fn([3, FRAME_DIM], |i| i as f64 * 0.5)).unwrap();
        let mut buf = Vec::new();
        m.write_motn(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"MOTN");
        assert_eq!(f32::from_le_bytes(buf[8..12].try_into().unwrap()), 30.0);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 159);
        assert_eq!(buf.len(), 20 + 3 * 159 * 4);
        assert_eq!(MotionFragment::read_motn(&buf[..]).unwrap(), m);
        assert_eq!(MotionFragment::from_json(&m.to_json().unwrap()).unwrap(), m);
        buf.truncate(30);
        assert!(matches!(MotionFragment::read_motn(&buf[..]), Err(Error::Format(_))));
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point = [f64; 3];

/// A labeled sequence of 3D skeletons, `frames[t][j] = (x, y, z)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonSequence {
    pub label: usize,
    /// Reference joints `(i₁, i₂, i₃)` used for normalization.
    #[serde(rename = "ref")]
    pub reference: [usize; 3],
    pub frames: Vec<Vec<Point>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_names: Option<Vec<String>>,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

fn dot(a: Point, b: Point) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn norm(a: Point) -> f64 {
    dot(a, a).sqrt()
}

fn scaled(a: Point, s: f64) -> Point {
    [a[0] * s, a[1] * s, a[2] * s]
}

fn invalid(field: &str, message: impl Into<String>) -> Error {
    Error::Validation {
        field: field.to_string(),
        message: message.into(),
    }
}

impl SkeletonSequence {
    pub fn num_frames(&self) -> usize {
        self.frames.len()
    }

    pub fn num_joints(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// Trajectory of one joint through all frames.
    pub fn trajectory(&self, joint: usize) -> Vec<Point> {
        self.frames.iter().map(|f| f[joint]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(invalid("frames", "sequence has no frames (T >= 1 required)"));
        }
        let joints = self.num_joints();
        if joints < 3 {
            return Err(invalid("frames", format!("{joints} joints per frame, at least 3 required")));
        }
        for (t, frame) in self.frames.iter().enumerate() {
            if frame.len() != joints {
                return Err(invalid(
                    "frames",
                    format!("frame {t} has {} joints, frame 0 has {joints}", frame.len()),
                ));
            }
            if frame.iter().flatten().any(|v| !v.is_finite()) {
                return Err(invalid("frames", format!("frame {t} has a non-finite coordinate")));
            }
        }
        let [i1, i2, i3] = self.reference;
        if i1 == i2 || i2 == i3 || i1 == i3 {
            return Err(invalid("ref", format!("reference joints {:?} are not distinct", self.reference)));
        }
        if let Some(&bad) = self.reference.iter().find(|&&i| i >= joints) {
            return Err(invalid("ref", format!("reference joint {bad} out of range for {joints} joints")));
        }
        if let Some(names) = &self.joint_names {
            if names.len() != joints {
                return Err(invalid(
                    "joint_names",
                    format!("{} names for {joints} joints", names.len()),
                ));
            }
        }
        reference_frame(&self.frames[0], self.reference).map_err(|e| invalid("ref", e.to_string()))?;
        Ok(())
    }
}

/// Translation and orthonormal axes derived from the reference triplet.
struct ReferenceFrame {
    origin: Point,
    axes: [Point; 3],
    span: f64,
}

fn reference_frame(frame: &[Point], reference: [usize; 3]) -> Result<ReferenceFrame> {
    let (p1, p2, p3) = (frame[reference[0]], frame[reference[1]], frame[reference[2]]);
    let shoulder = sub(p2, p3);
    let span = norm(shoulder);
    if !(span > 0.0) {
        return Err(Error::Geometry("reference joints 2 and 3 coincide".into()));
    }
    let normal = cross(sub(p2, p1), sub(p3, p1));
    let scale = norm(sub(p2, p1)) * norm(sub(p3, p1));
    let nn = norm(normal);
    if !(nn > 1e-12 * scale) {
        return Err(Error::Geometry("reference joints are collinear".into()));
    }
    let ex = scaled(shoulder, 1.0 / span);
    let ez = scaled(normal, 1.0 / nn);
    let ey = cross(ez, ex);
    Ok(ReferenceFrame {
        origin: scaled([p2[0] + p3[0], p2[1] + p3[1], p2[2] + p3[2]], 0.5),
        axes: [ex, ey, ez],
        span,
    })
}

/// Similarity normalization computed once from frame 0 and applied to every
/// joint of every frame: the midpoint of joints 2 and 3 goes to the origin,
/// the triplet plane becomes the x-y plane, `p₂ − p₃` points along +x and has
/// length `scale`.
pub fn normalize_with_scale(seq: &SkeletonSequence, scale: f64) -> Result<SkeletonSequence> {
    if seq.frames.is_empty() {
        return Err(Error::Geometry("cannot normalize an empty sequence".into()));
    }
    let rf = reference_frame(&seq.frames[0], seq.reference)?;
    let gamma = scale / rf.span;
    let frames = seq
        .frames
        .iter()
        .map(|frame| {
            frame
                .iter()
                .map(|&p| {
                    let d = sub(p, rf.origin);
                    [
                        gamma * dot(d, rf.axes[0]),
                        gamma * dot(d, rf.axes[1]),
                        gamma * dot(d, rf.axes[2]),
                    ]
                })
                .collect()
        })
        .collect();
    Ok(SkeletonSequence {
        frames,
        ..seq.clone()
    })
}

pub fn normalize(seq: &SkeletonSequence) -> Result<SkeletonSequence> {
    normalize_with_scale(seq, 1.0)
}

//! Plain-text motion export.
//!
//! ```text
//! # vimocap motion 1
//! fps 30
//! joints 19
//! frames 240
//! 0 r00 r01 ... r08 (joint 0) ... r08 (joint 18) tx ty tz
//! ```
//!
//! One line per frame: the frame index, each joint's rotation relative to
//! its parent as a row-major matrix, then the root translation.

use std::fmt::Write as _;

use nalgebra::{Matrix3, Vector3};

use super::EvalError;
use crate::kinematics::rotation::to_row_major;
use crate::kinematics::{MotionSequence, PoseFrame};

const HEADER: &str = "# vimocap motion 1";

pub fn export_motion_text(motion: &MotionSequence) -> Result<String, EvalError> {
    let nj = motion.frames.first().map(|f| f.theta_6d.len()).unwrap_or(0);
    let mut out = String::new();
    let _ = writeln!(out, "{HEADER}");
    let _ = writeln!(out, "fps {}", motion.fps);
    let _ = writeln!(out, "joints {nj}");
    let _ = writeln!(out, "frames {}", motion.frames.len());
    for (i, f) in motion.frames.iter().enumerate() {
        let _ = write!(out, "{i}");
        for r in f.rotation_matrices()? {
            for v in to_row_major(&r) {
                let _ = write!(out, " {v}");
            }
        }
        let _ = writeln!(out, " {} {} {}", f.t.x, f.t.y, f.t.z);
    }
    Ok(out)
}

pub fn parse_motion_text(text: &str) -> Result<MotionSequence, EvalError> {
    let err = |line: usize, msg: &str| EvalError::MotionText {
        line: line + 1,
        msg: msg.to_string(),
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, HEADER)) => {}
        _ => return Err(err(0, "missing header")),
    }
    let mut field = |name: &str| -> Result<f64, EvalError> {
        let (i, l) = lines.next().ok_or_else(|| err(0, "truncated header"))?;
        l.strip_prefix(name)
            .and_then(|v| v.trim().parse::<f64>().ok())
            .ok_or_else(|| err(i, &format!("expected `{name} <value>`")))
    };
    let fps = field("fps")?;
    let nj = field("joints")? as usize;
    let n = field("frames")? as usize;
    let mut frames = Vec::with_capacity(n);
    for (i, l) in lines {
        let v: Vec<f64> = l
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| err(i, "not a number"))?;
        if v.len() != 1 + 9 * nj + 3 {
            return Err(err(i, &format!("expected {} values, found {}", 1 + 9 * nj + 3, v.len())));
        }
        if v[0] as usize != frames.len() {
            return Err(err(i, "frame index out of order"));
        }
        let rots: Vec<Matrix3<f64>> = (0..nj).map(|j| Matrix3::from_row_slice(&v[1 + 9 * j..10 + 9 * j])).collect();
        let t = Vector3::new(v[1 + 9 * nj], v[2 + 9 * nj], v[3 + 9 * nj]);
        frames.push(PoseFrame::from_matrices(&rots, t)?);
    }
    if frames.len() != n {
        return Err(err(4 + frames.len(), &format!("expected {n} frames, found {}", frames.len())));
    }
    Ok(MotionSequence { fps, frames })
}

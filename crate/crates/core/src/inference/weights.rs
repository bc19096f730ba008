use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::stack::{StackConfig, TrackerStack};
use super::InferenceError;
use crate::kinematics::SkeletonConfig;

pub const WEIGHTS_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

/// First line of a weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsHeader {
    pub format_version: u32,
    pub hidden: usize,
    pub inference_camera: usize,
    pub config: StackConfig,
    pub skeleton: SkeletonConfig,
    pub tensors: Vec<TensorHeader>,
}

/// Serialises a stack: a one-line JSON header followed by every tensor as
/// little-endian f64 in declaration order.
pub fn weights_to_bytes(stack: &TrackerStack) -> Result<Vec<u8>, InferenceError> {
    let header = WeightsHeader {
        format_version: WEIGHTS_FORMAT_VERSION,
        hidden: stack.config.hidden,
        inference_camera: stack.inference_camera,
        config: stack.config.clone(),
        skeleton: stack.skeleton.clone(),
        tensors: stack
            .params
            .tensors
            .iter()
            .map(|t| TensorHeader {
                name: t.name.clone(),
                rows: t.rows,
                cols: t.cols,
            })
            .collect(),
    };
    let mut out = crate::io::to_json_line(&header)?.into_bytes();
    out.push(b'\n');
    for t in &stack.params.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn weights_from_bytes(bytes: &[u8]) -> Result<TrackerStack, InferenceError> {
    let nl = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| InferenceError::InvalidWeights("missing header".into()))?;
    let header: WeightsHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| InferenceError::InvalidWeights(format!("header: {e}")))?;
    if header.format_version != WEIGHTS_FORMAT_VERSION {
        return Err(InferenceError::InvalidWeights(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut stack = TrackerStack::new(&header.skeleton, header.inference_camera, header.config.clone(), 0)?;
    if stack.params.tensors.len() != header.tensors.len() {
        return Err(InferenceError::InvalidWeights("tensor count differs from the architecture".into()));
    }
    let payload = &bytes[nl + 1..];
    let expected: usize = header.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if payload.len() != expected {
        return Err(InferenceError::InvalidWeights(format!(
            "payload has {} bytes, header implies {}",
            payload.len(),
            expected
        )));
    }
    let mut off = 0;
    for (t, h) in stack.params.tensors.iter_mut().zip(&header.tensors) {
        if t.name != h.name || t.rows != h.rows || t.cols != h.cols {
            return Err(InferenceError::InvalidWeights(format!("tensor {} does not match {}", h.name, t.name)));
        }
        for v in t.data.iter_mut() {
            *v = f64::from_le_bytes(payload[off..off + 8].try_into().expect("8 bytes"));
            off += 8;
        }
    }
    Ok(stack)
}

pub fn save_weights(stack: &TrackerStack, path: &Path) -> Result<(), InferenceError> {
    let bytes = weights_to_bytes(stack)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_weights(path: &Path) -> Result<TrackerStack, InferenceError> {
    weights_from_bytes(&fs::read(path)?)
}

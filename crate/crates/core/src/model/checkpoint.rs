//! Checkpoint container: `VITCKPT1` magic, a length-prefixed JSON header
//! (channel plan, epoch, validation AUC, parameter count), then the full
//! parameter payload as little-endian f32 in a fixed layer order:
//!
//! stem.w, stem.b,
//! block1.bn.{gamma, beta, running_mean, running_var}, block1.conv.{w, b},
//! down.w, down.b,
//! block2.bn.{gamma, beta, running_mean, running_var}, block2.conv.{w, b},
//! head.bn.{gamma, beta, running_mean, running_var}, head.w, head.b

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelError, ModelParams};

const MAGIC: &[u8; 8] = b"VITCKPT1";

/// Checkpoint provenance recorded in the header.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub val_auc: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    c1: usize,
    c2: usize,
    epoch: usize,
    val_auc: Option<f64>,
    param_count: usize,
}

fn payload_order(params: &ModelParams) -> Vec<&[f64]> {
    vec![
        &params.stem.weights,
        &params.stem.bias,
        &params.block1.bn.gamma,
        &params.block1.bn.beta,
        &params.block1.bn.running_mean,
        &params.block1.bn.running_var,
        &params.block1.conv.weights,
        &params.block1.conv.bias,
        &params.down.weights,
        &params.down.bias,
        &params.block2.bn.gamma,
        &params.block2.bn.beta,
        &params.block2.bn.running_mean,
        &params.block2.bn.running_var,
        &params.block2.conv.weights,
        &params.block2.conv.bias,
        &params.head_bn.gamma,
        &params.head_bn.beta,
        &params.head_bn.running_mean,
        &params.head_bn.running_var,
        &params.head_w,
        std::slice::from_ref(&params.head_b),
    ]
}

fn payload_len(params: &ModelParams) -> usize {
    payload_order(params).iter().map(|s| s.len()).sum()
}

pub fn write_checkpoint(
    params: &ModelParams,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let header = Header {
        c1: params.c1,
        c2: params.c2,
        epoch: meta.epoch,
        val_auc: meta.val_auc,
        param_count: payload_len(params),
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");
    let file = File::create(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    let write = |w: &mut BufWriter<File>, bytes: &[u8]| {
        w.write_all(bytes)
            .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
    };
    write(&mut w, MAGIC)?;
    write(&mut w, &(header_bytes.len() as u32).to_le_bytes())?;
    write(&mut w, &header_bytes)?;
    let mut payload = Vec::with_capacity(header.param_count * 4);
    for slice in payload_order(params) {
        for &v in slice {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write(&mut w, &payload)?;
    w.flush()
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn read_checkpoint(path: &Path) -> Result<(ModelParams, CheckpointMeta), ModelError> {
    let err = |m: String| ModelError::Checkpoint(format!("{}: {m}", path.display()));
    let file = File::open(path).map_err(|e| err(e.to_string()))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| err("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(err("not a VITCKPT1 checkpoint".into()));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|_| err("truncated header length".into()))?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    if header_len == 0 || header_len > 1 << 20 {
        return Err(err(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| err("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| err(format!("bad header: {e}")))?;
    if header.c1 == 0 || header.c2 == 0 {
        return Err(err("channel widths must be positive".into()));
    }

    let mut params = ModelParams::zeros(header.c1, header.c2);
    if payload_len(&params) != header.param_count {
        return Err(err(format!(
            "param_count {} does not match architecture ({} expected)",
            header.param_count,
            payload_len(&params)
        )));
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|e| err(e.to_string()))?;
    if payload.len() != header.param_count * 4 {
        return Err(err(format!(
            "payload length mismatch: expected {} bytes, got {}",
            header.param_count * 4,
            payload.len()
        )));
    }
    let decoded: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    if let Some(i) = decoded.iter().position(|v| !v.is_finite()) {
        return Err(err(format!("non-finite parameter at payload index {i}")));
    }
    let mut values = decoded.into_iter();
    {
        let mut fill = |slice: &mut [f64]| {
            for v in slice.iter_mut() {
                *v = values.next().unwrap();
            }
        };
        fill(&mut params.stem.weights);
        fill(&mut params.stem.bias);
        fill(&mut params.block1.bn.gamma);
        fill(&mut params.block1.bn.beta);
        fill(&mut params.block1.bn.running_mean);
        fill(&mut params.block1.bn.running_var);
        fill(&mut params.block1.conv.weights);
        fill(&mut params.block1.conv.bias);
        fill(&mut params.down.weights);
        fill(&mut params.down.bias);
        fill(&mut params.block2.bn.gamma);
        fill(&mut params.block2.bn.beta);
        fill(&mut params.block2.bn.running_mean);
        fill(&mut params.block2.bn.running_var);
        fill(&mut params.block2.conv.weights);
        fill(&mut params.block2.conv.bias);
        fill(&mut params.head_bn.gamma);
        fill(&mut params.head_bn.beta);
        fill(&mut params.head_bn.running_mean);
        fill(&mut params.head_bn.running_var);
        fill(&mut params.head_w);
        let mut last = [0.0];
        fill(&mut last);
        params.head_b = last[0];
    }
    for bn in [&params.block1.bn, &params.block2.bn, &params.head_bn] {
        if bn.running_var.iter().any(|&v| !(v > 0.0)) {
            return Err(err("running variance must be positive".into()));
        }
    }
    Ok((
        params,
        CheckpointMeta {
            epoch: header.epoch,
            val_auc: header.val_auc,
        },
    ))
}

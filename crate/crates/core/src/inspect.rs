//! Deterministic per-record artifact dumps: attention heads, the segment
//! mask, the latent adjacency, root probabilities, stream weights, and the
//! supervision layers. CSV is the canonical form; PGM heatmaps are a
//! convenience rendering of the same values.

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{Model, RecordInputs};
use crate::params::ParamStore;
use std::path::{Path, PathBuf};

/// Pixels per matrix cell in rendered heatmaps.
const CELL: usize = 16;

fn sanitize(token: &str) -> String {
    token.replace([',', '\n', '\r'], "_")
}

fn write_csv(path: &Path, header: &[String], m: &Matrix) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for i in 0..m.rows() {
        let row: Vec<String> = (0..m.cols()).map(|j| format!("{:.6}", m.get(i, j))).collect();
        text.push_str(&row.join(","));
        text.push('\n');
    }
    std::fs::write(path, text)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

/// Binary PGM, one gray square per cell, brighter = larger, values clamped
/// to [0, 1].
fn write_pgm(path: &Path, m: &Matrix) -> Result<()> {
    let (h, w) = (m.rows() * CELL, m.cols() * CELL);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    for i in 0..m.rows() {
        let mut row = Vec::with_capacity(w);
        for j in 0..m.cols() {
            let v = m.get(i, j).clamp(0.0, 1.0);
            row.extend(std::iter::repeat((v * 255.0).round() as u8).take(CELL));
        }
        for _ in 0..CELL {
            bytes.extend_from_slice(&row);
        }
    }
    std::fs::write(path, bytes)
        .map_err(|e| Error::invalid(format!("cannot write {}: {e}", path.display())))
}

/// Runs one forward pass and writes every diagnostic artifact for the
/// record, returning the created paths in a fixed order.
pub fn dump_record(
    model: &Model,
    store: &mut ParamStore,
    inputs: &RecordInputs,
    record_id: usize,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| Error::invalid(format!("cannot create {}: {e}", out_dir.display())))?;
    let g = Graph::new();
    let fwd = model.forward(&g, store, inputs)?;
    let tokens: Vec<String> = inputs.tokens.iter().map(|t| sanitize(t)).collect();
    let mut files = Vec::new();
    let mut emit = |name: String, header: &[String], m: &Matrix, image: bool| -> Result<()> {
        let csv = out_dir.join(format!("record{record_id}_{name}.csv"));
        write_csv(&csv, header, m)?;
        files.push(csv);
        if image {
            let pgm = out_dir.join(format!("record{record_id}_{name}.pgm"));
            write_pgm(&pgm, m)?;
            files.push(pgm);
        }
        Ok(())
    };

    if let Some(att) = &fwd.diag.seg_attention {
        for (h, head) in att.heads.iter().enumerate() {
            emit(format!("ases_head{h}"), &tokens, &head.value(), true)?;
        }
    }
    if let Some(ms) = fwd.diag.m_s {
        emit("ms".to_string(), &tokens, &ms.value(), true)?;
    }
    if let Some(asyl) = fwd.diag.a_syl {
        emit("asyl".to_string(), &tokens, &asyl.value(), true)?;
    }
    if let Some(rp) = fwd.diag.root_probs {
        emit("rootprobs".to_string(), &tokens, &rp.value().transpose(), false)?;
    }
    if let Some(al) = fwd.diag.alphas {
        let header = ["sem", "syn", "com"].map(String::from).to_vec();
        emit("alpha".to_string(), &header, &al.value(), false)?;
    }
    for (k, layer) in inputs.signal.layers.iter().enumerate() {
        emit(format!("yseg_layer{}", k + 1), &tokens, layer, true)?;
    }
    Ok(files)
}

//! On-disk formats for predictions and evaluation.
//!
//! Masks travel as binary PGM (P5, maxval 255, pixels strictly 0 or 255);
//! per-expression confidences live in a `scores.json` sidecar next to the
//! mask directories. [`evaluate_dirs`] pairs a prediction tree with a
//! ground-truth tree and reduces them to region/boundary quality plus
//! average precision.
//!
//! Layout, relative to a root directory:
//!
//! ```text
//! masks/expr_000/frame_000.pgm
//! masks/expr_000/frame_001.pgm
//! masks/expr_001/...
//! masks/scores.json        # {"expr_000": 0.93, ...}
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{self, Mask, SequenceEval};

/// Writes a mask as a binary (P5) PGM with foreground 255, background 0.
pub fn write_mask_pgm(path: &Path, mask: &Mask) -> Result<()> {
    let mut bytes = format!("P5\n{} {}\n255\n", mask.w(), mask.h()).into_bytes();
    bytes.extend(mask.data().iter().map(|&fg| if fg { 255u8 } else { 0u8 }));
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads a binary PGM written by [`write_mask_pgm`]. Header comments are
/// accepted; any pixel value other than 0 or 255 is a format error, so a
/// grayscale image cannot silently pass as a mask.
pub fn read_mask_pgm(path: &Path) -> Result<Mask> {
    let bytes = fs::read(path)?;
    let err = |msg: &str| Error::Format(format!("{}: {msg}", path.display()));
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(err("not a binary PGM (missing P5 magic)"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // Skip whitespace and `#` comments between header fields.
        loop {
            match bytes.get(pos) {
                Some(b' ' | b'\t' | b'\r' | b'\n') => pos += 1,
                Some(b'#') => {
                    while !matches!(bytes.get(pos), None | Some(b'\n')) {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(err("truncated header")),
            }
        }
        let start = pos;
        while matches!(bytes.get(pos), Some(c) if c.is_ascii_digit()) {
            pos += 1;
        }
        if pos == start {
            return Err(err("expected an integer header field"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).expect("digits are ascii");
        *field = text.parse().map_err(|_| err("header field out of range"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err("maxval must be 255"));
    }
    match bytes.get(pos) {
        Some(b' ' | b'\t' | b'\r' | b'\n') => pos += 1,
        _ => return Err(err("expected single whitespace after header")),
    }
    let pixels = &bytes[pos..];
    if pixels.len() != w * h {
        return Err(err("pixel payload does not match dimensions"));
    }
    let mut data = Vec::with_capacity(w * h);
    for &p in pixels {
        match p {
            0 => data.push(false),
            255 => data.push(true),
            _ => return Err(err("mask pixels must be 0 or 255")),
        }
    }
    Mask::new(h, w, data)
}

/// Writes the per-expression confidence sidecar.
pub fn write_scores(dir: &Path, scores: &BTreeMap<String, f64>) -> Result<()> {
    let file = fs::File::create(dir.join("scores.json"))?;
    serde_json::to_writer_pretty(file, scores)?;
    Ok(())
}

pub fn read_scores(dir: &Path) -> Result<BTreeMap<String, f64>> {
    let text = fs::read_to_string(dir.join("scores.json"))?;
    Ok(serde_json::from_str(&text)?)
}

/// Sorted `expr_*` subdirectories of a mask tree.
fn expression_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let is_expr = path.is_dir()
            && path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("expr_"));
        if is_expr {
            dirs.push(path);
        }
    }
    dirs.sort();
    Ok(dirs)
}

/// Sorted `*.pgm` files within one expression directory.
fn frame_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .collect::<std::result::Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
        .collect();
    files.sort();
    Ok(files)
}

/// Evaluation summary over every (expression, frame) pair of a run.
///
/// Serialized key names are part of the report contract.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    #[serde(rename = "J")]
    pub j: f64,
    #[serde(rename = "F")]
    pub f: f64,
    #[serde(rename = "JF")]
    pub jf: f64,
    pub overall_iou: f64,
    pub mean_iou: f64,
    #[serde(rename = "mAP")]
    pub map: f64,
}

impl EvalReport {
    fn new(seq: SequenceEval, map: f64) -> Self {
        EvalReport {
            j: seq.j,
            f: seq.f,
            jf: seq.jf,
            overall_iou: seq.overall_iou,
            mean_iou: seq.mean_iou,
            map,
        }
    }
}

/// Scores a prediction tree against a ground-truth tree.
///
/// Expressions are matched by directory name and frames by sorted order;
/// a missing expression or a frame-count mismatch is an error rather than
/// a silent zero. Average precision treats each expression as one
/// detection whose IoU is pooled over its frames and whose confidence
/// comes from the predictions' `scores.json`.
pub fn evaluate_dirs(pred_root: &Path, gt_root: &Path) -> Result<EvalReport> {
    let gt_dirs = expression_dirs(gt_root)?;
    if gt_dirs.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let scores = read_scores(pred_root)?;
    let mut pairs = Vec::new();
    let mut detections = Vec::new();
    for gt_dir in &gt_dirs {
        let name = gt_dir
            .file_name()
            .and_then(|n| n.to_str())
            .expect("expression dirs have utf-8 names")
            .to_string();
        let pred_dir = pred_root.join(&name);
        if !pred_dir.is_dir() {
            return Err(Error::Format(format!(
                "prediction for {name} missing under {}",
                pred_root.display()
            )));
        }
        let gt_frames = frame_files(gt_dir)?;
        let pred_frames = frame_files(&pred_dir)?;
        if gt_frames.len() != pred_frames.len() || gt_frames.is_empty() {
            return Err(Error::Format(format!(
                "{name}: {} predicted frames vs {} ground-truth frames",
                pred_frames.len(),
                gt_frames.len()
            )));
        }
        let score = *scores.get(&name).ok_or_else(|| {
            Error::Format(format!("scores.json has no entry for {name}"))
        })?;
        let mut inter = 0usize;
        let mut union = 0usize;
        for (p, g) in pred_frames.iter().zip(&gt_frames) {
            let pred = read_mask_pgm(p)?;
            let gt = read_mask_pgm(g)?;
            if pred.h() != gt.h() || pred.w() != gt.w() {
                return Err(Error::Format(format!(
                    "{name}: prediction {}x{} vs ground truth {}x{}",
                    pred.h(),
                    pred.w(),
                    gt.h(),
                    gt.w()
                )));
            }
            for (a, b) in pred.data().iter().zip(gt.data()) {
                inter += usize::from(*a && *b);
                union += usize::from(*a || *b);
            }
            pairs.push((pred, gt));
        }
        let iou = if union == 0 { 1.0 } else { inter as f64 / union as f64 };
        detections.push((score, iou));
    }
    let seq = metrics::evaluate_pairs(&pairs)?;
    let map = metrics::map_at_thresholds(&detections, gt_dirs.len())?;
    Ok(EvalReport::new(seq, map))
}

pub fn write_report(path: &Path, report: &EvalReport) -> Result<()> {
    let file = fs::File::create(path)?;
    serde_json::to_writer_pretty(file, report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn checker(h: usize, w: usize, phase: usize) -> Mask {
        let data = (0..h * w).map(|i| (i + phase) % 2 == 0).collect();
        Mask::new(h, w, data).unwrap()
    }

    #[test]
    fn pgm_round_trip_is_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = checker(5, 7, 1);
        write_mask_pgm(&path, &mask).unwrap();
        let back = read_mask_pgm(&path).unwrap();
        assert_eq!(back.h(), 5);
        assert_eq!(back.w(), 7);
        assert_eq!(back.data(), mask.data());
    }

    #[test]
    fn pgm_reader_accepts_comments_and_rejects_gray() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        fs::write(&path, b"P5\n# test image\n2 2\n255\n\x00\xff\xff\x00").unwrap();
        let mask = read_mask_pgm(&path).unwrap();
        assert_eq!(mask.data(), &[false, true, true, false]);

        fs::write(&path, b"P5\n2 2\n255\n\x00\x80\xff\x00").unwrap();
        assert!(matches!(read_mask_pgm(&path), Err(Error::Format(_))));
        fs::write(&path, b"P5\n2 2\n15\n\x00\x01\x02\x00").unwrap();
        assert!(matches!(read_mask_pgm(&path), Err(Error::Format(_))));
        fs::write(&path, b"P2\n2 2\n255\n0 255 255 0").unwrap();
        assert!(matches!(read_mask_pgm(&path), Err(Error::Format(_))));
    }

    fn write_expr(root: &Path, name: &str, frames: &[Mask]) {
        let dir = root.join(name);
        fs::create_dir_all(&dir).unwrap();
        for (i, m) in frames.iter().enumerate() {
            write_mask_pgm(&dir.join(format!("frame_{i:03}.pgm")), m).unwrap();
        }
    }

    #[test]
    fn directory_evaluation_scores_perfect_predictions_at_one() {
        let dir = tempdir().unwrap();
        let pred = dir.path().join("pred");
        let gt = dir.path().join("gt");
        fs::create_dir_all(&pred).unwrap();
        fs::create_dir_all(&gt).unwrap();
        let frames = [checker(8, 8, 0), checker(8, 8, 1)];
        write_expr(&pred, "expr_000", &frames);
        write_expr(&gt, "expr_000", &frames);
        let mut scores = BTreeMap::new();
        scores.insert("expr_000".to_string(), 0.9);
        write_scores(&pred, &scores).unwrap();

        let report = evaluate_dirs(&pred, &gt).unwrap();
        assert_eq!(report.j, 1.0);
        assert_eq!(report.f, 1.0);
        assert_eq!(report.jf, 1.0);
        assert_eq!(report.map, 1.0);
    }

    #[test]
    fn directory_evaluation_rejects_mismatched_trees() {
        let dir = tempdir().unwrap();
        let pred = dir.path().join("pred");
        let gt = dir.path().join("gt");
        fs::create_dir_all(&pred).unwrap();
        fs::create_dir_all(&gt).unwrap();
        write_expr(&gt, "expr_000", &[checker(4, 4, 0)]);
        // Prediction tree lacks expr_000 entirely.
        fs::create_dir_all(pred.join("expr_001")).unwrap();
        write_scores(&pred, &BTreeMap::new()).unwrap();
        assert!(matches!(evaluate_dirs(&pred, &gt), Err(Error::Format(_))));

        // Now present but with a different frame count.
        write_expr(&pred, "expr_000", &[checker(4, 4, 0), checker(4, 4, 0)]);
        let mut scores = BTreeMap::new();
        scores.insert("expr_000".to_string(), 0.5);
        write_scores(&pred, &scores).unwrap();
        assert!(matches!(evaluate_dirs(&pred, &gt), Err(Error::Format(_))));
    }

    #[test]
    fn report_serializes_with_contract_keys() {
        let report = EvalReport {
            j: 0.5,
            f: 0.25,
            jf: 0.375,
            overall_iou: 0.5,
            mean_iou: 0.5,
            map: 0.1,
        };
        let text = serde_json::to_string(&report).unwrap();
        for key in ["\"J\"", "\"F\"", "\"JF\"", "\"overall_iou\"", "\"mean_iou\"", "\"mAP\""] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
        let back: EvalReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.jf, 0.375);
    }
}

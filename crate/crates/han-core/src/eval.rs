//! Quantitative metrics (RMSE on the 0-255 scale, average pixel disagreement
//! ratio) and artifact emitters: comparison grids and curve CSVs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::data::{GlyphPair, EXTENT};
use crate::model::HanModel;
use crate::tensor::{BatchNormMode, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("image sets differ: {0} generated vs {1} targets")]
    CountMismatch(usize, usize),
    #[error("image {index}: {got} values, expected {want}")]
    SizeMismatch { index: usize, got: usize, want: usize },
    #[error("metrics need at least one image pair")]
    EmptySet,
    #[error("grid rows must have equal length")]
    RaggedRows,
    #[error("curve x values must be strictly increasing at point {0}")]
    NonIncreasingX(usize),
    #[error("curve needs at least one point")]
    EmptyCurve,
    #[error("i/o error on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Root-mean-square error of one image pair on the 0-255 pixel scale.
pub fn rmse_pair(generated: &[f64], target: &[f64]) -> f64 {
    debug_assert_eq!(generated.len(), target.len());
    let n = generated.len() as f64;
    let sum: f64 = generated
        .iter()
        .zip(target)
        .map(|(g, t)| {
            let d = 255.0 * (g - t);
            d * d
        })
        .sum();
    (sum / n).sqrt()
}

/// Fraction of pixels whose binarized values (threshold 0.5) disagree.
pub fn apdr_pair(generated: &[f64], target: &[f64], threshold: f64) -> f64 {
    debug_assert_eq!(generated.len(), target.len());
    let disagree = generated
        .iter()
        .zip(target)
        .filter(|(g, t)| (**g >= threshold) != (**t >= threshold))
        .count();
    disagree as f64 / generated.len() as f64
}

#[derive(Debug, Clone)]
pub struct MetricReport {
    pub rmse: f64,
    pub apdr: f64,
    pub per_image: Vec<(f64, f64)>, // (rmse, apdr) per pair, input order
}

/// Per-image metrics averaged over the set.
pub fn evaluate(images: &[(Vec<f64>, Vec<f64>)]) -> Result<MetricReport, EvalError> {
    if images.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let mut per_image = Vec::with_capacity(images.len());
    for (i, (g, t)) in images.iter().enumerate() {
        if g.len() != t.len() {
            return Err(EvalError::SizeMismatch { index: i, got: g.len(), want: t.len() });
        }
        per_image.push((rmse_pair(g, t), apdr_pair(g, t, 0.5)));
    }
    let n = per_image.len() as f64;
    Ok(MetricReport {
        rmse: per_image.iter().map(|(r, _)| r).sum::<f64>() / n,
        apdr: per_image.iter().map(|(_, a)| a).sum::<f64>() / n,
        per_image,
    })
}

/// Eval-mode T3 for every pair, in chunks to bound memory; returns per-pair
/// (generated, target) value vectors in corpus order.
pub fn generate_outputs(
    model: &HanModel,
    pairs: &[GlyphPair],
    chunk: usize,
    mask_inputs: Option<&dyn Fn(usize, &GlyphPair) -> Vec<f64>>,
) -> Result<Vec<(Vec<f64>, Vec<f64>)>, EvalError> {
    let area = EXTENT * EXTENT;
    let mut out = Vec::with_capacity(pairs.len());
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < pairs.len() {
        let end = (start + chunk).min(pairs.len());
        let n = end - start;
        let mut src = Vec::with_capacity(n * area);
        for (offset, p) in pairs[start..end].iter().enumerate() {
            match mask_inputs {
                Some(f) => src.extend_from_slice(&f(start + offset, p)),
                None => src.extend_from_slice(&p.source.pixels.data()),
            }
        }
        let batch = Tensor::constant(&[n, 1, EXTENT, EXTENT], src).expect("sized");
        let t3 = model.transfer_forward(&batch, BatchNormMode::Eval)?.t3;
        let values = t3.to_vec();
        for (i, p) in pairs[start..end].iter().enumerate() {
            out.push((values[i * area..(i + 1) * area].to_vec(), p.target.pixels.to_vec()));
        }
        start = end;
    }
    Ok(out)
}

/// Mean train/test RMSE of a model over a pair set.
pub fn model_rmse(model: &HanModel, pairs: &[GlyphPair], chunk: usize) -> Result<f64, EvalError> {
    let outputs = generate_outputs(model, pairs, chunk, None)?;
    Ok(evaluate(&outputs)?.rmse)
}

const SEPARATOR: u8 = 128;
const GAP: usize = 2;

/// Compose labeled image rows into one PNG with 2-pixel separators; labels go
/// to a sidecar `.txt` next to the image, one row label per line.
pub fn emit_grid(rows: &[(String, Vec<Vec<f64>>)], path: &Path) -> Result<(), EvalError> {
    if rows.is_empty() || rows[0].1.is_empty() {
        return Err(EvalError::EmptySet);
    }
    let cols = rows[0].1.len();
    if rows.iter().any(|(_, r)| r.len() != cols) {
        return Err(EvalError::RaggedRows);
    }
    let area = EXTENT * EXTENT;
    for (_, row) in rows {
        for img in row {
            if img.len() != area {
                return Err(EvalError::SizeMismatch { index: 0, got: img.len(), want: area });
            }
        }
    }
    let height = rows.len() * EXTENT + (rows.len() - 1) * GAP;
    let width = cols * EXTENT + (cols - 1) * GAP;
    let mut canvas = vec![SEPARATOR; height * width];
    for (ri, (_, row)) in rows.iter().enumerate() {
        for (ci, img) in row.iter().enumerate() {
            let oy = ri * (EXTENT + GAP);
            let ox = ci * (EXTENT + GAP);
            for y in 0..EXTENT {
                for x in 0..EXTENT {
                    canvas[(oy + y) * width + ox + x] =
                        (img[y * EXTENT + x].clamp(0.0, 1.0) * 255.0).round() as u8;
                }
            }
        }
    }
    let buf = image::GrayImage::from_raw(width as u32, height as u32, canvas).expect("sized");
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| EvalError::Io { path: path.into(), source: e })?;
        }
    }
    buf.save(path)
        .map_err(|e| EvalError::Io { path: path.into(), source: io::Error::other(e) })?;
    let labels: String = rows.iter().map(|(l, _)| format!("{l}\n")).collect();
    let sidecar = path.with_extension("txt");
    fs::write(&sidecar, labels).map_err(|e| EvalError::Io { path: sidecar, source: e })?;
    Ok(())
}

/// Two-column CSV for one named series; x must be strictly increasing.
pub fn curve_export(
    x_label: &str,
    y_label: &str,
    points: &[(f64, f64)],
    path: &Path,
) -> Result<(), EvalError> {
    if points.is_empty() {
        return Err(EvalError::EmptyCurve);
    }
    for i in 1..points.len() {
        if points[i].0 <= points[i - 1].0 {
            return Err(EvalError::NonIncreasingX(i));
        }
    }
    let mut text = format!("{x_label},{y_label}\n");
    for (x, y) in points {
        text.push_str(&format!("{x},{y}\n"));
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| EvalError::Io { path: path.into(), source: e })?;
        }
    }
    fs::write(path, text).map_err(|e| EvalError::Io { path: path.into(), source: e })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rmse_fixed_cases() {
        let a = vec![0.3, 0.7, 0.1, 0.9];
        assert_eq!(rmse_pair(&a, &a), 0.0);
        assert_eq!(rmse_pair(&[1.0; 4], &[0.0; 4]), 255.0);
        // one pixel of four at full range: sqrt(255^2 / 4) = 127.5
        let g = vec![1.0, 0.0, 0.0, 0.0];
        let t = vec![0.0; 4];
        assert_eq!(rmse_pair(&g, &t), 127.5);
    }

    #[test]
    fn apdr_fixed_cases() {
        let a = vec![0.9, 0.1, 0.8, 0.2];
        assert_eq!(apdr_pair(&a, &a, 0.5), 0.0);
        let complement: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        assert_eq!(apdr_pair(&a, &complement, 0.5), 1.0);
        let one_off = vec![0.9, 0.1, 0.8, 0.6];
        assert_eq!(apdr_pair(&a, &one_off, 0.5), 0.25);
    }

    #[test]
    fn matches_naive_double_loop_on_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..100 {
            let g: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            let t: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
            // naive double loops over an 8x8 image
            let mut acc = 0.0;
            let mut disagree = 0usize;
            for y in 0..8 {
                for x in 0..8 {
                    let gv = g[y * 8 + x];
                    let tv = t[y * 8 + x];
                    acc += (255.0 * (gv - tv)).powi(2);
                    if (gv >= 0.5) != (tv >= 0.5) {
                        disagree += 1;
                    }
                }
            }
            assert!((rmse_pair(&g, &t) - (acc / 64.0).sqrt()).abs() < 1e-9);
            assert!((apdr_pair(&g, &t, 0.5) - disagree as f64 / 64.0).abs() < 1e-9);
            // symmetry
            assert!((rmse_pair(&g, &t) - rmse_pair(&t, &g)).abs() < 1e-12);
            assert!((apdr_pair(&g, &t, 0.5) - apdr_pair(&t, &g, 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn report_aggregates_are_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let images: Vec<(Vec<f64>, Vec<f64>)> = (0..7)
            .map(|_| {
                (
                    (0..16).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    (0..16).map(|_| rng.gen_range(0.0..1.0)).collect(),
                )
            })
            .collect();
        let rep = evaluate(&images).unwrap();
        let mean_rmse: f64 =
            rep.per_image.iter().map(|(r, _)| r).sum::<f64>() / rep.per_image.len() as f64;
        assert!((rep.rmse - mean_rmse).abs() < 1e-9);
        assert!(rep.apdr >= 0.0 && rep.apdr <= 1.0);
        assert!(rep.rmse >= 0.0 && rep.rmse <= 255.0);
        // permutation invariance of the aggregate
        let mut shuffled = images.clone();
        shuffled.reverse();
        let rep2 = evaluate(&shuffled).unwrap();
        assert!((rep.rmse - rep2.rmse).abs() < 1e-12);
        assert!((rep.apdr - rep2.apdr).abs() < 1e-12);
    }

    #[test]
    fn empty_and_mismatched_sets_error() {
        assert!(matches!(evaluate(&[]), Err(EvalError::EmptySet)));
        let bad = vec![(vec![0.0; 4], vec![0.0; 5])];
        assert!(matches!(evaluate(&bad), Err(EvalError::SizeMismatch { .. })));
    }

    #[test]
    fn grid_geometry_and_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.png");
        let area = EXTENT * EXTENT;
        let mk = |v: f64| vec![v; area];
        let rows = vec![
            ("source".to_string(), vec![mk(0.0), mk(0.25), mk(0.5), mk(0.75), mk(1.0)]),
            ("generated".to_string(), vec![mk(1.0), mk(0.75), mk(0.5), mk(0.25), mk(0.0)]),
            ("target".to_string(), vec![mk(0.1), mk(0.2), mk(0.3), mk(0.4), mk(0.9)]),
        ];
        emit_grid(&rows, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!(img.height() as usize, 3 * EXTENT + 2 * GAP);
        assert_eq!(img.width() as usize, 5 * EXTENT + 4 * GAP);
        // tile (1, 2) should reproduce its pixels exactly
        let oy = EXTENT + GAP;
        let ox = 2 * (EXTENT + GAP);
        for y in 0..EXTENT {
            for x in 0..EXTENT {
                assert_eq!(img.get_pixel((ox + x) as u32, (oy + y) as u32)[0], 128);
            }
        }
        let labels = std::fs::read_to_string(path.with_extension("txt")).unwrap();
        assert_eq!(labels, "source\ngenerated\ntarget\n");
    }

    #[test]
    fn single_tile_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.png");
        let rows = vec![("x".to_string(), vec![vec![0.5; EXTENT * EXTENT]])];
        emit_grid(&rows, &path).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        assert_eq!((img.width(), img.height()), (EXTENT as u32, EXTENT as u32));
    }

    #[test]
    fn curve_export_roundtrip_and_ordering() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let pts = vec![(0.0, 1.25), (50.0, 0.5), (100.0, 0.333333333)];
        curve_export("iteration", "rmse", &pts, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "iteration,rmse");
        for (line, (x, y)) in lines.zip(&pts) {
            let mut parts = line.split(',');
            let px: f64 = parts.next().unwrap().parse().unwrap();
            let py: f64 = parts.next().unwrap().parse().unwrap();
            assert!((px - x).abs() < 1e-9 && (py - y).abs() < 1e-9);
        }
        let single = vec![(1.0, 2.0)];
        curve_export("x", "y", &single, &dir.path().join("single.csv")).unwrap();
        let bad = vec![(0.0, 1.0), (0.0, 2.0)];
        assert!(matches!(
            curve_export("x", "y", &bad, &dir.path().join("bad.csv")),
            Err(EvalError::NonIncreasingX(1))
        ));
    }
}

//! Learned-mask inspection: patch-level heatmaps and value histograms.

use std::io::Write;
use std::path::Path;

use crate::attention::AttentionTrace;
use crate::datapipe::TokenLayout;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::rng::SeededRng;
use crate::tensor::{Tape, Tensor, Var};

pub const HISTOGRAM_BINS: usize = 101;

/// `P × P` grid whose `(i, j)` entry is the mean of `|M|` over the
/// `C × C` block linking patch `i` to patch `j`.
pub fn heatmap_grid(mask: &[f64], layout: &TokenLayout) -> Result<Vec<f64>> {
    let (p, c, n) = (layout.patches, layout.channels, layout.tokens());
    if mask.len() != n * n {
        return Err(Error::invalid(
            "heatmap_grid",
            format!("mask has {} entries, expected {n}²", mask.len()),
        ));
    }
    let mut grid = vec![0.0; p * p];
    for (r, row) in mask.chunks(n).enumerate() {
        let pi = r / c;
        for (col, v) in row.iter().enumerate() {
            grid[pi * p + col / c] += v.abs();
        }
    }
    let denom = (c * c) as f64;
    grid.iter_mut().for_each(|g| *g /= denom);
    Ok(grid)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Fixed-width histogram over `[−m, m]`, `m = max |v|`. The last bin is
/// closed on the right. All-zero input puts everything in the centre bin.
pub fn symmetric_histogram(values: &[f64], bins: usize) -> Result<Vec<Bin>> {
    if bins == 0 {
        return Err(Error::invalid("histogram", "need at least one bin"));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            op: "histogram",
            index: i,
            msg: "non-finite value".into(),
        });
    }
    let m = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let width = 2.0 * m / bins as f64;
    let mut out: Vec<Bin> = (0..bins)
        .map(|i| Bin {
            lo: -m + i as f64 * width,
            hi: -m + (i + 1) as f64 * width,
            count: 0,
        })
        .collect();
    for v in values {
        let i = if m == 0.0 {
            bins / 2
        } else {
            (((v + m) / width).floor() as usize).min(bins - 1)
        };
        out[i].count += 1;
    }
    Ok(out)
}

pub fn write_histogram_csv(path: &Path, bins: &[Bin]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    w.write_record(["lo", "hi", "count"]).map_err(err)?;
    for b in bins {
        w.write_record([b.lo.to_string(), b.hi.to_string(), b.count.to_string()])
            .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Plain (ASCII) PGM, linearly scaled so the largest entry is white.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::invalid("write_pgm", "size mismatch"));
    }
    let max = data.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(f, "P2\n{cols} {rows}\n255").map_err(io)?;
    for row in data.chunks(cols) {
        let px: Vec<String> = row
            .iter()
            .map(|v| {
                let g = if max > 0.0 { (v.abs() / max * 255.0).round() } else { 0.0 };
                (g as u8).to_string()
            })
            .collect();
        writeln!(f, "{}", px.join(" ")).map_err(io)?;
    }
    f.flush().map_err(io)
}

#[derive(Clone, Debug)]
pub struct MaskReport {
    pub layer: usize,
    pub head: usize,
    pub patches: usize,
    pub grid: Vec<f64>,
    pub mask_histogram: Vec<Bin>,
    /// Histogram of activated attention weights, when an input was given.
    pub weight_histogram: Option<Vec<Bin>>,
}

/// Heatmap and histograms for the mask of `(layer, head)`. With `input`
/// (`(B, L, C)`) the activated weights of the first sample are binned too.
pub fn mask_report(model: &Model, layer: usize, head: usize, input: Option<&Tensor>) -> Result<MaskReport> {
    let cfg = &model.config;
    if !cfg.mode.has_mask() || cfg.mode.is_decop() {
        return Err(Error::invalid(
            "mask_report",
            format!("mask not applicable to attention mode {}", cfg.mode),
        ));
    }
    if layer >= cfg.e_layers || head >= cfg.n_heads {
        return Err(Error::invalid(
            "mask_report",
            format!("layer {layer} head {head} out of range ({} layers, {} heads)", cfg.e_layers, cfg.n_heads),
        ));
    }
    let layout = cfg.layout()?;
    let n = layout.tokens();
    let mask = &model
        .params
        .get(&format!("layer{layer}.attn.mask"))
        .ok_or_else(|| Error::Checkpoint(format!("layer{layer}.attn.mask missing")))?
        .tensor;
    let m = &mask.data()[head * n * n..(head + 1) * n * n];
    let weight_histogram = match input {
        None => None,
        Some(x) => {
            let mut tape = Tape::new();
            let vars: Vec<Var> = model.params.iter().map(|p| tape.constant(p.tensor.clone())).collect();
            let mut trace = AttentionTrace::new();
            let mut rng = SeededRng::new(0);
            model.forward(&mut tape, &vars, x, None, false, &mut rng, Some(&mut trace))?;
            let w = trace
                .find(layer, head, "weights")
                .ok_or_else(|| Error::invalid("mask_report", "no weights traced"))?;
            Some(symmetric_histogram(&w.data, HISTOGRAM_BINS)?)
        }
    };
    Ok(MaskReport {
        layer,
        head,
        patches: layout.patches,
        grid: heatmap_grid(m, &layout)?,
        mask_histogram: symmetric_histogram(m, HISTOGRAM_BINS)?,
        weight_histogram,
    })
}

impl MaskReport {
    /// `heatmap.csv`, `heatmap.pgm`, `mask_hist.csv` and, when present,
    /// `weight_hist.csv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = self.patches;
        crate::attention::write_matrix_csv(&dir.join("heatmap.csv"), p, p, &self.grid)?;
        write_pgm(&dir.join("heatmap.pgm"), p, p, &self.grid)?;
        write_histogram_csv(&dir.join("mask_hist.csv"), &self.mask_histogram)?;
        if let Some(h) = &self.weight_histogram {
            write_histogram_csv(&dir.join("weight_hist.csv"), h)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;
    use crate::model::tests::toy_config;

    #[test]
    fn grid_shape_for_84_tokens() {
        let layout = TokenLayout::new(12, 7);
        let mask: Vec<f64> = (0..84 * 84).map(|i| (i as f64 * 0.37).sin()).collect();
        let g = heatmap_grid(&mask, &layout).unwrap();
        assert_eq!(g.len(), 144);
        let mut top_left = 0.0;
        for r in 0..7 {
            for c in 0..7 {
                top_left += mask[r * 84 + c].abs();
            }
        }
        assert!((g[0] - top_left / 49.0).abs() < 1e-12);
    }

    #[test]
    fn ones_give_uniform_grid() {
        let layout = TokenLayout::new(3, 2);
        let g = heatmap_grid(&[-1.0; 36], &layout).unwrap();
        assert!(g.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn histogram_covers_all_values() {
        let v = [-2.0, -1.0, 0.0, 0.5, 2.0];
        let h = symmetric_histogram(&v, HISTOGRAM_BINS).unwrap();
        assert_eq!(h.len(), 101);
        assert_eq!(h.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(h[0].count, 1);
        assert_eq!(h[100].count, 1);
        assert_eq!(h[50].count, 1);
        assert_eq!(h[0].lo, -2.0);
        let z = symmetric_histogram(&[0.0; 4], 101).unwrap();
        assert_eq!(z[50].count, 4);
    }

    #[test]
    fn report_rejects_decop_and_unmasked_modes() {
        for mode in [AttentionMode::CrabDecop, AttentionMode::CrabNoMask, AttentionMode::Vanilla] {
            let m = Model::new(toy_config(mode), 1).unwrap();
            let e = mask_report(&m, 0, 0, None).unwrap_err();
            assert!(e.to_string().contains("mask not applicable"), "{e}");
        }
    }

    #[test]
    fn report_with_input_bins_weights() {
        let cfg = toy_config(AttentionMode::Crab);
        let m = Model::new(cfg.clone(), 1).unwrap();
        let x = Tensor::from_fn(&[1, cfg.seq_len, cfg.channels], |i| (i as f64).cos());
        let r = mask_report(&m, 1, 1, Some(&x)).unwrap();
        assert_eq!(r.grid.len(), 16);
        let n = cfg.tokens().unwrap();
        let w = r.weight_histogram.unwrap();
        assert_eq!(w.iter().map(|b| b.count).sum::<usize>(), n * n);
        let dir = tempfile::tempdir().unwrap();
        mask_report(&m, 0, 0, None).unwrap().write(dir.path()).unwrap();
        let pgm = std::fs::read_to_string(dir.path().join("heatmap.pgm")).unwrap();
        assert!(pgm.starts_with("P2\n4 4\n255\n"));
    }
}

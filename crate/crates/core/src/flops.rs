//! Closed-form FLOPs for a split matmul and for cross attention under
//! one-shot user computation. A FLOP here is half a multiply-add.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A concat→matmul site: `B` rows, `D_u + D_i + D_c` input columns, `d`
/// output columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MatmulDims {
    pub b: usize,
    pub du: usize,
    pub di: usize,
    pub dc: usize,
    pub d: usize,
}

impl MatmulDims {
    pub fn total(&self) -> usize {
        self.du + self.di + self.dc
    }
}

/// Cross attention of `B` item queries over an `L`-step user sequence, all
/// projections `d × d`, one query per item.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttnDims {
    pub b: usize,
    pub l: usize,
    pub d: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlopsReport {
    pub flops_baseline: u64,
    pub flops_optimized: u64,
    /// `flops_baseline / flops_optimized`.
    pub speedup: f64,
    pub absolute_saving: u64,
    /// Fraction of the work saved as `B → ∞`.
    pub asymptotic_ratio: f64,
}

impl FlopsReport {
    fn new(baseline: u64, optimized: u64, asymptotic_ratio: f64) -> Self {
        FlopsReport {
            flops_baseline: baseline,
            flops_optimized: optimized,
            speedup: baseline as f64 / optimized as f64,
            absolute_saving: baseline - optimized,
            asymptotic_ratio,
        }
    }
}

/// Vanilla `2·B·D·d` against split `2d[D_u + B(D_i + D_c)]`.
pub fn mari_flops(m: &MatmulDims) -> Result<FlopsReport> {
    if m.b == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    if m.total() == 0 || m.d == 0 {
        return Err(Error::invalid(format!(
            "site {m:?} has no work: need D_u + D_i + D_c >= 1 and d >= 1"
        )));
    }
    let (b, d) = (m.b as u64, m.d as u64);
    let (du, dic) = (m.du as u64, (m.di + m.dc) as u64);
    let baseline = 2 * b * d * (du + dic);
    let optimized = 2 * d * (du + b * dic);
    Ok(FlopsReport::new(
        baseline,
        optimized,
        m.du as f64 / m.total() as f64,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnFlopsReport {
    pub flops: FlopsReport,
    /// `optimized / baseline = (B + 2L) / (B(1 + 2L))`.
    pub ratio: f64,
    /// Ratio as `L → ∞`: `1/B`.
    pub ratio_long_sequence: f64,
    /// Ratio as `B → ∞`: `1/(1 + 2L)`.
    pub ratio_large_batch: f64,
}

/// Projection cost of cross attention: with the sequence replicated per item
/// the query, key and value projections cost `2·B·d²·(1 + 2L)`; computing
/// keys and values once costs `2·d²·(B + 2L)`. The score and weighting
/// products are not projections and are left out of both.
pub fn uoi_attention_flops(a: &AttnDims) -> Result<AttnFlopsReport> {
    if a.b == 0 || a.l == 0 || a.d == 0 {
        return Err(Error::invalid(format!("attention dims {a:?} must all be >= 1")));
    }
    let (b, l, d) = (a.b as u64, a.l as u64, a.d as u64);
    let baseline = 2 * b * d * d * (1 + 2 * l);
    let optimized = 2 * d * d * (b + 2 * l);
    let flops = FlopsReport::new(baseline, optimized, 1.0 - 1.0 / (1 + 2 * l) as f64);
    Ok(AttnFlopsReport {
        flops,
        ratio: (b + 2 * l) as f64 / (b * (1 + 2 * l)) as f64,
        ratio_long_sequence: 1.0 / b as f64,
        ratio_large_batch: 1.0 / (1 + 2 * l) as f64,
    })
}

/// One row of a FLOPs sweep: which parameter varies, its value, the full
/// configuration and the resulting counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: usize,
    pub dims: MatmulDims,
    pub report: FlopsReport,
}

/// The four one-parameter sweeps around `B=2000, D_u=4000, D_i=1000,
/// d=512`.
///
/// The batch sweep uses `D_c = 1000`; the others use `D_c = 0` and, for the
/// item/cross sweep, put the whole varying width in `D_i`.
pub fn table2_grid() -> Vec<(&'static str, usize, MatmulDims)> {
    let mut g = Vec::new();
    for b in [100, 500, 1000, 2000, 5000, 8000, 10000] {
        g.push(("B", b, MatmulDims { b, du: 4000, di: 1000, dc: 1000, d: 512 }));
    }
    for du in [500, 1000, 2000, 5000, 8000, 10000] {
        g.push(("D_user", du, MatmulDims { b: 2000, du, di: 1000, dc: 0, d: 512 }));
    }
    for di in [500, 1000, 2000, 5000, 8000, 10000] {
        g.push(("D_item_cross", di, MatmulDims { b: 2000, du: 4000, di, dc: 0, d: 512 }));
    }
    for d in [128, 512, 1024, 2048] {
        g.push(("D_hidden", d, MatmulDims { b: 2000, du: 4000, di: 1000, dc: 0, d }));
    }
    g
}

pub fn flops_speedup_table(grid: &[(&'static str, usize, MatmulDims)]) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::invalid("empty sweep grid"));
    }
    grid.iter()
        .map(|&(axis, value, dims)| {
            Ok(SweepRow {
                axis,
                value,
                dims,
                report: mari_flops(&dims)?,
            })
        })
        .collect()
}

pub const FLOPS_CSV_HEADER: &str =
    "axis,value,B,D_u,D_i,D_c,d,flops_baseline,flops_optimized,speedup,saving";

pub fn flops_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(FLOPS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let m = &r.dims;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:.4},{}",
            r.axis,
            r.value,
            m.b,
            m.du,
            m.di,
            m.dc,
            m.d,
            r.report.flops_baseline,
            r.report.flops_optimized,
            r.report.speedup,
            r.report.absolute_saving
        )
        .unwrap();
    }
    out
}

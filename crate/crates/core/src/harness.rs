//! Timing harness: vanilla vs split matmul sweeps, the fragmentation
//! experiment, and the end-to-end fixture comparison.
//!
//! Variants of one configuration are timed in interleaved rounds (each round
//! runs every variant once, starting from a rotating position) so slow drift
//! affects all of them alike. Only graph evaluation is timed.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::exec::{check_equivalence, EquivConfig, EquivVerdict, ExecReport, InputBundle, Session, Strategy};
use crate::flops::{mari_flops, table2_grid, FlopsReport, MatmulDims};
use crate::graph::{fixture_ranking_model, matmul_site, Graph, ModelDims, SiteDims};
use crate::rewrite::{fragment_site, rewrite_all, SiteReport};
use crate::tensor::Element;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::F64 => "f64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "f32" => Some(Dtype::F32),
            "f64" => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// `(axis, value, dims)` per configuration.
    pub points: Vec<(&'static str, usize, MatmulDims)>,
    /// Chunk sizes for the fragmentation experiment.
    pub chunks: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub seed: u64,
    pub dtype: Dtype,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            points: table2_grid(),
            chunks: vec![50, 100, 200, 400, 800],
            repeats: 100,
            warmup: 10,
            seed: 42,
            dtype: Dtype::F64,
        }
    }
}

impl BenchConfig {
    /// Only the points of one sweep axis of the default grid.
    pub fn axis(axis: &str) -> Self {
        let mut c = BenchConfig::default();
        c.points.retain(|p| p.0 == axis);
        c
    }

    /// The fragmentation setting: `B=2000, D_u=4000, D_i=1000, d=256`.
    pub fn fragmentation() -> Self {
        BenchConfig {
            points: vec![(
                "chunk",
                0,
                MatmulDims {
                    b: 2000,
                    du: 4000,
                    di: 1000,
                    dc: 0,
                    d: 256,
                },
            )],
            ..BenchConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats < 2 {
            return Err(Error::invalid("repeats must be at least 2 for a standard deviation"));
        }
        if self.chunks.contains(&0) {
            return Err(Error::invalid("chunk sizes must be positive"));
        }
        Ok(())
    }

    fn describe(&self, mode: &str) -> String {
        format!(
            "# mari-bench mode={mode} version={VERSION} dtype={} seed={} repeats={} warmup={}\n",
            self.dtype.name(),
            self.seed,
            self.repeats,
            self.warmup
        )
    }
}

/// Summary of repeated wall-clock samples, in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Timing {
    pub mean_ns: f64,
    /// Sample standard deviation.
    pub std_ns: f64,
    pub median_ns: f64,
    pub samples: usize,
}

impl Timing {
    pub fn from_samples(s: &[u128]) -> Timing {
        let n = s.len();
        let xs: Vec<f64> = s.iter().map(|&x| x as f64).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        Timing {
            mean_ns: mean,
            std_ns: var.sqrt(),
            median_ns: median,
            samples: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub axis: &'static str,
    pub value: usize,
    pub dims: MatmulDims,
    pub theoretical_speedup: f64,
    pub vanilla: Timing,
    pub mari: Timing,
    /// `mean(T_vanilla) / mean(T_mari)`.
    pub measured_speedup: f64,
    /// Relative deviation of the split output from the vanilla output.
    pub max_deviation: f64,
}

pub const BENCH_CSV_HEADER: &str = "axis,value,B,D_u,D_i,D_c,d,theoretical_speedup,t_vanilla_mean_ns,t_vanilla_std_ns,t_mari_mean_ns,t_mari_std_ns,measured_speedup";

/// Times `sessions` on the same bundle in interleaved rounds; returns the
/// samples per session and the report of each session's first timed run.
fn time_interleaved<E: Element>(
    sessions: &[&Session<'_, E>],
    bundle: &InputBundle<E>,
    repeats: usize,
    warmup: usize,
) -> Result<(Vec<Vec<u128>>, Vec<ExecReport<E>>)> {
    for _ in 0..warmup {
        for s in sessions {
            s.run(bundle, Strategy::Uoi)?;
        }
    }
    let k = sessions.len();
    let mut samples = vec![Vec::with_capacity(repeats); k];
    let mut first: Vec<Option<ExecReport<E>>> = vec![None; k];
    for r in 0..repeats {
        for j in 0..k {
            let i = (r + j) % k;
            let rep = sessions[i].run(bundle, Strategy::Uoi)?;
            samples[i].push(rep.wall_time_ns);
            if first[i].is_none() {
                first[i] = Some(rep);
            }
        }
    }
    Ok((samples, first.into_iter().map(Option::unwrap).collect()))
}

fn deviation<E: Element>(a: &ExecReport<E>, reference: &ExecReport<E>) -> Result<f64> {
    let mut worst = 0.0f64;
    for ((_, x), (_, y)) in a.outputs.iter().zip(&reference.outputs) {
        worst = worst.max(x.relative_deviation(y)?);
    }
    Ok(worst)
}

fn site_graphs(dims: &MatmulDims, seed: u64) -> Result<(Graph, Graph)> {
    let g = matmul_site(
        SiteDims {
            du: dims.du,
            di: dims.di,
            dc: dims.dc,
            d: dims.d,
        },
        seed,
    )?;
    let (m, _) = rewrite_all(&g)?;
    Ok((g, m))
}

fn sweep_impl<E: Element>(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::with_capacity(cfg.points.len());
    for &(axis, value, dims) in &cfg.points {
        let (g, m) = site_graphs(&dims, cfg.seed)?;
        let bundle = InputBundle::<E>::random(&g, dims.b, cfg.seed)?;
        let (sv, sm) = (Session::<E>::new(&g), Session::<E>::new(&m));
        let (samples, reports) = time_interleaved(&[&sv, &sm], &bundle, cfg.repeats, cfg.warmup)?;
        let vanilla = Timing::from_samples(&samples[0]);
        let mari = Timing::from_samples(&samples[1]);
        rows.push(BenchRow {
            axis,
            value,
            dims,
            theoretical_speedup: mari_flops(&dims)?.speedup,
            vanilla,
            mari,
            measured_speedup: vanilla.mean_ns / mari.mean_ns,
            max_deviation: deviation(&reports[1], &reports[0])?,
        });
    }
    Ok(rows)
}

/// For every configuration, times the plain concat→matmul site against its
/// split form.
pub fn bench_sweep(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    match cfg.dtype {
        Dtype::F64 => sweep_impl::<f64>(cfg),
        Dtype::F32 => sweep_impl::<f32>(cfg),
    }
}

fn dims_csv(out: &mut String, axis: &str, value: usize, m: &MatmulDims) {
    write!(out, "{axis},{value},{},{},{},{},{}", m.b, m.du, m.di, m.dc, m.d).unwrap();
}

pub fn sweep_csv(cfg: &BenchConfig, mode: &str, rows: &[BenchRow]) -> String {
    let mut out = cfg.describe(mode);
    out.push_str(BENCH_CSV_HEADER);
    out.push('\n');
    for r in rows {
        dims_csv(&mut out, r.axis, r.value, &r.dims);
        writeln!(
            out,
            ",{:.4},{:.0},{:.0},{:.0},{:.0},{:.4}",
            r.theoretical_speedup,
            r.vanilla.mean_ns,
            r.vanilla.std_ns,
            r.mari.mean_ns,
            r.mari.std_ns,
            r.measured_speedup
        )
        .unwrap();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct FragRow {
    pub chunk: usize,
    pub dims: MatmulDims,
    pub theoretical_speedup: f64,
    pub vanilla: Timing,
    pub neat: Timing,
    pub fragmented: Timing,
    /// `(T_fragmented − T_vanilla) / T_vanilla` in percent, from medians.
    pub degradation_vs_vanilla_pct: f64,
    /// `(T_fragmented − T_neat) / T_neat` in percent, from medians.
    pub degradation_vs_neat_pct: f64,
    /// Relative deviation of the fragmented output from the vanilla one.
    pub max_deviation: f64,
}

pub const FRAG_CSV_HEADER: &str = "axis,value,B,D_u,D_i,D_c,d,theoretical_speedup,t_vanilla_mean_ns,t_vanilla_std_ns,t_mari_mean_ns,t_mari_std_ns,measured_speedup,t_neat_mean_ns,t_neat_std_ns,degradation_vs_vanilla_pct,degradation_vs_neat_pct";

fn fragmentation_impl<E: Element>(cfg: &BenchConfig) -> Result<Vec<FragRow>> {
    let dims = cfg
        .points
        .first()
        .ok_or_else(|| Error::invalid("the fragmentation benchmark needs one configuration"))?
        .2;
    let (g, neat) = site_graphs(&dims, cfg.seed)?;
    let frags = cfg
        .chunks
        .iter()
        .map(|&c| fragment_site(&neat, "mm", c))
        .collect::<Result<Vec<_>>>()?;
    let bundle = InputBundle::<E>::random(&g, dims.b, cfg.seed)?;
    let mut sessions = vec![Session::<E>::new(&g), Session::<E>::new(&neat)];
    sessions.extend(frags.iter().map(Session::<E>::new));
    let refs: Vec<&Session<E>> = sessions.iter().collect();
    let (samples, reports) = time_interleaved(&refs, &bundle, cfg.repeats, cfg.warmup)?;
    let vanilla = Timing::from_samples(&samples[0]);
    let neat_t = Timing::from_samples(&samples[1]);
    let theoretical = mari_flops(&dims)?.speedup;
    cfg.chunks
        .iter()
        .enumerate()
        .map(|(i, &chunk)| {
            let t = Timing::from_samples(&samples[i + 2]);
            Ok(FragRow {
                chunk,
                dims,
                theoretical_speedup: theoretical,
                vanilla,
                neat: neat_t,
                fragmented: t,
                degradation_vs_vanilla_pct: 100.0 * (t.median_ns - vanilla.median_ns) / vanilla.median_ns,
                degradation_vs_neat_pct: 100.0 * (t.median_ns - neat_t.median_ns) / neat_t.median_ns,
                max_deviation: deviation(&reports[i + 2], &reports[0])?,
            })
        })
        .collect()
}

/// Times the split site with its input cut into column chunks, against the
/// plain site and the unfragmented split site.
pub fn bench_fragmentation(cfg: &BenchConfig) -> Result<Vec<FragRow>> {
    cfg.validate()?;
    match cfg.dtype {
        Dtype::F64 => fragmentation_impl::<f64>(cfg),
        Dtype::F32 => fragmentation_impl::<f32>(cfg),
    }
}

pub fn fragmentation_csv(cfg: &BenchConfig, rows: &[FragRow]) -> String {
    let mut out = cfg.describe("fragmentation");
    out.push_str(FRAG_CSV_HEADER);
    out.push('\n');
    for r in rows {
        dims_csv(&mut out, "chunk", r.chunk, &r.dims);
        writeln!(
            out,
            ",{:.4},{:.0},{:.0},{:.0},{:.0},{:.4},{:.0},{:.0},{:.2},{:.2}",
            r.theoretical_speedup,
            r.vanilla.mean_ns,
            r.vanilla.std_ns,
            r.fragmented.mean_ns,
            r.fragmented.std_ns,
            r.vanilla.mean_ns / r.fragmented.mean_ns,
            r.neat.mean_ns,
            r.neat.std_ns,
            r.degradation_vs_vanilla_pct,
            r.degradation_vs_neat_pct
        )
        .unwrap();
    }
    out
}

/// Medium-sized model dimensions for end-to-end timing.
pub fn fixture_bench_dims() -> ModelDims {
    ModelDims {
        user_profile: 512,
        seq_len: 50,
        seq_dim: 64,
        item: 256,
        cross: 64,
        user_hidden: 1024,
        attn_hidden: 64,
        experts: 4,
        expert_hidden: 256,
        expert_out: 128,
        tasks: 2,
        tower_hidden: 128,
        fragmented: false,
        seed: 7,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SiteSaving {
    pub site: SiteReport,
    pub analytic: FlopsReport,
    /// Baseline minus rewritten FLOPs of this node, as counted by the
    /// executor.
    pub instrumented_saving: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureSummary {
    pub batch: usize,
    pub site_groups: usize,
    pub sites: Vec<SiteSaving>,
    pub equivalence: EquivVerdict,
    pub baseline: Timing,
    pub rewritten: Timing,
    pub speedup: f64,
    pub flops_baseline: u64,
    pub flops_rewritten: u64,
}

fn fixture_impl<E: Element>(cfg: &BenchConfig, dims: &ModelDims, batch: usize) -> Result<FixtureSummary> {
    let g = fixture_ranking_model(dims)?;
    let (r, report) = rewrite_all(&g)?;
    let eq = EquivConfig::for_element::<E>(5, batch, cfg.seed);
    let equivalence = check_equivalence::<E>(&g, &r, &eq)?;
    let bundle = InputBundle::<E>::random(&g, batch, cfg.seed)?;
    let (sg, sr) = (Session::<E>::new(&g), Session::<E>::new(&r));
    let (samples, reports) = time_interleaved(&[&sg, &sr], &bundle, cfg.repeats, cfg.warmup)?;
    let sites = report
        .sites
        .iter()
        .map(|s| {
            let before = reports[0].flops_of(&s.matmul).unwrap_or(0);
            let after = reports[1].flops_of(&s.matmul).unwrap_or(0);
            Ok(SiteSaving {
                site: s.clone(),
                analytic: s.flops(batch)?,
                instrumented_saving: before.saturating_sub(after),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (baseline, rewritten) = (Timing::from_samples(&samples[0]), Timing::from_samples(&samples[1]));
    Ok(FixtureSummary {
        batch,
        site_groups: report.site_groups(),
        sites,
        equivalence,
        baseline,
        rewritten,
        speedup: baseline.mean_ns / rewritten.mean_ns,
        flops_baseline: reports[0].flops_total,
        flops_rewritten: reports[1].flops_total,
    })
}

/// UOI-form fixture against its rewritten form: equivalence, per-site FLOPs
/// savings and end-to-end timing.
pub fn bench_fixture(cfg: &BenchConfig, dims: &ModelDims, batch: usize) -> Result<FixtureSummary> {
    cfg.validate()?;
    match cfg.dtype {
        Dtype::F64 => fixture_impl::<f64>(cfg, dims, batch),
        Dtype::F32 => fixture_impl::<f32>(cfg, dims, batch),
    }
}

pub const FIXTURE_CSV_HEADER: &str = "site,concat,B,D_u,D_i,D_c,d,flops_baseline,flops_optimized,analytic_saving,instrumented_saving";

pub fn fixture_csv(cfg: &BenchConfig, s: &FixtureSummary) -> String {
    let mut out = cfg.describe("fixture");
    writeln!(
        out,
        "# site_groups={} equivalent={} max_deviation={:.3e} t_baseline_mean_ns={:.0} t_baseline_std_ns={:.0} t_rewritten_mean_ns={:.0} t_rewritten_std_ns={:.0} measured_speedup={:.4} flops_baseline={} flops_rewritten={}",
        s.site_groups,
        s.equivalence.pass,
        s.equivalence.max_deviation,
        s.baseline.mean_ns,
        s.baseline.std_ns,
        s.rewritten.mean_ns,
        s.rewritten.std_ns,
        s.speedup,
        s.flops_baseline,
        s.flops_rewritten
    )
    .unwrap();
    out.push_str(FIXTURE_CSV_HEADER);
    out.push('\n');
    for x in &s.sites {
        let [du, di, dc] = x.site.split;
        writeln!(
            out,
            "{},{},{},{du},{di},{dc},{},{},{},{},{}",
            x.site.matmul,
            x.site.concat,
            s.batch,
            x.site.d,
            x.analytic.flops_baseline,
            x.analytic.flops_optimized,
            x.analytic.absolute_saving,
            x.instrumented_saving
        )
        .unwrap();
    }
    out
}

pub fn write_output(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn timing_statistics() {
        let t = Timing::from_samples(&[1, 2, 3, 4]);
        assert_eq!(t.mean_ns, 2.5);
        assert_eq!(t.median_ns, 2.5);
        assert!((t.std_ns - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spearman_extremes() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = BenchConfig::default();
        c.repeats = 1;
        assert!(c.validate().is_err());
        assert_eq!(BenchConfig::axis("D_user").points.len(), 6);
    }

    #[test]
    fn small_sweep_runs() {
        let cfg = BenchConfig {
            points: vec![("B", 8, MatmulDims { b: 8, du: 6, di: 4, dc: 2, d: 3 })],
            repeats: 3,
            warmup: 1,
            ..BenchConfig::default()
        };
        let rows = bench_sweep(&cfg).unwrap();
        assert!(rows[0].measured_speedup.is_finite() && rows[0].measured_speedup > 0.0);
        assert!(rows[0].max_deviation <= 1e-12);
        let csv = sweep_csv(&cfg, "table2", &rows);
        assert!(csv.starts_with("# mari-bench mode=table2"));
        assert_eq!(csv.lines().nth(1), Some(BENCH_CSV_HEADER));
    }
}

use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use mari_core::exec::{InputBundle, Session, Strategy};
use mari_core::flops::{
    flops_csv, flops_speedup_table, table2_grid, uoi_attention_flops, AttnDims, MatmulDims,
};
use mari_core::gca::{initialize_colors, propagate, run_gca, Color};
use mari_core::graph::{fixture_ranking_model, parse, serialize, ModelDims};
use mari_core::harness::{
    bench_fixture, bench_fragmentation, bench_sweep, fixture_bench_dims, fixture_csv, fragmentation_csv, sweep_csv,
    BenchConfig, Dtype,
};
use mari_core::reorg::reorg_all;
use mari_core::rewrite::{fragment_site, rewrite_all};
use mari_core::{Element, Graph, NodeKind};

#[derive(Parser)]
#[command(name = "mari", version, about = "Split user/item feature-fusion matmuls in ranking-model graphs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// List the matmuls the coloring pass marks as splittable.
    Gca { graph: PathBuf },
    /// Regroup every mixed concat into user, item, cross order.
    Reorg {
        graph: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Reorganize and split every eligible matmul.
    Rewrite {
        graph: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Cut each split matmul's operands into column chunks of this size
        /// (for benchmarking the cost of a fragmented layout).
        #[arg(long, value_name = "CHUNK")]
        fragment: Option<usize>,
    },
    /// Execute a graph on random inputs and print the report as JSON.
    Run {
        graph: PathBuf,
        #[arg(long, default_value = "uoi", value_parser = parse_strategy)]
        strategy: Strategy,
        #[arg(short = 'B', long = "batch", default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
        dtype: DtypeArg,
    },
    /// Analytic FLOPs and theoretical speedup.
    Flops(FlopsArgs),
    /// Write the example ranking model as graph text.
    Fixture {
        /// Interleave user and item columns in the concats.
        #[arg(long)]
        fragmented: bool,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Timed benchmarks; results are CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long, value_enum, conflicts_with_all = ["b", "du", "di", "dc", "d", "l"])]
    preset: Option<Preset>,
    #[arg(short = 'B', long = "b")]
    b: Option<usize>,
    #[arg(long, default_value_t = 0)]
    du: usize,
    #[arg(long, default_value_t = 0)]
    di: usize,
    #[arg(long, default_value_t = 0)]
    dc: usize,
    #[arg(long)]
    d: Option<usize>,
    /// Sequence length; switches to the cross-attention projections.
    #[arg(long)]
    l: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Table2,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Table2,
    Fragmentation,
    Fixture,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Dtype {
        match d {
            DtypeArg::F32 => Dtype::F32,
            DtypeArg::F64 => Dtype::F64,
        }
    }
}

#[derive(Args)]
struct BenchArgs {
    #[arg(value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 100)]
    repeats: usize,
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
    /// Only run one sweep axis of table2 (B, D_user, D_item_cross, D_hidden).
    #[arg(long)]
    axis: Option<String>,
    /// Chunk sizes for the fragmentation mode.
    #[arg(long, value_delimiter = ',')]
    chunks: Option<Vec<usize>>,
    /// Batch size for the fixture mode.
    #[arg(short = 'B', long = "batch", default_value_t = 1000)]
    batch: usize,
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    Strategy::parse(s).ok_or_else(|| format!("unknown strategy `{s}` (expected vani or uoi)"))
}

fn load(path: &Path) -> Result<Graph> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn emit(output: Option<&Path>, text: &str) -> Result<()> {
    match output {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn gca(path: &Path) -> Result<()> {
    let g = load(path)?;
    let colors = propagate(&g, &initialize_colors(&g));
    println!(
        "nodes={} yellow={} blue={} uncolored={}",
        g.len(),
        colors.count(Color::Yellow),
        colors.count(Color::Blue),
        colors.count(Color::Uncolored)
    );
    let set = run_gca(&g);
    for (concat, matmuls) in set.groups() {
        let NodeKind::Concat { layout } = &g.node(concat).kind else { unreachable!() };
        let names: Vec<&str> = matmuls.iter().map(|&m| g.name(m)).collect();
        println!(
            "{} layout={layout} neat={} matmuls=[{}]",
            g.name(concat),
            layout.is_neat(),
            names.join(",")
        );
    }
    if set.is_empty() {
        println!("no splittable matmuls");
    }
    Ok(())
}

fn rewrite(path: &Path, output: Option<&Path>, fragment: Option<usize>) -> Result<()> {
    let g = load(path)?;
    let (mut r, report) = rewrite_all(&g)?;
    for s in &report.sites {
        eprintln!(
            "split {} (concat {}): D_u={} D_i={} D_c={} d={}{}",
            s.matmul,
            s.concat,
            s.split[0],
            s.split[1],
            s.split[2],
            s.d,
            if s.reorganized { ", reorganized" } else { "" }
        );
        if let Some(chunk) = fragment {
            r = fragment_site(&r, &s.matmul, chunk)?;
        }
    }
    eprintln!("{} matmuls in {} groups", report.sites.len(), report.site_groups());
    emit(output, &serialize(&r))
}

fn run_graph<E: Element>(g: &Graph, strategy: Strategy, batch: usize, seed: u64) -> Result<String> {
    let bundle = InputBundle::<E>::random(g, batch, seed)?;
    let report = Session::<E>::new(g).run(&bundle, strategy)?;
    Ok(report.to_json())
}

fn flops(a: &FlopsArgs) -> Result<()> {
    if a.preset.is_some() {
        print!("{}", flops_csv(&flops_speedup_table(&table2_grid())?));
        return Ok(());
    }
    let (Some(b), Some(d)) = (a.b, a.d) else {
        bail!("give --preset table2, or --B and --d (plus --du/--di/--dc or --l)");
    };
    if let Some(l) = a.l {
        let r = uoi_attention_flops(&AttnDims { b, l, d })?;
        println!("B,L,d,flops_vani,flops_uoi,ratio,ratio_long_sequence,ratio_large_batch");
        println!(
            "{b},{l},{d},{},{},{:.6},{:.6},{:.6}",
            r.flops.flops_baseline, r.flops.flops_optimized, r.ratio, r.ratio_long_sequence, r.ratio_large_batch
        );
        return Ok(());
    }
    let dims = MatmulDims { b, du: a.du, di: a.di, dc: a.dc, d };
    print!("{}", flops_csv(&flops_speedup_table(&[("custom", b, dims)])?));
    Ok(())
}

fn bench(a: &BenchArgs) -> Result<()> {
    let base = match (a.mode, &a.axis) {
        (Mode::Table2, Some(axis)) => {
            let c = BenchConfig::axis(axis);
            if c.points.is_empty() {
                bail!("unknown axis `{axis}` (expected B, D_user, D_item_cross or D_hidden)");
            }
            c
        }
        (Mode::Fragmentation, _) => BenchConfig::fragmentation(),
        _ => BenchConfig::default(),
    };
    let cfg = BenchConfig {
        repeats: a.repeats,
        warmup: a.warmup,
        seed: a.seed,
        dtype: a.dtype.into(),
        chunks: a.chunks.clone().unwrap_or(base.chunks.clone()),
        ..base
    };
    cfg.validate()?;
    let csv = match a.mode {
        Mode::Table2 => sweep_csv(&cfg, "table2", &bench_sweep(&cfg)?),
        Mode::Fragmentation => fragmentation_csv(&cfg, &bench_fragmentation(&cfg)?),
        Mode::Fixture => {
            let s = bench_fixture(&cfg, &fixture_bench_dims(), a.batch)?;
            eprintln!(
                "fixture B={}: {} sites in {} groups, equivalent={} (max deviation {:.2e}), speedup {:.2}x",
                s.batch,
                s.sites.len(),
                s.site_groups,
                s.equivalence.pass,
                s.equivalence.max_deviation,
                s.speedup
            );
            fixture_csv(&cfg, &s)
        }
    };
    emit(a.output.as_deref(), &csv)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Gca { graph } => gca(&graph),
        Cmd::Reorg { graph, output } => {
            let g = load(&graph)?;
            emit(output.as_deref(), &serialize(&reorg_all(&g)?))
        }
        Cmd::Rewrite { graph, output, fragment } => rewrite(&graph, output.as_deref(), fragment),
        Cmd::Run { graph, strategy, batch, seed, dtype } => {
            let g = load(&graph)?;
            let json = match dtype {
                DtypeArg::F64 => run_graph::<f64>(&g, strategy, batch, seed)?,
                DtypeArg::F32 => run_graph::<f32>(&g, strategy, batch, seed)?,
            };
            println!("{json}");
            Ok(())
        }
        Cmd::Flops(a) => flops(&a),
        Cmd::Fixture { fragmented, output } => {
            let g = fixture_ranking_model(&ModelDims { fragmented, ..ModelDims::default() })?;
            emit(output.as_deref(), &serialize(&g))
        }
        Cmd::Bench(a) => bench(&a),
    }
}

//! Wall-clock scaling of dense vs routed attention over a family of scenes.

use std::io::Write;
use std::time::Instant;

use anyhow::{bail, Result};
use moc_core::{
    build_chunks, dense_attention, gen_scene, AttentionPlan, CostReport, RoutingConfig, SceneSpec,
    Strategies,
};
use serde::Serialize;

#[derive(Debug, Clone)]
pub struct BenchConfig {
    pub shots: Vec<usize>,
    pub routing: RoutingConfig,
    pub chunk: usize,
    pub reps: usize,
    pub warmup: usize,
    pub seed: u64,
    pub router: String,
    pub kernel: String,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shots: vec![1, 2, 4, 8, 16],
            routing: RoutingConfig::default(),
            chunk: 64,
            reps: 5,
            warmup: 1,
            seed: 0,
            router: "per-token".into(),
            kernel: "gather".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub shots: usize,
    #[serde(rename = "L")]
    pub len: usize,
    pub wall_time_dense: f64,
    pub wall_time_moc: f64,
    pub flops_dense: f64,
    pub flops_moc: f64,
    #[serde(serialize_with = "three_decimals")]
    pub sparsity: f64,
}

fn three_decimals<S: serde::Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{x:.3}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub rows: Vec<BenchRow>,
    pub slope_dense: f64,
    pub slope_moc: f64,
}

/// Parses `A..B` (doubling from `A` up to `B`) or a comma list such as `1,2,4`.
pub fn parse_shots(text: &str) -> Result<Vec<usize>> {
    let shots: Vec<usize> = if let Some((a, b)) = text.split_once("..") {
        let (mut a, b): (usize, usize) = (a.trim().parse()?, b.trim().parse()?);
        if a == 0 || b < a {
            bail!("shot range `{text}` must satisfy 1 <= start <= end");
        }
        let mut out = Vec::new();
        while a <= b {
            out.push(a);
            a *= 2;
        }
        out
    } else {
        text.split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()?
    };
    if shots.is_empty() || shots.contains(&0) || shots.windows(2).any(|w| w[1] <= w[0]) {
        bail!("shot counts `{text}` must be positive and increasing");
    }
    Ok(shots)
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn time_median<T>(warmup: usize, reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<f64> {
    for _ in 0..warmup {
        std::hint::black_box(f()?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        std::hint::black_box(f()?);
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(median(&mut times))
}

/// Times dense attention and the full routed path (routing + sparse
/// attention) on desk scenes with each shot count.
pub fn run_bench(config: &BenchConfig, strategies: &Strategies) -> Result<BenchResult> {
    if config.reps < 5 {
        bail!("at least 5 repetitions are required, got {}", config.reps);
    }
    let router = strategies.routers.get(&config.router)?;
    let kernel = strategies.kernels.get(&config.kernel)?;
    let mut rows = Vec::with_capacity(config.shots.len());
    for &shots in &config.shots {
        let spec = SceneSpec::desk(shots, config.seed);
        let scene = gen_scene(&spec)?;
        let partition = build_chunks(&scene.stream, config.chunk)?;
        let x = &scene.inputs;

        let wall_time_dense = time_median(config.warmup, config.reps, || dense_attention(x).map_err(Into::into))?;
        let wall_time_moc = time_median(config.warmup, config.reps, || {
            let table = router.route(x, &partition, &scene.stream, &config.routing)?;
            Ok(kernel.forward(x, AttentionPlan::routed(&table, &partition))?)
        })?;

        let table = router.route(x, &partition, &scene.stream, &config.routing)?;
        let cost = CostReport::from_table(&table, &partition, x.dim());
        rows.push(BenchRow {
            shots,
            len: scene.len(),
            wall_time_dense,
            wall_time_moc,
            flops_dense: cost.flops_dense,
            flops_moc: cost.flops_moc,
            sparsity: cost.measured_sparsity,
        });
    }
    let lens: Vec<f64> = rows.iter().map(|r| r.len as f64).collect();
    let dense: Vec<f64> = rows.iter().map(|r| r.wall_time_dense).collect();
    let moc: Vec<f64> = rows.iter().map(|r| r.wall_time_moc).collect();
    let (slope_dense, slope_moc) = if rows.len() >= 2 {
        (log_log_slope(&lens, &dense), log_log_slope(&lens, &moc))
    } else {
        (f64::NAN, f64::NAN)
    };
    Ok(BenchResult {
        rows,
        slope_dense,
        slope_moc,
    })
}

pub fn write_rows<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use moc_core::schedule::PRESETS;
use moc_core::{
    build_chunks, detect_loop_closures, gen_scene, routing_counts, CostReport, DropConfig,
    RoutingConfig, Schedule, SceneSpec, Strategies,
};

use crate::bench::{self, BenchConfig};
use crate::checks::{CheckSuite, VerifyConfig, VerifyContext};
use crate::{analysis, export, scenes};

#[derive(Debug, Parser)]
#[command(name = "moc", version, about = "Mixture-of-contexts routing workbench")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a scene and write its tokens, chunks and Q/K/V as CSV.
    Gen {
        #[command(flatten)]
        scene: SceneArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
    },
    /// Run the verification suite on a scene.
    Verify {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        routing: RoutingArgs,
        /// Outer-loop block budget; enables the outer-loop check.
        #[arg(long = "outer-m")]
        outer_m: Option<usize>,
    },
    /// Time dense and routed attention over growing desk scenes.
    Bench {
        /// `A..B` doubles from A to B; or a comma list.
        #[arg(long, default_value = "1..16")]
        shots: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        routing: RoutingArgs,
    },
    /// Route a scene and write per-chunk routing counts.
    Route {
        #[command(flatten)]
        scene: SceneArgs,
        #[command(flatten)]
        routing: RoutingArgs,
        #[arg(long)]
        out: PathBuf,
        /// Also write the chunk x chunk routed-count matrix.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Print a chunk-size schedule as JSON.
    Schedule {
        /// One of the named presets, or `custom` together with `--steps`.
        #[arg(long)]
        preset: String,
        /// `SIZE:K[,SIZE:K...]` for the custom preset.
        #[arg(long)]
        steps: Option<String>,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct SceneSource {
    /// Scene descriptor JSON file.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Built-in scene: desk, adversarial or recall.
    #[arg(long)]
    pub scene: Option<String>,
}

#[derive(Debug, Args)]
pub struct SceneArgs {
    #[command(flatten)]
    pub source: SceneSource,
    /// Seed for built-in scenes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl SceneArgs {
    pub fn load(&self) -> Result<SceneSpec> {
        match (&self.source.spec, &self.source.scene) {
            (Some(path), _) => scenes::load(path),
            (None, Some(name)) => scenes::builtin(name, self.seed),
            (None, None) => bail!("either --spec or --scene is required"),
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct RoutingArgs {
    /// Causal routing mask; `--causal` alone means true. Defaults to on
    /// for `bench`, off elsewhere.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub causal: Option<bool>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 64)]
    pub chunk: usize,
    #[arg(long = "drop-pmax", requires = "drop_lambda")]
    pub drop_pmax: Option<f64>,
    #[arg(long = "drop-lambda", requires = "drop_pmax")]
    pub drop_lambda: Option<f64>,
    #[arg(long = "drop-seed", default_value_t = 0)]
    pub drop_seed: u64,
    #[arg(long = "no-cross-modal")]
    pub no_cross_modal: bool,
    #[arg(long = "no-intra-shot")]
    pub no_intra_shot: bool,
    #[arg(long = "no-self-chunk")]
    pub no_self_chunk: bool,
    /// Routing strategy: per-token or shared-chunk.
    #[arg(long, default_value = "per-token")]
    pub routing: String,
    /// Attention kernel: gather, varlen or dense.
    #[arg(long, default_value = "gather")]
    pub kernel: String,
}

impl RoutingArgs {
    pub fn config(&self, causal_by_default: bool) -> Result<RoutingConfig> {
        let drop = match (self.drop_pmax, self.drop_lambda) {
            (Some(p_max), Some(lambda)) => Some(DropConfig {
                p_max,
                lambda,
                seed: self.drop_seed,
                enabled: true,
            }),
            _ => None,
        };
        let config = RoutingConfig {
            k: self.k,
            causal: self.causal.unwrap_or(causal_by_default),
            force_cross_modal: !self.no_cross_modal,
            force_intra_shot: !self.no_intra_shot,
            force_self_chunk: !self.no_self_chunk,
            drop,
        };
        config.validate()?;
        Ok(config)
    }
}

/// How a successfully parsed command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    VerificationFailed,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<Outcome> {
    let strategies = Strategies::default();
    match cli.command {
        Command::Gen { scene, out: dir, chunk } => {
            let spec = scene.load()?;
            let s = gen_scene(&spec)?;
            let partition = build_chunks(&s.stream, chunk)?;
            std::fs::create_dir_all(&dir)?;
            serde_json::to_writer_pretty(create(&dir.join("scene.json"))?, &spec)?;
            export::write_tokens(create(&dir.join("tokens.csv"))?, &s.stream)?;
            export::write_chunks(create(&dir.join("chunks.csv"))?, &partition)?;
            for (name, t) in [("q", &s.inputs.q), ("k", &s.inputs.k), ("v", &s.inputs.v)] {
                export::write_tensor(create(&dir.join(format!("{name}.csv")))?, t)?;
            }
            writeln!(
                out,
                "tokens={} chunks={} heads={} d={} out={}",
                s.len(),
                partition.num_chunks(),
                spec.heads,
                spec.d,
                dir.display()
            )?;
            Ok(Outcome::Success)
        }
        Command::Verify { scene, routing, outer_m } => {
            let spec = scene.load()?;
            let config = VerifyConfig {
                routing: routing.config(false)?,
                chunk: routing.chunk,
                router: routing.routing.clone(),
                kernel: routing.kernel.clone(),
                outer_m,
            };
            let ctx = VerifyContext::new(&spec, config, &strategies)?;
            writeln!(
                out,
                "scene L={} chunks={} heads={} d={} k={} causal={}",
                ctx.scene.len(),
                ctx.partition.num_chunks(),
                spec.heads,
                spec.d,
                ctx.config.routing.k,
                ctx.config.routing.causal
            )?;
            let reports = CheckSuite::default().run(&ctx)?;
            for r in &reports {
                writeln!(out, "{r}")?;
            }
            let failed = reports.iter().filter(|r| !r.passed).count();
            writeln!(out, "{} checks, {failed} failed", reports.len())?;
            Ok(if failed == 0 {
                Outcome::Success
            } else {
                Outcome::VerificationFailed
            })
        }
        Command::Bench {
            shots,
            out: path,
            reps,
            seed,
            routing,
        } => {
            let config = BenchConfig {
                shots: bench::parse_shots(&shots)?,
                routing: routing.config(true)?,
                chunk: routing.chunk,
                reps,
                seed,
                router: routing.routing.clone(),
                kernel: routing.kernel.clone(),
                ..BenchConfig::default()
            };
            let result = bench::run_bench(&config, &strategies)?;
            bench::write_rows(create(&path)?, &result.rows)?;
            for r in &result.rows {
                writeln!(
                    out,
                    "shots={} L={} dense={:.4}s moc={:.4}s sparsity={:.3}",
                    r.shots, r.len, r.wall_time_dense, r.wall_time_moc, r.sparsity
                )?;
            }
            writeln!(out, "slope_dense={:.3} slope_moc={:.3}", result.slope_dense, result.slope_moc)?;
            Ok(Outcome::Success)
        }
        Command::Route {
            scene,
            routing,
            out: path,
            matrix,
        } => {
            let spec = scene.load()?;
            let s = gen_scene(&spec)?;
            let partition = build_chunks(&s.stream, routing.chunk)?;
            let router = strategies.routers.get(&routing.routing)?;
            let table = router.route(&s.inputs, &partition, &s.stream, &routing.config(false)?)?;
            let counts = routing_counts(&table, &partition);
            export::write_route_counts(create(&path)?, &counts)?;
            if let Some(m) = matrix {
                let mat = moc_core::router::routed_count_matrix(&counts, partition.num_chunks());
                export::write_matrix(create(&m)?, &mat)?;
            }
            let loops = detect_loop_closures(&table, &partition);
            writeln!(out, "loop_closures={}", loops.len())?;
            for (a, b) in &loops {
                writeln!(out, "loop={a},{b}")?;
            }
            for (target, source) in spec.recall_pairs.iter().map(|&(s, t)| (t, s)) {
                let per_shot = analysis::routed_counts_by_shot(&table, &partition, target as u32);
                let best = analysis::strongest_earlier_shot(&per_shot, target);
                writeln!(
                    out,
                    "recall target={target} source={source} strongest={}",
                    best.map_or("none".to_string(), |b| b.to_string())
                )?;
            }
            write!(out, "{}", CostReport::from_table(&table, &partition, spec.d).to_record())?;
            Ok(Outcome::Success)
        }
        Command::Schedule { preset, steps } => {
            let schedule = match (preset.as_str(), steps) {
                ("custom", Some(steps)) => Schedule::custom(&steps)?,
                ("custom", None) => bail!("the custom preset needs --steps SIZE:K[,SIZE:K...]"),
                (name, _) => match Schedule::preset(name) {
                    Ok(s) => s,
                    Err(e) => bail!("{e}; expected one of {}, custom", PRESETS.join(", ")),
                },
            };
            serde_json::to_writer_pretty(&mut *out, &schedule)?;
            writeln!(out)?;
            Ok(Outcome::Success)
        }
    }
}

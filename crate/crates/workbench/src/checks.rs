//! Verification checks run by `moc verify`.
//!
//! Each check is a [`Check`] trait object; the suite runs them in
//! registration order against one shared [`VerifyContext`].

use std::fmt;
use std::sync::Arc;

use anyhow::Result;
use moc_core::reference::{finite_difference_grads, naive_routed, token_set_by_membership};
use moc_core::tensor::max_rel_err;
use moc_core::{
    attention_vjp, build_chunks, build_varlen_pack, candidate_mask, curate_context,
    dense_attention, detect_loop_closures, gen_scene, outer_route, varlen_attention,
    AttentionKernel, AttentionPlan, ChunkPartition, OuterPartition, Provenance, RouteStrategy,
    RoutingConfig, RoutingTable, Scene, SceneSpec, ShotLayout, Strategies,
};

pub const SATURATED_TOL: f64 = 1e-5;
pub const ORACLE_TOL: f64 = 1e-6;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const GRADIENT_STEP: f64 = 1e-4;
pub const COMPOSITION_TOL: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct VerifyConfig {
    pub routing: RoutingConfig,
    pub chunk: usize,
    pub router: String,
    pub kernel: String,
    /// Outer-loop block budget; `None` skips the outer-loop check.
    pub outer_m: Option<usize>,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            routing: RoutingConfig {
                causal: false,
                ..RoutingConfig::default()
            },
            chunk: 64,
            router: "per-token".into(),
            kernel: "gather".into(),
            outer_m: None,
        }
    }
}

pub struct VerifyContext {
    pub scene: Scene,
    pub partition: ChunkPartition,
    pub table: RoutingTable,
    pub config: VerifyConfig,
    pub router: Arc<dyn RouteStrategy>,
    pub kernel: Arc<dyn AttentionKernel>,
}

impl VerifyContext {
    pub fn new(spec: &SceneSpec, config: VerifyConfig, strategies: &Strategies) -> Result<Self> {
        let scene = gen_scene(spec)?;
        let partition = build_chunks(&scene.stream, config.chunk)?;
        let router = strategies.routers.get(&config.router)?;
        let kernel = strategies.kernels.get(&config.kernel)?;
        let table = router.route(&scene.inputs, &partition, &scene.stream, &config.routing)?;
        Ok(Self {
            scene,
            partition,
            table,
            config,
            router,
            kernel,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub passed: bool,
    /// Measured quantity (error, violation count, ...).
    pub value: f64,
    pub tolerance: Option<f64>,
    pub detail: String,
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{:<10} {status} value={:.3e}", self.name, self.value)?;
        if let Some(tol) = self.tolerance {
            write!(f, " tol={tol:.0e}")?;
        }
        if !self.detail.is_empty() {
            write!(f, " {}", self.detail)?;
        }
        Ok(())
    }
}

pub trait Check: Send + Sync {
    fn name(&self) -> &'static str;

    /// `false` to skip the check under this configuration.
    fn applies(&self, _ctx: &VerifyContext) -> bool {
        true
    }

    fn run(&self, ctx: &VerifyContext) -> Result<CheckReport>;
}

fn within(name: &'static str, err: f64, tol: f64, detail: String) -> CheckReport {
    CheckReport {
        name,
        passed: err <= tol,
        value: err,
        tolerance: Some(tol),
        detail,
    }
}

fn zero_violations(name: &'static str, count: usize, detail: String) -> CheckReport {
    CheckReport {
        name,
        passed: count == 0,
        value: count as f64,
        tolerance: None,
        detail,
    }
}

/// Every query selecting every chunk must reproduce dense attention.
pub struct SaturatedCheck;

impl Check for SaturatedCheck {
    fn name(&self) -> &'static str {
        "saturated"
    }

    fn run(&self, ctx: &VerifyContext) -> Result<CheckReport> {
        let x = &ctx.scene.inputs;
        let table = RoutingTable::saturated(x.heads(), &ctx.partition);
        let routed = ctx.kernel.forward(x, AttentionPlan::routed(&table, &ctx.partition))?;
        let dense = dense_attention(x)?;
        let err = max_rel_err(routed.out.as_slice(), dense.out.as_slice(), 1e-12);
        Ok(within(self.name(), err, SATURATED_TOL, format!("kernel={}", ctx.kernel.name())))
    }
}

/// The configured kernel against a gather-then-softmax oracle on the routed table.
pub struct OracleCheck;

impl Check for OracleCheck {
    fn name(&self) -> &'static str {
        "oracle"
    }

    fn run(&self, ctx: &VerifyContext) -> Result<CheckReport> {
        let x = &ctx.scene.inputs;
        let got = ctx.kernel.forward(x, AttentionPlan::routed(&ctx.table, &ctx.partition))?;
        let want = naive_routed(x, &ctx.table, &ctx.partition);
        let err = max_rel_err(got.out.as_slice(), want.as_slice(), 1e-12);
        Ok(within(
            self.name(),
            err,
            ORACLE_TOL,
            format!("router={} kernel={}", ctx.router.name(), ctx.kernel.name()),
        ))
    }
}

/// Backward pass against central finite differences on a 7-token, d = 4
/// instance routed with the same configuration, plus the zero-gradient
/// property of never-selected keys.
pub struct GradientCheck;

impl GradientCheck {
    fn tiny_spec(seed: u64) -> SceneSpec {
        SceneSpec {
            shots: vec![
                ShotLayout {
                    n_frames: 2,
                    tokens_per_frame: 1,
                    caption_tokens: 1,
                };
                2
            ],
            global_caption_tokens: 1,
            d: 4,
            heads: 1,
            seed,
            ..SceneSpec::desk(2, seed)
        }
    }
}

impl Check for GradientCheck {
    fn name(&self) -> &'static str {
        "gradient"
    }

    fn run(&self, ctx: &VerifyContext) -> Result<CheckReport> {
        let tiny = gen_scene(&Self::tiny_spec(ctx.scene.spec.seed))?;
        let partition = build_chunks(&tiny.stream, 1)?;
        let config = RoutingConfig {
            k: ctx.config.routing.k.min(2),
            ..ctx.config.routing
        };
        let table = ctx.router.route(&tiny.inputs, &partition, &tiny.stream, &config)?;
        let x = &tiny.inputs;
        let upstream = x.v.clone();
        let mut worst: f64 = 0.0;
        for plan in [AttentionPlan::Dense, AttentionPlan::routed(&table, &partition)] {
            let analytic = attention_vjp(x, plan, &upstream)?;
            let numeric = finite_difference_grads(x, plan, &upstream, GRADIENT_STEP);
            for (a, n) in [
                (&analytic.dq, &numeric.dq),
                (&analytic.dk, &numeric.dk),
                (&analytic.dv, &numeric.dv),
            ] {
                worst = worst.max(max_rel_err(a.as_slice(), n.as_slice(), 1e-3));
            }
        }

        let grads = attention_vjp(x, AttentionPlan::routed(&table, &partition), &upstream)?;
        let mut used = vec![false; x.len()];
        for i in 0..x.len() {
            for t in token_set_by_membership(&table, &partition, 0, i) {
                used[t] = true;
            }
        }
        let leaks = (0..x.len())
            .filter(|&t| !used[t])
            .filter(|&t| {
                grads.dk.row(0, t).iter().chain(grads.dv.row(0, t)).any(|&g| g != 0.0)
            })
            .count();
        let mut report = within(
            self.name(),
            worst,
            GRADIENT_TOL,
            format!("L={} d={} unselected_nonzero={leaks}", x.len(), x.dim()),
        );
        report.passed &= leaks == 0;
        Ok(report)
    }
}

/// With the causal mask on, no routed edge may point to the same or a later chunk.
pub struct DagCheck;

impl Check for DagCheck {
    fn name(&self) -> &'static str {
        "dag"
    }

    fn run(&self, ctx: &VerifyContext) -> Result<CheckReport> {
        let edges = ctx.table.chunk_edges(&ctx.partition);
        let forward = edges.iter().filter(|(from, to)| to >= from).count();
        if ctx.config.routing.causal {
            Ok(zero_violations(self.name(), forward, format!("edges={}", edges.len())))
        } else {
            Ok(CheckReport {
                name: self.name(),
                passed: true,
                value: forward as f64,
                tolerance: None,
                detail: format!("causal mask off, {forward} of {} edges point forward", edges.len()),
            })
        }
    }
}

/// Lists isolated mutual routing pairs; fails only if the causal mask is on.
pub struct LoopCheck;

impl Check for LoopCheck {
    fn name(&self) -> &'static str {
        "loops"
    }

    fn run(&self, ctx: &VerifyContext) -> Result<CheckReport> {
        let loops = detect_loop_closures(&ctx.table, &ctx.partition);
        let listed: Vec<String> = loops.iter().map(|(a, b)| format!("({a},{b})")).collect();
        let detail = format!("pairs=[{}]", listed.join(" "));
        if ctx.config.routing.causal {
            Ok(zero_violations(self.name(), loops.len(), detail))
        } else {
            Ok(CheckReport {
                name: self.name(),
                passed: true,
                value: loops.len() as f64,
                tolerance: None,
                detail,
            })
        }
    }
}

/// Var-len packed evaluation must equal per-query gathering bit for bit.
pub struct PackingCheck;

impl Check for PackingCheck {
    fn name(&self) -> &'static str {
        "packing"
    }

    fn run(&self, ctx: &VerifyContext) -> Result<CheckReport> {
        let x = &ctx.scene.inputs;
        let pack = build_varlen_pack(&ctx.table, &ctx.partition)?;
        let packed = varlen_attention(x, &pack)?;
        let gathered = moc_core::moc_attention(x, &ctx.table, &ctx.partition)?;
        let mismatched = packed
            .out
            .as_slice()
            .iter()
            .zip(gathered.out.as_slice())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
        let covered: usize = pack.groups().map(|g| g.queries.len()).sum();
        let missing = (x.heads() * x.len()).abs_diff(covered);
        Ok(zero_violations(
            self.name(),
            mismatched + missing,
            format!("groups={}", pack.num_groups()),
        ))
    }
}

/// Drop-off and drop-in must leave mandatory links untouched.
pub struct DropCheck;

impl Check for DropCheck {
    fn name(&self) -> &'static str {
        "drop"
    }

    fn applies(&self, ctx: &VerifyContext) -> bool {
        ctx.config.routing.drop.is_some_and(|d| d.enabled)
    }

    fn run(&self, ctx: &VerifyContext) -> Result<CheckReport> {
        let (mut violations, mut inserted) = (0, 0);
        for i in 0..ctx.table.len() {
            let mask = candidate_mask(i, &ctx.partition, &ctx.scene.stream, &ctx.config.routing)?;
            for h in 0..ctx.table.heads() {
                let sel = ctx.table.selection(h, i);
                if !sel.with_provenance(Provenance::Mandatory).eq(mask.mandatory.iter().copied()) {
                    violations += 1;
                }
                for c in sel.with_provenance(Provenance::DroppedIn) {
                    inserted += 1;
                    if mask.candidates.binary_search(&c).is_err() {
                        violations += 1;
                    }
                }
            }
        }
        Ok(zero_violations(self.name(), violations, format!("dropped_in={inserted}")))
    }
}

/// Outer-loop pre-selection for the last shot, then saturated inner attention
/// on the curated stream compared with dense attention over the same tokens.
pub struct OuterCheck;

impl Check for OuterCheck {
    fn name(&self) -> &'static str {
        "outer"
    }

    fn applies(&self, ctx: &VerifyContext) -> bool {
        ctx.config.outer_m.is_some() && ctx.scene.stream.num_shots() > 1
    }

    fn run(&self, ctx: &VerifyContext) -> Result<CheckReport> {
        let m = ctx.config.outer_m.unwrap_or(1);
        let stream = &ctx.scene.stream;
        let x = &ctx.scene.inputs;
        let last = stream.meta(stream.len() - 1).shot_id;
        let blocks = OuterPartition::by_shot(stream, last)?;
        let query: Vec<usize> = blocks.query().clone().collect();
        let selection = outer_route(&x.k, &x.q.select_tokens(&query), &blocks, m)?;
        let curated = curate_context(stream, &ctx.partition, &selection, true)?;
        curated.partition.validate(&curated.stream)?;
        let sub = x.select_tokens(&curated.new_to_old);
        let table = RoutingTable::saturated(sub.heads(), &curated.partition);
        let inner = ctx.kernel.forward(&sub, AttentionPlan::routed(&table, &curated.partition))?;
        let dense = dense_attention(&sub)?;
        let err = max_rel_err(inner.out.as_slice(), dense.out.as_slice(), 1e-12);
        Ok(within(
            self.name(),
            err,
            COMPOSITION_TOL,
            format!(
                "M={m} selected={:?} tokens={}/{}",
                selection.selected,
                curated.len(),
                stream.len()
            ),
        ))
    }
}

pub struct CheckSuite {
    checks: Vec<Box<dyn Check>>,
}

impl CheckSuite {
    pub fn empty() -> Self {
        Self { checks: Vec::new() }
    }

    pub fn register(&mut self, check: Box<dyn Check>) {
        self.checks.push(check);
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.checks.iter().map(|c| c.name()).collect()
    }

    /// Runs every applicable check in registration order.
    pub fn run(&self, ctx: &VerifyContext) -> Result<Vec<CheckReport>> {
        self.checks
            .iter()
            .filter(|c| c.applies(ctx))
            .map(|c| c.run(ctx))
            .collect()
    }
}

impl Default for CheckSuite {
    fn default() -> Self {
        let mut s = Self::empty();
        s.register(Box::new(SaturatedCheck));
        s.register(Box::new(OracleCheck));
        s.register(Box::new(GradientCheck));
        s.register(Box::new(DagCheck));
        s.register(Box::new(LoopCheck));
        s.register(Box::new(PackingCheck));
        s.register(Box::new(DropCheck));
        s.register(Box::new(OuterCheck));
        s
    }
}

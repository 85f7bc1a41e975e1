//! Parameter-free chunk routing.
//!
//! Each chunk is summarized by the mean of its keys; a query scores every
//! candidate chunk by a raw inner product with that descriptor and keeps the
//! top `k`. Forced links (captions, the query's own shot, its own chunk) are
//! resolved before selection so they never consume routing budget, and the
//! causal mask restricts candidates to strictly earlier chunks.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::AttentionInputs;
use crate::error::{MocError, Result};
use crate::lattice::{ChunkPartition, TokenStream};
use crate::rng::CounterRng;
use crate::tensor::{dot, HeadTensor};

const DOMAIN_TOKEN: u64 = 1;
const DOMAIN_CHUNK: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DropConfig {
    pub p_max: f64,
    pub lambda: f64,
    pub seed: u64,
    pub enabled: bool,
}

impl DropConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_max) {
            return Err(MocError::InvalidConfig(format!(
                "p_max {} outside [0, 1]",
                self.p_max
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(MocError::InvalidConfig(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub k: usize,
    pub causal: bool,
    pub force_cross_modal: bool,
    pub force_intra_shot: bool,
    pub force_self_chunk: bool,
    pub drop: Option<DropConfig>,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            k: 5,
            causal: true,
            force_cross_modal: true,
            force_intra_shot: true,
            force_self_chunk: true,
            drop: None,
        }
    }
}

impl RoutingConfig {
    /// Plain top-k: no forced links, no causality, no drops.
    pub fn plain(k: usize) -> Self {
        Self {
            k,
            causal: false,
            force_cross_modal: false,
            force_intra_shot: false,
            force_self_chunk: false,
            drop: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(MocError::InvalidConfig("k must be >= 1".into()));
        }
        if let Some(d) = &self.drop {
            d.validate()?;
        }
        Ok(())
    }

    fn active_drop(&self) -> Option<&DropConfig> {
        self.drop.as_ref().filter(|d| d.enabled)
    }
}

/// Mean-pooled key per (head, chunk), stored as a `[H, C, d]` tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ChunkDescriptors {
    means: HeadTensor,
}

impl ChunkDescriptors {
    pub fn heads(&self) -> usize {
        self.means.heads()
    }

    pub fn num_chunks(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means.dim()
    }

    #[inline]
    pub fn descriptor(&self, head: usize, chunk: usize) -> &[f64] {
        self.means.row(head, chunk)
    }

    pub fn as_tensor(&self) -> &HeadTensor {
        &self.means
    }
}

/// Streaming segment mean: one pass over the keys, accumulating into the
/// descriptor of the current chunk and scaling once at each chunk end.
pub fn pool_descriptors(keys: &HeadTensor, partition: &ChunkPartition) -> Result<ChunkDescriptors> {
    if keys.len() != partition.len() {
        return Err(MocError::ShapeMismatch(format!(
            "keys have {} tokens, partition covers {}",
            keys.len(),
            partition.len()
        )));
    }
    if keys.dim() == 0 {
        return Err(MocError::ShapeMismatch("head dimension must be >= 1".into()));
    }
    let (heads, dim) = (keys.heads(), keys.dim());
    let mut means = HeadTensor::zeros(heads, partition.num_chunks(), dim);
    for h in 0..heads {
        for chunk in partition.chunks() {
            let acc = means.row_mut(h, chunk.chunk_id);
            for t in chunk.range() {
                for (a, k) in acc.iter_mut().zip(keys.row(h, t)) {
                    *a += k;
                }
            }
            let inv = 1.0 / chunk.token_count() as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
    }
    Ok(ChunkDescriptors { means })
}

/// Unscaled inner product of `query` with every chunk descriptor of `head`.
pub fn route_scores(query: &[f64], descriptors: &ChunkDescriptors, head: usize) -> Result<Vec<f64>> {
    if query.len() != descriptors.dim() {
        return Err(MocError::ShapeMismatch(format!(
            "query has dimension {}, descriptors {}",
            query.len(),
            descriptors.dim()
        )));
    }
    if head >= descriptors.heads() {
        return Err(MocError::IndexOutOfRange {
            index: head,
            len: descriptors.heads(),
        });
    }
    Ok((0..descriptors.num_chunks())
        .map(|c| dot(query, descriptors.descriptor(head, c)))
        .collect())
}

/// Forced chunks and routable candidates for one query. Both ascending and disjoint.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CandidateMask {
    pub mandatory: Vec<usize>,
    pub candidates: Vec<usize>,
}

pub fn candidate_mask(
    query_token: usize,
    partition: &ChunkPartition,
    stream: &TokenStream,
    config: &RoutingConfig,
) -> Result<CandidateMask> {
    if partition.len() != stream.len() {
        return Err(MocError::ShapeMismatch(
            "partition and stream lengths differ".into(),
        ));
    }
    let chunk = partition.lookup(query_token)?;
    Ok(chunk_candidate_mask(chunk, partition, config))
}

/// The mask depends only on the query's chunk (its id and shot), so every
/// token of a chunk shares it.
pub(crate) fn chunk_candidate_mask(
    query_chunk: usize,
    partition: &ChunkPartition,
    config: &RoutingConfig,
) -> CandidateMask {
    let own = partition.chunk(query_chunk);
    let mut mandatory = BTreeSet::new();
    if config.force_self_chunk {
        mandatory.insert(query_chunk);
    }
    for c in partition.chunks() {
        if (config.force_cross_modal && c.is_text())
            || (config.force_intra_shot && c.shot_id == own.shot_id)
        {
            mandatory.insert(c.chunk_id);
        }
    }
    let limit = if config.causal {
        query_chunk
    } else {
        partition.num_chunks()
    };
    let candidates = (0..limit).filter(|c| !mandatory.contains(c)).collect();
    CandidateMask {
        mandatory: mandatory.into_iter().collect(),
        candidates,
    }
}

/// Indices of the `k` best `(chunk, score)` pairs, returned ascending by chunk id.
/// Higher scores win; equal scores go to the lower chunk id.
pub fn topk_select(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let by_rank = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    let mut pool = scores.to_vec();
    if pool.len() > k && k > 0 {
        pool.select_nth_unstable_by(k - 1, by_rank);
        pool.truncate(k);
    } else if k == 0 {
        pool.clear();
    }
    let mut out: Vec<usize> = pool.into_iter().map(|(c, _)| c).collect();
    out.sort_unstable();
    out
}

/// Result of one drop-off / drop-in perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct DropOutcome {
    pub kept: Vec<usize>,
    pub removed: Vec<usize>,
    pub inserted: Vec<usize>,
    pub p_drop: f64,
    /// Poisson draw before clipping to the available pool.
    pub m: usize,
}

/// Removes `floor(p_drop * k)` routed chunks with `p_drop ~ U(0, p_max)`, then
/// inserts `m ~ Poisson(lambda)` chunks drawn from `candidates` minus the
/// original routed set. Mandatory chunks never appear in `candidates`, so they
/// are neither dropped nor re-inserted.
pub fn apply_drop(
    routed: &[usize],
    k: usize,
    config: &DropConfig,
    rng: &mut CounterRng,
    candidates: &[usize],
) -> Result<DropOutcome> {
    if !config.enabled {
        return Err(MocError::DropDisabled);
    }
    config.validate()?;

    let p_drop = config.p_max * rng.next_f64();
    let n_remove = ((p_drop * k as f64).floor() as usize).min(routed.len());
    let mut removed_at = index::sample(rng, routed.len(), n_remove).into_vec();
    removed_at.sort_unstable();
    let mut kept = Vec::with_capacity(routed.len() - n_remove);
    let mut removed = Vec::with_capacity(n_remove);
    for (pos, &c) in routed.iter().enumerate() {
        if removed_at.binary_search(&pos).is_ok() {
            removed.push(c);
        } else {
            kept.push(c);
        }
    }

    let m = if config.lambda > 0.0 {
        let poisson = Poisson::new(config.lambda)
            .map_err(|e| MocError::InvalidConfig(format!("poisson rate: {e}")))?;
        poisson.sample(rng) as usize
    } else {
        0
    };
    let pool: Vec<usize> = candidates
        .iter()
        .copied()
        .filter(|c| routed.binary_search(c).is_err())
        .collect();
    let n_insert = m.min(pool.len());
    let mut inserted: Vec<usize> = index::sample(rng, pool.len(), n_insert)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    inserted.sort_unstable();

    Ok(DropOutcome {
        kept,
        removed,
        inserted,
        p_drop,
        m,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Provenance {
    Mandatory,
    Routed,
    DroppedIn,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Mandatory => "mandatory",
            Provenance::Routed => "routed",
            Provenance::DroppedIn => "dropped_in",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "mandatory" => Some(Provenance::Mandatory),
            "routed" => Some(Provenance::Routed),
            "dropped_in" => Some(Provenance::DroppedIn),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectedChunk {
    pub chunk: usize,
    pub provenance: Provenance,
    /// Routing score; `None` for mandatory chunks, which are never scored.
    pub score: Option<f64>,
}

/// Chunks attended by one (head, query), ascending by chunk id, no duplicates.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    entries: Vec<SelectedChunk>,
}

impl Selection {
    pub fn new(mut entries: Vec<SelectedChunk>) -> Result<Self> {
        entries.sort_by_key(|e| e.chunk);
        if entries.windows(2).any(|w| w[0].chunk == w[1].chunk) {
            return Err(MocError::InvalidConfig(
                "a chunk appears twice in one selection".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[SelectedChunk] {
        &self.entries
    }

    pub fn chunks(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.chunk)
    }

    pub fn with_provenance(&self, p: Provenance) -> impl Iterator<Item = usize> + '_ {
        self.entries
            .iter()
            .filter(move |e| e.provenance == p)
            .map(|e| e.chunk)
    }

    pub fn count(&self, p: Provenance) -> usize {
        self.entries.iter().filter(|e| e.provenance == p).count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Attended token indices: union of the selected chunk ranges, ascending.
    pub fn tokens<'a>(&'a self, partition: &'a ChunkPartition) -> impl Iterator<Item = usize> + 'a {
        self.entries
            .iter()
            .flat_map(move |e| partition.chunk(e.chunk).range())
    }

    pub fn token_count(&self, partition: &ChunkPartition) -> usize {
        self.entries
            .iter()
            .map(|e| partition.chunk(e.chunk).token_count())
            .sum()
    }
}

/// Per-head, per-query chunk selections.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingTable {
    heads: usize,
    len: usize,
    num_chunks: usize,
    k: usize,
    rows: Vec<Selection>,
    flops: u64,
}

impl RoutingTable {
    /// Assembles a table from `heads * len` rows in head-major order.
    pub fn from_rows(
        heads: usize,
        len: usize,
        num_chunks: usize,
        k: usize,
        rows: Vec<Selection>,
    ) -> Result<Self> {
        if rows.len() != heads * len {
            return Err(MocError::ShapeMismatch(format!(
                "{} rows for {heads} heads x {len} queries",
                rows.len()
            )));
        }
        if let Some(bad) = rows.iter().flat_map(|r| r.chunks()).find(|&c| c >= num_chunks) {
            return Err(MocError::IndexOutOfRange {
                index: bad,
                len: num_chunks,
            });
        }
        Ok(Self {
            heads,
            len,
            num_chunks,
            k,
            rows,
            flops: 0,
        })
    }

    /// Every query selects every chunk.
    pub fn saturated(heads: usize, partition: &ChunkPartition) -> Self {
        let c = partition.num_chunks();
        let row = Selection {
            entries: (0..c)
                .map(|chunk| SelectedChunk {
                    chunk,
                    provenance: Provenance::Routed,
                    score: None,
                })
                .collect(),
        };
        Self {
            heads,
            len: partition.len(),
            num_chunks: c,
            k: c,
            rows: vec![row; heads * partition.len()],
            flops: 0,
        }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_chunks(&self) -> usize {
        self.num_chunks
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Pooling adds plus routing multiply-adds spent building the table, all heads.
    pub fn flops(&self) -> u64 {
        self.flops
    }

    #[inline]
    pub fn selection(&self, head: usize, query: usize) -> &Selection {
        &self.rows[head * self.len + query]
    }

    pub fn rows(&self) -> &[Selection] {
        &self.rows
    }

    pub fn check_partition(&self, partition: &ChunkPartition) -> Result<()> {
        if partition.len() != self.len || partition.num_chunks() != self.num_chunks {
            return Err(MocError::ShapeMismatch(format!(
                "table is {} queries x {} chunks, partition {} x {}",
                self.len,
                self.num_chunks,
                partition.len(),
                partition.num_chunks()
            )));
        }
        Ok(())
    }

    /// Directed chunk edges `(query_chunk, selected_chunk)` from routed and
    /// dropped-in selections, aggregated over heads and queries.
    pub fn chunk_edges(&self, partition: &ChunkPartition) -> BTreeSet<(usize, usize)> {
        let mut edges = BTreeSet::new();
        for h in 0..self.heads {
            for i in 0..self.len {
                let from = partition.chunk_of(i);
                for e in self.selection(h, i).entries() {
                    if e.provenance != Provenance::Mandatory {
                        edges.insert((from, e.chunk));
                    }
                }
            }
        }
        edges
    }
}

fn check_inputs(
    inputs: &AttentionInputs,
    partition: &ChunkPartition,
    stream: &TokenStream,
    config: &RoutingConfig,
) -> Result<()> {
    config.validate()?;
    if inputs.len() != partition.len() || stream.len() != partition.len() {
        return Err(MocError::ShapeMismatch(format!(
            "inputs cover {} tokens, partition {}, stream {}",
            inputs.len(),
            partition.len(),
            stream.len()
        )));
    }
    Ok(())
}

/// Mandatory chunks, top-k routed candidates, then the optional drop perturbation.
fn assemble(
    mask: &CandidateMask,
    scored: &[(usize, f64)],
    config: &RoutingConfig,
    rng: impl FnOnce() -> CounterRng,
) -> Result<Selection> {
    let routed = topk_select(scored, config.k);
    let score_of = |c: usize| {
        scored
            .binary_search_by_key(&c, |(id, _)| *id)
            .ok()
            .map(|p| scored[p].1)
    };
    let (routed, inserted) = match config.active_drop() {
        Some(drop) => {
            let out = apply_drop(&routed, config.k, drop, &mut rng(), &mask.candidates)?;
            (out.kept, out.inserted)
        }
        None => (routed, Vec::new()),
    };
    let mut entries = Vec::with_capacity(mask.mandatory.len() + routed.len() + inserted.len());
    entries.extend(mask.mandatory.iter().map(|&chunk| SelectedChunk {
        chunk,
        provenance: Provenance::Mandatory,
        score: None,
    }));
    entries.extend(routed.into_iter().map(|chunk| SelectedChunk {
        chunk,
        provenance: Provenance::Routed,
        score: score_of(chunk),
    }));
    entries.extend(inserted.into_iter().map(|chunk| SelectedChunk {
        chunk,
        provenance: Provenance::DroppedIn,
        score: score_of(chunk),
    }));
    Selection::new(entries)
}

/// Routes every query token of every head independently.
pub fn build_routing_table(
    inputs: &AttentionInputs,
    partition: &ChunkPartition,
    stream: &TokenStream,
    config: &RoutingConfig,
) -> Result<RoutingTable> {
    check_inputs(inputs, partition, stream, config)?;
    let (heads, len, dim) = (inputs.heads(), inputs.len(), inputs.dim());
    let descriptors = pool_descriptors(&inputs.k, partition)?;
    let masks: Vec<CandidateMask> = (0..partition.num_chunks())
        .map(|c| chunk_candidate_mask(c, partition, config))
        .collect();
    let seed = config.drop.map(|d| d.seed).unwrap_or(0);

    let rows = (0..heads * len)
        .into_par_iter()
        .map(|row| {
            let (h, i) = (row / len, row % len);
            let mask = &masks[partition.chunk_of(i)];
            let q = inputs.q.row(h, i);
            let scored: Vec<(usize, f64)> = mask
                .candidates
                .iter()
                .map(|&c| (c, dot(q, descriptors.descriptor(h, c))))
                .collect();
            assemble(mask, &scored, config, || {
                CounterRng::keyed(seed, DOMAIN_TOKEN, h as u64, i as u64)
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let scored_pairs: usize = (0..len)
        .map(|i| masks[partition.chunk_of(i)].candidates.len())
        .sum();
    let flops = heads as u64 * (len * dim + 2 * scored_pairs * dim) as u64;
    Ok(RoutingTable {
        heads,
        len,
        num_chunks: partition.num_chunks(),
        k: config.k,
        rows,
        flops,
    })
}

/// Chunk-level shared routing: the queries of a chunk vote with their mean
/// query, and every token in the chunk receives the same selection. A distinct
/// mode from per-token routing, never a silent substitute for it.
pub fn build_shared_routing_table(
    inputs: &AttentionInputs,
    partition: &ChunkPartition,
    stream: &TokenStream,
    config: &RoutingConfig,
) -> Result<RoutingTable> {
    check_inputs(inputs, partition, stream, config)?;
    let (heads, len, dim) = (inputs.heads(), inputs.len(), inputs.dim());
    let descriptors = pool_descriptors(&inputs.k, partition)?;
    let query_means = pool_descriptors(&inputs.q, partition)?;
    let n_chunks = partition.num_chunks();
    let seed = config.drop.map(|d| d.seed).unwrap_or(0);

    let per_chunk = (0..heads * n_chunks)
        .into_par_iter()
        .map(|row| {
            let (h, c) = (row / n_chunks, row % n_chunks);
            let mask = chunk_candidate_mask(c, partition, config);
            let q = query_means.descriptor(h, c);
            let scored: Vec<(usize, f64)> = mask
                .candidates
                .iter()
                .map(|&cand| (cand, dot(q, descriptors.descriptor(h, cand))))
                .collect();
            let sel = assemble(&mask, &scored, config, || {
                CounterRng::keyed(seed, DOMAIN_CHUNK, h as u64, c as u64)
            })?;
            Ok((sel, mask.candidates.len()))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::with_capacity(heads * len);
    for h in 0..heads {
        for i in 0..len {
            rows.push(per_chunk[h * n_chunks + partition.chunk_of(i)].0.clone());
        }
    }
    let scored_pairs: usize = per_chunk.iter().map(|(_, n)| n).sum();
    let flops = (2 * heads * len * dim + 2 * scored_pairs * dim) as u64;
    Ok(RoutingTable {
        heads,
        len,
        num_chunks: n_chunks,
        k: config.k,
        rows,
        flops,
    })
}

/// Isolated mutual routing pairs `(a, b)`, `a < b`: some query of `a` routes
/// to `b`, some query of `b` routes back to `a`, and neither chunk routes to
/// any chunk before `a`. Only `Routed` provenance counts, aggregated over heads.
pub fn detect_loop_closures(table: &RoutingTable, partition: &ChunkPartition) -> Vec<(usize, usize)> {
    let mut routes: BTreeSet<(usize, usize)> = BTreeSet::new();
    for h in 0..table.heads() {
        for i in 0..table.len() {
            let from = partition.chunk_of(i);
            for to in table.selection(h, i).with_provenance(Provenance::Routed) {
                if to != from {
                    routes.insert((from, to));
                }
            }
        }
    }
    let mut earliest_target: BTreeMap<usize, usize> = BTreeMap::new();
    for &(from, to) in &routes {
        let e = earliest_target.entry(from).or_insert(to);
        *e = (*e).min(to);
    }
    routes
        .iter()
        .filter(|&&(a, b)| a < b && routes.contains(&(b, a)))
        .filter(|&&(a, b)| earliest_target[&a] >= a && earliest_target[&b] >= a)
        .copied()
        .collect()
}

/// One row of the routing-count export.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RouteCount {
    pub head: usize,
    pub query_chunk: usize,
    pub selected_chunk: usize,
    pub count: u64,
    pub provenance: Provenance,
}

/// Number of query tokens in each chunk selecting each chunk, per head and provenance.
pub fn routing_counts(table: &RoutingTable, partition: &ChunkPartition) -> Vec<RouteCount> {
    let mut counts: BTreeMap<(usize, usize, usize, Provenance), u64> = BTreeMap::new();
    for h in 0..table.heads() {
        for i in 0..table.len() {
            let qc = partition.chunk_of(i);
            for e in table.selection(h, i).entries() {
                *counts.entry((h, qc, e.chunk, e.provenance)).or_default() += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|((head, query_chunk, selected_chunk, provenance), count)| RouteCount {
            head,
            query_chunk,
            selected_chunk,
            count,
            provenance,
        })
        .collect()
}

/// Chunk x chunk matrix of `Routed` selections summed over heads.
pub fn routed_count_matrix(counts: &[RouteCount], num_chunks: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; num_chunks]; num_chunks];
    for r in counts.iter().filter(|r| r.provenance == Provenance::Routed) {
        m[r.query_chunk][r.selected_chunk] += r.count;
    }
    m
}

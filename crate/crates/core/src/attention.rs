//! Dense and routed scaled dot-product attention, var-len packing, and the
//! fixed-routing backward pass.
//!
//! All variants share one row kernel so that a query attending the same key
//! set in the same order produces bit-identical output regardless of path.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{MocError, Result};
use crate::lattice::ChunkPartition;
use crate::router::RoutingTable;
use crate::tensor::{dot, HeadTensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionInputs {
    pub q: HeadTensor,
    pub k: HeadTensor,
    pub v: HeadTensor,
}

impl AttentionInputs {
    pub fn new(q: HeadTensor, k: HeadTensor, v: HeadTensor) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(MocError::ShapeMismatch(format!(
                "q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if q.dim() == 0 {
            return Err(MocError::ShapeMismatch("head dimension must be >= 1".into()));
        }
        for (name, t) in [("q", &q), ("k", &k), ("v", &v)] {
            if !t.is_finite() {
                return Err(MocError::NonFiniteInput(name));
            }
        }
        Ok(Self { q, k, v })
    }

    pub fn heads(&self) -> usize {
        self.q.heads()
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.q.dim()
    }

    pub fn scale(&self) -> f64 {
        1.0 / (self.dim() as f64).sqrt()
    }

    /// Restriction to a subset of tokens (kept in the given order).
    pub fn select_tokens(&self, tokens: &[usize]) -> Self {
        Self {
            q: self.q.select_tokens(tokens),
            k: self.k.select_tokens(tokens),
            v: self.v.select_tokens(tokens),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub out: HeadTensor,
    /// Log-sum-exp of the scaled scores per (head, query); `-inf` for empty rows.
    pub lse: Vec<f64>,
    /// Rows whose selected token set was empty (output left at zero).
    pub empty_rows: Vec<(usize, usize)>,
    /// QK and PV multiply-adds performed, all heads.
    pub flops: u64,
}

/// Which key set each query attends.
#[derive(Debug, Clone, Copy)]
pub enum AttentionPlan<'a> {
    Dense,
    Routed {
        table: &'a RoutingTable,
        partition: &'a ChunkPartition,
    },
}

impl<'a> AttentionPlan<'a> {
    pub fn routed(table: &'a RoutingTable, partition: &'a ChunkPartition) -> Self {
        AttentionPlan::Routed { table, partition }
    }

    fn check(&self, inputs: &AttentionInputs) -> Result<()> {
        if let AttentionPlan::Routed { table, partition } = self {
            table.check_partition(partition)?;
            if table.len() != inputs.len() || table.heads() != inputs.heads() {
                return Err(MocError::ShapeMismatch(format!(
                    "routing table is {}x{}, inputs {}x{}",
                    table.heads(),
                    table.len(),
                    inputs.heads(),
                    inputs.len()
                )));
            }
        }
        Ok(())
    }

    /// Attended token indices of `(head, query)`, ascending.
    pub fn tokens(&self, len: usize, head: usize, query: usize) -> Vec<usize> {
        match self {
            AttentionPlan::Dense => (0..len).collect(),
            AttentionPlan::Routed { table, partition } => {
                table.selection(head, query).tokens(partition).collect()
            }
        }
    }
}

/// Softmax-weighted sum over `n` keys with max subtraction. Writes the output
/// row and returns the log-sum-exp; `n == 0` leaves `out` untouched.
#[inline]
fn attend_row<'k>(
    q: &[f64],
    n: usize,
    key: impl Fn(usize) -> &'k [f64],
    value: impl Fn(usize) -> &'k [f64],
    scale: f64,
    out: &mut [f64],
) -> f64 {
    if n == 0 {
        return f64::NEG_INFINITY;
    }
    let mut scores: Vec<f64> = (0..n).map(|j| dot(q, key(j)) * scale).collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    out.fill(0.0);
    for (j, w) in scores.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(value(j)) {
            *o += w * x;
        }
    }
    let inv = 1.0 / sum;
    out.iter_mut().for_each(|o| *o *= inv);
    max + sum.ln()
}

/// Softmax weights of one query over an explicit token list.
pub fn row_weights(inputs: &AttentionInputs, head: usize, query: usize, tokens: &[usize]) -> Vec<f64> {
    let q = inputs.q.row(head, query);
    let scale = inputs.scale();
    let scores: Vec<f64> = tokens
        .iter()
        .map(|&t| dot(q, inputs.k.row(head, t)) * scale)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn evaluate(inputs: &AttentionInputs, plan: AttentionPlan<'_>) -> Result<AttentionOutput> {
    plan.check(inputs)?;
    let (heads, len, dim) = (inputs.heads(), inputs.len(), inputs.dim());
    let scale = inputs.scale();
    let mut out = HeadTensor::zeros(heads, len, dim);
    let stats: Vec<(f64, usize)> = out
        .as_mut_slice()
        .par_chunks_mut(dim)
        .enumerate()
        .map(|(row, o)| {
            let (h, i) = (row / len, row % len);
            let q = inputs.q.row(h, i);
            match plan {
                AttentionPlan::Dense => {
                    let lse = attend_row(
                        q,
                        len,
                        |j| inputs.k.row(h, j),
                        |j| inputs.v.row(h, j),
                        scale,
                        o,
                    );
                    (lse, len)
                }
                AttentionPlan::Routed { table, partition } => {
                    let tokens: Vec<usize> = table.selection(h, i).tokens(partition).collect();
                    let lse = attend_row(
                        q,
                        tokens.len(),
                        |j| inputs.k.row(h, tokens[j]),
                        |j| inputs.v.row(h, tokens[j]),
                        scale,
                        o,
                    );
                    (lse, tokens.len())
                }
            }
        })
        .collect();

    let mut empty_rows = Vec::new();
    let mut attended = 0u64;
    let mut lse = Vec::with_capacity(stats.len());
    for (row, (l, n)) in stats.into_iter().enumerate() {
        if n == 0 {
            empty_rows.push((row / len, row % len));
        }
        attended += n as u64;
        lse.push(l);
    }
    Ok(AttentionOutput {
        out,
        lse,
        empty_rows,
        flops: 4 * attended * dim as u64,
    })
}

/// Full softmax attention `softmax(QK^T / sqrt(d)) V`, per head.
pub fn dense_attention(inputs: &AttentionInputs) -> Result<AttentionOutput> {
    evaluate(inputs, AttentionPlan::Dense)
}

/// Attention restricted, per (head, query), to the union of the selected chunks.
/// Rows with nothing selected come back as zeros and are listed in `empty_rows`.
pub fn moc_attention(
    inputs: &AttentionInputs,
    table: &RoutingTable,
    partition: &ChunkPartition,
) -> Result<AttentionOutput> {
    evaluate(inputs, AttentionPlan::routed(table, partition))
}

/// Queries of one head that share an identical selected token set.
#[derive(Debug, Clone, PartialEq)]
pub struct PackGroup<'a> {
    pub head: usize,
    pub queries: &'a [usize],
    pub keys: &'a [usize],
}

/// Var-len layout of a routing table: head-major groups of queries sharing a
/// key set, with flat query / key index lists and cumulative offsets into them
/// (`cu_seqlens_q`, `cu_seqlens_k`) as a fused var-len kernel would consume.
#[derive(Debug, Clone, PartialEq)]
pub struct VarLenPack {
    heads: usize,
    len: usize,
    group_heads: Vec<usize>,
    query_index: Vec<usize>,
    key_index: Vec<usize>,
    cu_seqlens_q: Vec<usize>,
    cu_seqlens_k: Vec<usize>,
}

impl VarLenPack {
    pub fn num_groups(&self) -> usize {
        self.group_heads.len()
    }

    pub fn groups_in_head(&self, head: usize) -> usize {
        self.group_heads.iter().filter(|&&h| h == head).count()
    }

    pub fn group(&self, g: usize) -> PackGroup<'_> {
        PackGroup {
            head: self.group_heads[g],
            queries: &self.query_index[self.cu_seqlens_q[g]..self.cu_seqlens_q[g + 1]],
            keys: &self.key_index[self.cu_seqlens_k[g]..self.cu_seqlens_k[g + 1]],
        }
    }

    pub fn groups(&self) -> impl Iterator<Item = PackGroup<'_>> + '_ {
        (0..self.num_groups()).map(|g| self.group(g))
    }

    pub fn cu_seqlens_q(&self) -> &[usize] {
        &self.cu_seqlens_q
    }

    pub fn cu_seqlens_k(&self) -> &[usize] {
        &self.cu_seqlens_k
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
}

/// Groups queries by selected chunk set. Chunks are disjoint, so equal chunk
/// sets mean equal token sets. Groups are ordered by head, then by first query.
pub fn build_varlen_pack(table: &RoutingTable, partition: &ChunkPartition) -> Result<VarLenPack> {
    table.check_partition(partition)?;
    let (heads, len) = (table.heads(), table.len());
    let mut group_heads = Vec::new();
    let mut query_index = Vec::with_capacity(heads * len);
    let mut key_index = Vec::new();
    let mut cu_seqlens_q = vec![0];
    let mut cu_seqlens_k = vec![0];

    for h in 0..heads {
        let mut order: Vec<Vec<usize>> = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        let mut seen: HashMap<Vec<usize>, usize> = HashMap::new();
        for i in 0..len {
            let chunks: Vec<usize> = table.selection(h, i).chunks().collect();
            let g = *seen.entry(chunks.clone()).or_insert_with(|| {
                order.push(chunks);
                members.push(Vec::new());
                order.len() - 1
            });
            members[g].push(i);
        }
        for (chunks, queries) in order.iter().zip(members) {
            group_heads.push(h);
            query_index.extend_from_slice(&queries);
            cu_seqlens_q.push(query_index.len());
            for &c in chunks {
                key_index.extend(partition.chunk(c).range());
            }
            cu_seqlens_k.push(key_index.len());
        }
    }
    Ok(VarLenPack {
        heads,
        len,
        group_heads,
        query_index,
        key_index,
        cu_seqlens_q,
        cu_seqlens_k,
    })
}

/// (head, query, output row, log-sum-exp, attended keys)
type PackedRow = (usize, usize, Vec<f64>, f64, usize);

/// Evaluates attention group by group: each group's keys and values are
/// gathered once into contiguous buffers, then every query in the group runs
/// the shared row kernel over them.
pub fn varlen_attention(inputs: &AttentionInputs, pack: &VarLenPack) -> Result<AttentionOutput> {
    if pack.heads() != inputs.heads() || pack.len() != inputs.len() {
        return Err(MocError::ShapeMismatch(format!(
            "pack is {}x{}, inputs {}x{}",
            pack.heads(),
            pack.len(),
            inputs.heads(),
            inputs.len()
        )));
    }
    let (len, dim) = (inputs.len(), inputs.dim());
    let scale = inputs.scale();
    let per_group: Vec<Vec<PackedRow>> = (0..pack.num_groups())
        .into_par_iter()
        .map(|g| {
            let group = pack.group(g);
            let h = group.head;
            let n = group.keys.len();
            let mut kbuf = Vec::with_capacity(n * dim);
            let mut vbuf = Vec::with_capacity(n * dim);
            for &t in group.keys {
                kbuf.extend_from_slice(inputs.k.row(h, t));
                vbuf.extend_from_slice(inputs.v.row(h, t));
            }
            group
                .queries
                .iter()
                .map(|&i| {
                    let mut o = vec![0.0; dim];
                    let lse = attend_row(
                        inputs.q.row(h, i),
                        n,
                        |j| &kbuf[j * dim..(j + 1) * dim],
                        |j| &vbuf[j * dim..(j + 1) * dim],
                        scale,
                        &mut o,
                    );
                    (h, i, o, lse, n)
                })
                .collect()
        })
        .collect();

    let mut out = HeadTensor::zeros(inputs.heads(), len, dim);
    let mut lse = vec![f64::NEG_INFINITY; inputs.heads() * len];
    let mut empty_rows = Vec::new();
    let mut attended = 0u64;
    for (h, i, o, l, n) in per_group.into_iter().flatten() {
        out.row_mut(h, i).copy_from_slice(&o);
        lse[h * len + i] = l;
        attended += n as u64;
        if n == 0 {
            empty_rows.push((h, i));
        }
    }
    empty_rows.sort_unstable();
    Ok(AttentionOutput {
        out,
        lse,
        empty_rows,
        flops: 4 * attended * dim as u64,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub dq: HeadTensor,
    pub dk: HeadTensor,
    pub dv: HeadTensor,
}

/// Vector-Jacobian product of the attention output with respect to Q, K, V,
/// holding the routing fixed. Keys and values outside every selection get
/// exactly zero gradient.
pub fn attention_vjp(
    inputs: &AttentionInputs,
    plan: AttentionPlan<'_>,
    upstream: &HeadTensor,
) -> Result<Gradients> {
    plan.check(inputs)?;
    if upstream.shape() != inputs.q.shape() {
        return Err(MocError::ShapeMismatch(format!(
            "upstream {:?} vs inputs {:?}",
            upstream.shape(),
            inputs.q.shape()
        )));
    }
    let (heads, len, dim) = (inputs.heads(), inputs.len(), inputs.dim());
    let scale = inputs.scale();

    let per_head: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..heads)
        .into_par_iter()
        .map(|h| {
            let mut dq = vec![0.0; len * dim];
            let mut dk = vec![0.0; len * dim];
            let mut dv = vec![0.0; len * dim];
            for i in 0..len {
                let tokens = plan.tokens(len, h, i);
                if tokens.is_empty() {
                    continue;
                }
                let q = inputs.q.row(h, i);
                let g = upstream.row(h, i);
                let p = row_weights(inputs, h, i, &tokens);
                let dp: Vec<f64> = tokens.iter().map(|&t| dot(g, inputs.v.row(h, t))).collect();
                let mean_dp: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                let dq_row = &mut dq[i * dim..(i + 1) * dim];
                for (n, &t) in tokens.iter().enumerate() {
                    let ds = p[n] * (dp[n] - mean_dp) * scale;
                    let k = inputs.k.row(h, t);
                    for c in 0..dim {
                        dq_row[c] += ds * k[c];
                    }
                    let dk_row = &mut dk[t * dim..(t + 1) * dim];
                    for c in 0..dim {
                        dk_row[c] += ds * q[c];
                    }
                    let dv_row = &mut dv[t * dim..(t + 1) * dim];
                    for c in 0..dim {
                        dv_row[c] += p[n] * g[c];
                    }
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let mut grads = Gradients {
        dq: HeadTensor::zeros(heads, len, dim),
        dk: HeadTensor::zeros(heads, len, dim),
        dv: HeadTensor::zeros(heads, len, dim),
    };
    for (h, (dq, dk, dv)) in per_head.into_iter().enumerate() {
        grads.dq.head_mut(h).copy_from_slice(&dq);
        grads.dk.head_mut(h).copy_from_slice(&dk);
        grads.dv.head_mut(h).copy_from_slice(&dv);
    }
    Ok(grads)
}

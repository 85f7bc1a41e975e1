//! Slow, independent reference implementations used as verification oracles.
//!
//! Nothing here shares code with the production paths beyond the tensor type:
//! token sets are rebuilt by membership tests, weights are normalized before
//! the value sum, and gradients come from central finite differences.

use std::collections::HashSet;

use crate::attention::{AttentionInputs, AttentionPlan, Gradients};
use crate::lattice::ChunkPartition;
use crate::router::RoutingTable;
use crate::tensor::HeadTensor;

/// Token set of a (head, query) found by scanning every token.
pub fn token_set_by_membership(
    table: &RoutingTable,
    partition: &ChunkPartition,
    head: usize,
    query: usize,
) -> Vec<usize> {
    let chosen: HashSet<usize> = table.selection(head, query).chunks().collect();
    (0..partition.len())
        .filter(|&t| chosen.contains(&partition.chunk_of(t)))
        .collect()
}

fn naive_row(inputs: &AttentionInputs, head: usize, query: usize, tokens: &[usize]) -> Vec<f64> {
    let d = inputs.dim();
    let mut out = vec![0.0; d];
    if tokens.is_empty() {
        return out;
    }
    let scale = (d as f64).sqrt();
    let mut logits = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let mut s = 0.0;
        for c in 0..d {
            s += inputs.q.get(head, query, c) * inputs.k.get(head, t, c);
        }
        logits.push(s / scale);
    }
    let top = logits.iter().cloned().fold(f64::MIN, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = weights.iter().sum();
    for (w, &t) in weights.iter().zip(tokens) {
        let p = w / z;
        for (c, o) in out.iter_mut().enumerate() {
            *o += p * inputs.v.get(head, t, c);
        }
    }
    out
}

/// Three-loop dense attention.
pub fn naive_dense(inputs: &AttentionInputs) -> HeadTensor {
    let all: Vec<usize> = (0..inputs.len()).collect();
    naive_with(inputs, |_, _| all.clone())
}

/// Gather-then-softmax over the membership-derived token set of every query.
pub fn naive_routed(inputs: &AttentionInputs, table: &RoutingTable, partition: &ChunkPartition) -> HeadTensor {
    naive_with(inputs, |h, i| token_set_by_membership(table, partition, h, i))
}

/// One output row of [`naive_routed`].
pub fn naive_routed_row(
    inputs: &AttentionInputs,
    table: &RoutingTable,
    partition: &ChunkPartition,
    head: usize,
    query: usize,
) -> Vec<f64> {
    naive_row(inputs, head, query, &token_set_by_membership(table, partition, head, query))
}

fn naive_with(inputs: &AttentionInputs, tokens: impl Fn(usize, usize) -> Vec<usize>) -> HeadTensor {
    let (heads, len, dim) = (inputs.heads(), inputs.len(), inputs.dim());
    let mut out = HeadTensor::zeros(heads, len, dim);
    for h in 0..heads {
        for i in 0..len {
            let row = naive_row(inputs, h, i, &tokens(h, i));
            out.row_mut(h, i).copy_from_slice(&row);
        }
    }
    out
}

fn naive_plan(inputs: &AttentionInputs, plan: AttentionPlan<'_>) -> HeadTensor {
    match plan {
        AttentionPlan::Dense => naive_dense(inputs),
        AttentionPlan::Routed { table, partition } => naive_routed(inputs, table, partition),
    }
}

/// `<upstream, O>` under the reference forward pass.
pub fn scalar_loss(inputs: &AttentionInputs, plan: AttentionPlan<'_>, upstream: &HeadTensor) -> f64 {
    let out = naive_plan(inputs, plan);
    out.as_slice()
        .iter()
        .zip(upstream.as_slice())
        .map(|(a, b)| a * b)
        .sum()
}

/// Central finite differences of [`scalar_loss`] with respect to every entry
/// of Q, K and V.
pub fn finite_difference_grads(
    inputs: &AttentionInputs,
    plan: AttentionPlan<'_>,
    upstream: &HeadTensor,
    step: f64,
) -> Gradients {
    let mut grads = Gradients {
        dq: HeadTensor::zeros(inputs.heads(), inputs.len(), inputs.dim()),
        dk: HeadTensor::zeros(inputs.heads(), inputs.len(), inputs.dim()),
        dv: HeadTensor::zeros(inputs.heads(), inputs.len(), inputs.dim()),
    };
    fn pick(x: &mut AttentionInputs, which: usize) -> &mut HeadTensor {
        match which {
            0 => &mut x.q,
            1 => &mut x.k,
            _ => &mut x.v,
        }
    }
    let mut x = inputs.clone();
    for which in 0..3 {
        for idx in 0..inputs.q.as_slice().len() {
            let orig = pick(&mut x, which).as_slice()[idx];
            pick(&mut x, which).as_mut_slice()[idx] = orig + step;
            let plus = scalar_loss(&x, plan, upstream);
            pick(&mut x, which).as_mut_slice()[idx] = orig - step;
            let minus = scalar_loss(&x, plan, upstream);
            pick(&mut x, which).as_mut_slice()[idx] = orig;
            let target = match which {
                0 => &mut grads.dq,
                1 => &mut grads.dk,
                _ => &mut grads.dv,
            };
            target.as_mut_slice()[idx] = (plus - minus) / (2.0 * step);
        }
    }
    grads
}

/// Full sort, descending by score, stable by id; first `k` ids, ascending.
pub fn sorted_topk(scores: &[(usize, f64)], k: usize) -> Vec<usize> {
    let mut all = scores.to_vec();
    all.sort_by_key(|a| a.0);
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    let mut top: Vec<usize> = all.into_iter().take(k).map(|(c, _)| c).collect();
    top.sort_unstable();
    top
}

//! Hierarchical pre-selection over shot-sized blocks.
//!
//! Before inner routing, whole shots of the history are scored against the
//! mean feature of the block being generated, and only the best `M` of them
//! (plus mandatory elements such as the global caption) are kept. The inner
//! router then works on this reduced stream.

use std::ops::Range;

use crate::error::{MocError, Result};
use crate::lattice::{build_chunks, tag_boundaries, CaptionScope, ChunkPartition, TokenStream};
use crate::router::topk_select;
use crate::tensor::{dot, HeadTensor};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OuterBlock {
    pub shot_id: u32,
    pub range: Range<usize>,
}

/// History split into shot blocks, mandatory ranges, and the query block.
/// Blocks and mandatory ranges together tile `[0, query.start)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OuterPartition {
    blocks: Vec<OuterBlock>,
    mandatory: Vec<Range<usize>>,
    query: Range<usize>,
}

impl OuterPartition {
    pub fn new(blocks: Vec<OuterBlock>, mandatory: Vec<Range<usize>>, query: Range<usize>) -> Result<Self> {
        let mut pieces: Vec<Range<usize>> = blocks
            .iter()
            .map(|b| b.range.clone())
            .chain(mandatory.iter().cloned())
            .collect();
        pieces.sort_by_key(|r| r.start);
        let mut at = 0;
        for r in &pieces {
            if r.start != at || r.end <= r.start {
                return Err(MocError::InvalidConfig(format!(
                    "outer blocks do not tile the history at {at}"
                )));
            }
            at = r.end;
        }
        if at != query.start {
            return Err(MocError::InvalidConfig(format!(
                "history ends at {at} but the query block starts at {}",
                query.start
            )));
        }
        if blocks.windows(2).any(|w| w[0].range.start >= w[1].range.start) {
            return Err(MocError::InvalidConfig("blocks must be in stream order".into()));
        }
        Ok(Self {
            blocks,
            mandatory,
            query,
        })
    }

    /// One block per shot before `query_shot`; global-caption tokens become
    /// mandatory ranges. The query block is every non-global token of
    /// `query_shot` (empty, at the end, if that shot does not exist).
    pub fn by_shot(stream: &TokenStream, query_shot: u32) -> Result<Self> {
        let mut blocks: Vec<OuterBlock> = Vec::new();
        let mut mandatory: Vec<Range<usize>> = Vec::new();
        let mut query: Option<Range<usize>> = None;
        let metas = stream.metas();
        let mut t = 0;
        while t < metas.len() {
            let m = metas[t];
            let global = m.caption_scope == CaptionScope::GlobalCaption;
            let mut end = t + 1;
            while end < metas.len()
                && metas[end].shot_id == m.shot_id
                && (metas[end].caption_scope == CaptionScope::GlobalCaption) == global
            {
                end += 1;
            }
            if global {
                mandatory.push(t..end);
            } else if m.shot_id < query_shot {
                blocks.push(OuterBlock {
                    shot_id: m.shot_id,
                    range: t..end,
                });
            } else if m.shot_id == query_shot {
                query = Some(t..end);
                break;
            } else {
                query = Some(t..t);
                break;
            }
            t = end;
        }
        let query = query.unwrap_or(stream.len()..stream.len());
        // only mandatory ranges in the history belong to the outer partition
        mandatory.retain(|r| r.end <= query.start);
        Self::new(blocks, mandatory, query)
    }

    pub fn blocks(&self) -> &[OuterBlock] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn mandatory(&self) -> &[Range<usize>] {
        &self.mandatory
    }

    pub fn query(&self) -> &Range<usize> {
        &self.query
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OuterSelection {
    /// Block relevance, summed over heads.
    pub scores: Vec<f64>,
    /// Selected block ids, ascending.
    pub selected: Vec<usize>,
    pub selected_ranges: Vec<Range<usize>>,
    pub mandatory: Vec<Range<usize>>,
    pub query: Range<usize>,
}

fn mean_rows(t: &HeadTensor, head: usize, range: Range<usize>) -> Vec<f64> {
    let mut acc = vec![0.0; t.dim()];
    let n = range.len();
    for i in range {
        for (a, x) in acc.iter_mut().zip(t.row(head, i)) {
            *a += x;
        }
    }
    acc.iter_mut().for_each(|a| *a /= n as f64);
    acc
}

/// Scores each block by `sum_h <mean(query_h), mean(block_h)>` and keeps the
/// `min(M, P)` best; ties go to the lower block id.
pub fn outer_route(
    context_keys: &HeadTensor,
    query_features: &HeadTensor,
    blocks: &OuterPartition,
    m: usize,
) -> Result<OuterSelection> {
    if m == 0 {
        return Err(MocError::InvalidConfig("M must be >= 1".into()));
    }
    if context_keys.heads() != query_features.heads() || context_keys.dim() != query_features.dim() {
        return Err(MocError::ShapeMismatch(format!(
            "context {:?} vs query block {:?}",
            context_keys.shape(),
            query_features.shape()
        )));
    }
    if query_features.is_empty() {
        return Err(MocError::ShapeMismatch("query block is empty".into()));
    }
    if let Some(b) = blocks.blocks().iter().find(|b| b.range.end > context_keys.len()) {
        return Err(MocError::ShapeMismatch(format!(
            "block ending at {} exceeds context of {} tokens",
            b.range.end,
            context_keys.len()
        )));
    }
    let heads = context_keys.heads();
    let query_means: Vec<Vec<f64>> = (0..heads)
        .map(|h| mean_rows(query_features, h, 0..query_features.len()))
        .collect();
    let scores: Vec<f64> = blocks
        .blocks()
        .iter()
        .map(|b| {
            (0..heads)
                .map(|h| dot(&query_means[h], &mean_rows(context_keys, h, b.range.clone())))
                .sum()
        })
        .collect();
    let ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    let selected = topk_select(&ranked, m);
    let selected_ranges = selected
        .iter()
        .map(|&j| blocks.blocks()[j].range.clone())
        .collect();
    Ok(OuterSelection {
        scores,
        selected,
        selected_ranges,
        mandatory: blocks.mandatory().to_vec(),
        query: blocks.query().clone(),
    })
}

/// Reduced stream plus index maps in both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct CuratedContext {
    pub stream: TokenStream,
    pub partition: ChunkPartition,
    pub new_to_old: Vec<usize>,
    pub old_to_new: Vec<Option<usize>>,
}

impl CuratedContext {
    pub fn len(&self) -> usize {
        self.new_to_old.len()
    }

    pub fn is_empty(&self) -> bool {
        self.new_to_old.is_empty()
    }
}

/// Keeps the mandatory ranges and selected blocks (and, with `include_query`,
/// the query block) in their original order, re-tags the boundaries, and
/// re-chunks with the original target size.
pub fn curate_context(
    stream: &TokenStream,
    partition: &ChunkPartition,
    selection: &OuterSelection,
    include_query: bool,
) -> Result<CuratedContext> {
    let mut keep: Vec<Range<usize>> = selection
        .mandatory
        .iter()
        .chain(&selection.selected_ranges)
        .cloned()
        .collect();
    if include_query && !selection.query.is_empty() {
        keep.push(selection.query.clone());
    }
    keep.sort_by_key(|r| r.start);
    if let Some(r) = keep.iter().find(|r| r.end > stream.len()) {
        return Err(MocError::IndexOutOfRange {
            index: r.end,
            len: stream.len(),
        });
    }
    let new_to_old: Vec<usize> = keep.into_iter().flatten().collect();
    let mut old_to_new = vec![None; stream.len()];
    let metas = new_to_old
        .iter()
        .enumerate()
        .map(|(new, &old)| {
            old_to_new[old] = Some(new);
            let mut m = *stream.meta(old);
            m.index = new;
            m
        })
        .collect();
    let curated = tag_boundaries(metas)?;
    let chunks = build_chunks(&curated, partition.target_size())?;
    Ok(CuratedContext {
        stream: curated,
        partition: chunks,
        new_to_old,
        old_to_new,
    })
}

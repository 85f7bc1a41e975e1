#![allow(dead_code)]

use std::collections::BTreeSet;

use moc_core::lattice::layout_metas;
use moc_core::{
    build_chunks, tag_boundaries, AttentionInputs, CaptionScope, ChunkPartition, HeadTensor,
    Modality, ShotLayout, TokenStream,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_tensor(r: &mut ChaCha8Rng, heads: usize, len: usize, dim: usize) -> HeadTensor {
    HeadTensor::from_fn(heads, len, dim, |_, _, _| r.random_range(-1.0..1.0))
}

pub fn random_inputs(r: &mut ChaCha8Rng, heads: usize, len: usize, dim: usize) -> AttentionInputs {
    let q = uniform_tensor(r, heads, len, dim);
    let k = uniform_tensor(r, heads, len, dim);
    let v = uniform_tensor(r, heads, len, dim);
    AttentionInputs::new(q, k, v).unwrap()
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub global_caption: usize,
    pub shots: Vec<ShotLayout>,
    pub caption_first: bool,
    pub target: usize,
}

impl Layout {
    pub fn stream(&self) -> TokenStream {
        tag_boundaries(layout_metas(self.global_caption, &self.shots, self.caption_first)).unwrap()
    }

    pub fn build(&self) -> (TokenStream, ChunkPartition) {
        let s = self.stream();
        let p = build_chunks(&s, self.target).unwrap();
        (s, p)
    }

    pub fn len(&self) -> usize {
        self.global_caption
            + self
                .shots
                .iter()
                .map(|s| s.caption_tokens + s.n_frames * s.tokens_per_frame)
                .sum::<usize>()
    }
}

pub fn random_layout(r: &mut ChaCha8Rng, max_shots: usize, max_len: usize) -> Layout {
    loop {
        let n_shots = r.random_range(1..=max_shots);
        let shots = (0..n_shots)
            .map(|_| ShotLayout {
                n_frames: r.random_range(1..=4),
                tokens_per_frame: r.random_range(1..=12),
                caption_tokens: r.random_range(0..=4),
            })
            .collect();
        let layout = Layout {
            global_caption: r.random_range(0..=4),
            shots,
            caption_first: r.random_bool(0.5),
            target: r.random_range(1..=24),
        };
        if layout.len() <= max_len {
            return layout;
        }
    }
}

pub fn layout_strategy() -> impl Strategy<Value = Layout> {
    let shot = (1usize..=4, 1usize..=8, 0usize..=3).prop_map(|(n_frames, tokens_per_frame, caption_tokens)| {
        ShotLayout {
            n_frames,
            tokens_per_frame,
            caption_tokens,
        }
    });
    (
        0usize..=3,
        prop::collection::vec(shot, 1..=4),
        any::<bool>(),
        1usize..=20,
    )
        .prop_map(|(global_caption, shots, caption_first, target)| Layout {
            global_caption,
            shots,
            caption_first,
            target,
        })
}

/// Random selections: each chunk joins a row with probability `density`,
/// tagged with a random provenance. Rows may come out empty.
pub fn random_table(
    r: &mut ChaCha8Rng,
    heads: usize,
    partition: &ChunkPartition,
    density: f64,
) -> moc_core::RoutingTable {
    use moc_core::router::SelectedChunk;
    use moc_core::{Provenance, RoutingTable, Selection};
    let c = partition.num_chunks();
    let rows = (0..heads * partition.len())
        .map(|_| {
            let mut entries = Vec::new();
            for chunk in 0..c {
                if r.random_bool(density) {
                    entries.push(SelectedChunk {
                        chunk,
                        provenance: [Provenance::Mandatory, Provenance::Routed, Provenance::DroppedIn]
                            [r.random_range(0..3)],
                        score: None,
                    });
                }
            }
            Selection::new(entries).unwrap()
        })
        .collect();
    RoutingTable::from_rows(heads, partition.len(), c, c, rows).unwrap()
}

fn segment_of(s: &TokenStream, t: usize) -> (u32, Modality, u32, bool) {
    let m = s.meta(t);
    (m.shot_id, m.modality, m.frame_id, m.caption_scope == CaptionScope::GlobalCaption)
}

/// Independent structural checks, derived from the metadata alone.
pub fn check_partition(s: &TokenStream, p: &ChunkPartition, target: usize) {
    let mut at = 0;
    for (id, c) in p.chunks().iter().enumerate() {
        assert_eq!(c.chunk_id, id);
        assert_eq!(c.start, at, "chunks must tile the stream");
        assert!(c.end > c.start);
        at = c.end;
        let first = s.meta(c.start);
        for t in c.range() {
            let m = s.meta(t);
            assert_eq!(m.shot_id, first.shot_id);
            assert_eq!(m.modality, first.modality);
            assert_eq!(m.caption_scope, first.caption_scope);
            assert_eq!(p.chunk_of(t), id);
        }
        // chunk edges sit on segment edges
        if c.start > 0 {
            assert_ne!(segment_of(s, c.start - 1), segment_of(s, c.start));
        }
        if c.end < s.len() {
            assert_ne!(segment_of(s, c.end - 1), segment_of(s, c.end));
        }
        if c.kind == Modality::Video {
            let frames: BTreeSet<u32> = c.range().map(|t| s.meta(t).frame_id).collect();
            assert!(c.token_count() <= target || frames.len() == 1);
        }
    }
    assert_eq!(at, s.len());
    assert_eq!(p.offsets().len(), p.num_chunks() + 1);
    assert_eq!(*p.offsets().last().unwrap(), s.len());
}


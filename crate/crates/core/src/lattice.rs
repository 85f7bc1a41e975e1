//! Flattened multi-modal token stream, boundary tagging, and content-aligned chunking.
//!
//! A stream interleaves caption (text) tokens with video tokens laid out frame
//! by frame. [`tag_boundaries`] derives the frame / shot / modality prefix
//! tables in one ordered scan, and [`build_chunks`] packs whole frames (or whole
//! caption segments) into variable-length chunks that never straddle a shot or
//! modality boundary.

use serde::{Deserialize, Serialize};

use crate::error::{MocError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Video,
}

/// Caption role of a token. `GlobalCaption` marks the scene-level prompt; its
/// `shot_id` is that of the shot it precedes, so shot ids stay non-decreasing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaptionScope {
    GlobalCaption,
    ShotCaption,
    NotCaption,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub index: usize,
    pub modality: Modality,
    pub shot_id: u32,
    pub frame_id: u32,
    /// Patch position inside the frame. Video only; carried, never used for routing.
    pub spatial: Option<(u32, u32)>,
    pub caption_scope: CaptionScope,
}

impl TokenMeta {
    pub fn video(index: usize, shot_id: u32, frame_id: u32, spatial: (u32, u32)) -> Self {
        Self {
            index,
            modality: Modality::Video,
            shot_id,
            frame_id,
            spatial: Some(spatial),
            caption_scope: CaptionScope::NotCaption,
        }
    }

    pub fn text(index: usize, shot_id: u32, frame_id: u32, scope: CaptionScope) -> Self {
        Self {
            index,
            modality: Modality::Text,
            shot_id,
            frame_id,
            spatial: None,
            caption_scope: scope,
        }
    }

    /// Key whose changes delimit frame segments (and caption segments for text).
    fn segment_key(&self) -> (u32, Modality, CaptionScope, u32) {
        (self.shot_id, self.modality, self.caption_scope, self.frame_id)
    }
}

/// Token metadata plus the boundary prefix tables. Every table starts at 0 and
/// is strictly increasing; appending `L` gives cumulative-length offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    metas: Vec<TokenMeta>,
    frame_starts: Vec<usize>,
    shot_starts: Vec<usize>,
    modality_run_starts: Vec<usize>,
}

impl TokenStream {
    #[inline]
    pub fn len(&self) -> usize {
        self.metas.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn metas(&self) -> &[TokenMeta] {
        &self.metas
    }

    #[inline]
    pub fn meta(&self, index: usize) -> &TokenMeta {
        &self.metas[index]
    }

    pub fn frame_starts(&self) -> &[usize] {
        &self.frame_starts
    }

    pub fn shot_starts(&self) -> &[usize] {
        &self.shot_starts
    }

    pub fn modality_run_starts(&self) -> &[usize] {
        &self.modality_run_starts
    }

    /// Frame segments as half-open ranges, in order.
    pub fn frame_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        ranges(&self.frame_starts, self.len())
    }

    pub fn shot_ranges(&self) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
        ranges(&self.shot_starts, self.len())
    }

    pub fn num_shots(&self) -> usize {
        self.shot_starts.len()
    }

    /// Largest token count of any video frame segment.
    pub fn max_frame_tokens(&self) -> usize {
        self.frame_ranges()
            .filter(|r| self.metas[r.start].modality == Modality::Video)
            .map(|r| r.len())
            .max()
            .unwrap_or(0)
    }
}

fn ranges(starts: &[usize], len: usize) -> impl Iterator<Item = std::ops::Range<usize>> + '_ {
    starts.iter().enumerate().map(move |(n, &s)| {
        let e = starts.get(n + 1).copied().unwrap_or(len);
        s..e
    })
}

/// Validates `metas` and derives the boundary tables in a single scan.
pub fn tag_boundaries(metas: Vec<TokenMeta>) -> Result<TokenStream> {
    if metas.is_empty() {
        return Err(MocError::EmptyStream);
    }
    let mut frame_starts = vec![0];
    let mut shot_starts = vec![0];
    let mut modality_run_starts = vec![0];

    for (i, m) in metas.iter().enumerate() {
        if m.index != i {
            return Err(MocError::InvalidMeta {
                index: i,
                reason: format!("carries index {}", m.index),
            });
        }
        let is_text = m.modality == Modality::Text;
        if is_text == (m.caption_scope == CaptionScope::NotCaption) {
            return Err(MocError::InvalidMeta {
                index: i,
                reason: "caption scope must be set exactly for text tokens".into(),
            });
        }
        if is_text && m.spatial.is_some() {
            return Err(MocError::InvalidMeta {
                index: i,
                reason: "text tokens carry no spatial position".into(),
            });
        }
        if i == 0 {
            continue;
        }
        let prev = &metas[i - 1];
        if m.shot_id < prev.shot_id {
            return Err(MocError::NonMonotonicStream {
                index: i,
                what: "shot_id decreases",
            });
        }
        if m.shot_id != prev.shot_id {
            shot_starts.push(i);
        }
        if m.modality != prev.modality {
            modality_run_starts.push(i);
        }
        if m.segment_key() != prev.segment_key() {
            frame_starts.push(i);
        }
    }

    // frame order is only checked between video tokens of the same shot
    let mut last_video: Option<(u32, u32)> = None;
    for (i, m) in metas.iter().enumerate() {
        if m.modality != Modality::Video {
            continue;
        }
        if let Some((shot, frame)) = last_video {
            if shot == m.shot_id && m.frame_id < frame {
                return Err(MocError::NonMonotonicStream {
                    index: i,
                    what: "frame_id decreases within a shot",
                });
            }
        }
        last_video = Some((m.shot_id, m.frame_id));
    }

    Ok(TokenStream {
        metas,
        frame_starts,
        shot_starts,
        modality_run_starts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub chunk_id: usize,
    pub start: usize,
    pub end: usize,
    pub kind: Modality,
    pub shot_id: u32,
    pub scope: CaptionScope,
}

impl Chunk {
    #[inline]
    pub fn token_count(&self) -> usize {
        self.end - self.start
    }

    #[inline]
    pub fn range(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }

    #[inline]
    pub fn is_text(&self) -> bool {
        self.kind == Modality::Text
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkPartition {
    chunks: Vec<Chunk>,
    chunk_of_token: Vec<u32>,
    /// `cu_seqlens`-style offsets: chunk `c` covers `offsets[c]..offsets[c + 1]`.
    offsets: Vec<usize>,
    target_size: usize,
}

impl ChunkPartition {
    /// Builds a partition from explicit chunks; they must tile `[0, L)` in order.
    pub fn from_chunks(mut chunks: Vec<Chunk>, target_size: usize) -> Result<Self> {
        if chunks.is_empty() {
            return Err(MocError::EmptyStream);
        }
        let mut expected = 0;
        for (id, c) in chunks.iter_mut().enumerate() {
            if c.start != expected || c.end <= c.start {
                return Err(MocError::InvalidConfig(format!(
                    "chunk {id} [{}, {}) does not continue the tiling at {expected}",
                    c.start, c.end
                )));
            }
            c.chunk_id = id;
            expected = c.end;
        }
        let mut chunk_of_token = vec![0u32; expected];
        let mut offsets = Vec::with_capacity(chunks.len() + 1);
        for c in &chunks {
            offsets.push(c.start);
            chunk_of_token[c.range()].fill(c.chunk_id as u32);
        }
        offsets.push(expected);
        Ok(Self {
            chunks,
            chunk_of_token,
            offsets,
            target_size,
        })
    }

    pub fn chunks(&self) -> &[Chunk] {
        &self.chunks
    }

    #[inline]
    pub fn chunk(&self, id: usize) -> &Chunk {
        &self.chunks[id]
    }

    #[inline]
    pub fn num_chunks(&self) -> usize {
        self.chunks.len()
    }

    /// Sequence length covered.
    #[inline]
    pub fn len(&self) -> usize {
        self.chunk_of_token.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.chunk_of_token.is_empty()
    }

    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn target_size(&self) -> usize {
        self.target_size
    }

    /// Chunk id of a token; unchecked beyond the slice bound.
    #[inline]
    pub fn chunk_of(&self, token: usize) -> usize {
        self.chunk_of_token[token] as usize
    }

    pub fn lookup(&self, token: usize) -> Result<usize> {
        chunk_lookup(self, token)
    }

    /// Ids of all text chunks, ascending.
    pub fn text_chunks(&self) -> Vec<usize> {
        self.chunks
            .iter()
            .filter(|c| c.is_text())
            .map(|c| c.chunk_id)
            .collect()
    }

    /// Ids of the chunks belonging to `shot_id`, ascending.
    pub fn shot_chunks(&self, shot_id: u32) -> Vec<usize> {
        self.chunks
            .iter()
            .filter(|c| c.shot_id == shot_id)
            .map(|c| c.chunk_id)
            .collect()
    }

    /// Checks tiling, homogeneity and frame alignment against `stream`.
    pub fn validate(&self, stream: &TokenStream) -> Result<()> {
        if self.len() != stream.len() {
            return Err(MocError::ShapeMismatch(format!(
                "partition covers {} tokens, stream has {}",
                self.len(),
                stream.len()
            )));
        }
        let frame_starts = stream.frame_starts();
        let mut expected = 0;
        for c in &self.chunks {
            if c.start != expected || c.end <= c.start {
                return Err(MocError::InvalidConfig(format!(
                    "chunk {} breaks the tiling",
                    c.chunk_id
                )));
            }
            expected = c.end;
            for t in c.range() {
                let m = stream.meta(t);
                if m.modality != c.kind || m.shot_id != c.shot_id {
                    return Err(MocError::InvalidConfig(format!(
                        "chunk {} mixes shots or modalities at token {t}",
                        c.chunk_id
                    )));
                }
                if self.chunk_of(t) != c.chunk_id {
                    return Err(MocError::InvalidConfig(format!(
                        "token {t} maps to chunk {} but lies in chunk {}",
                        self.chunk_of(t),
                        c.chunk_id
                    )));
                }
            }
            if c.kind == Modality::Video {
                for b in [c.start, c.end] {
                    if b != stream.len() && frame_starts.binary_search(&b).is_err() {
                        return Err(MocError::InvalidConfig(format!(
                            "video chunk {} edge {b} is not a frame boundary",
                            c.chunk_id
                        )));
                    }
                }
            }
        }
        if expected != stream.len() {
            return Err(MocError::InvalidConfig("chunks do not cover the stream".into()));
        }
        Ok(())
    }
}

/// Greedy frame-aligned packing.
///
/// Within every maximal (shot, modality) run, video frames are accumulated
/// left to right until the next frame would push the chunk past `target_size`;
/// a single frame larger than the target becomes its own chunk. Each caption
/// segment becomes exactly one text chunk.
pub fn build_chunks(stream: &TokenStream, target_size: usize) -> Result<ChunkPartition> {
    if target_size == 0 {
        return Err(MocError::InvalidConfig("target chunk size must be >= 1".into()));
    }
    let metas = stream.metas();
    let mut chunks: Vec<Chunk> = Vec::new();
    let push = |chunks: &mut Vec<Chunk>, start: usize, end: usize| {
        let m = &metas[start];
        chunks.push(Chunk {
            chunk_id: chunks.len(),
            start,
            end,
            kind: m.modality,
            shot_id: m.shot_id,
            scope: m.caption_scope,
        });
    };

    let mut open: Option<(usize, usize)> = None;
    for frame in stream.frame_ranges() {
        let m = &metas[frame.start];
        let continues_run = open.is_some_and(|(s, _)| {
            let head = &metas[s];
            head.shot_id == m.shot_id && head.modality == m.modality
        });
        match m.modality {
            Modality::Text => {
                if let Some((s, e)) = open.take() {
                    push(&mut chunks, s, e);
                }
                let same_caption = chunks.last().is_some_and(|c| {
                    c.end == frame.start
                        && c.kind == Modality::Text
                        && c.shot_id == m.shot_id
                        && c.scope == m.caption_scope
                });
                if same_caption {
                    // caption split by a frame_id change only: still one segment
                    chunks.last_mut().unwrap().end = frame.end;
                } else {
                    push(&mut chunks, frame.start, frame.end);
                }
            }
            Modality::Video => match open {
                Some((s, e)) if continues_run && e - s + frame.len() <= target_size => {
                    open = Some((s, frame.end));
                }
                Some((s, e)) => {
                    push(&mut chunks, s, e);
                    open = Some((frame.start, frame.end));
                }
                None => open = Some((frame.start, frame.end)),
            },
        }
    }
    if let Some((s, e)) = open {
        push(&mut chunks, s, e);
    }
    ChunkPartition::from_chunks(chunks, target_size)
}

pub fn chunk_lookup(partition: &ChunkPartition, token_index: usize) -> Result<usize> {
    if token_index >= partition.len() {
        return Err(MocError::IndexOutOfRange {
            index: token_index,
            len: partition.len(),
        });
    }
    Ok(partition.chunk_of(token_index))
}

/// Shape of one shot in a generated stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShotLayout {
    pub n_frames: usize,
    pub tokens_per_frame: usize,
    pub caption_tokens: usize,
}

/// Lays out token metadata for a scene: the global caption first, then each
/// shot's caption and frames. `caption_first` places a shot's caption before
/// its video tokens; otherwise after them.
pub fn layout_metas(
    global_caption_tokens: usize,
    shots: &[ShotLayout],
    caption_first: bool,
) -> Vec<TokenMeta> {
    let mut metas = Vec::new();
    let mut frame = 0u32;
    for _ in 0..global_caption_tokens {
        metas.push(TokenMeta::text(metas.len(), 0, 0, CaptionScope::GlobalCaption));
    }
    for (shot, layout) in shots.iter().enumerate() {
        let shot = shot as u32;
        let first_frame = frame;
        let last_frame = frame + (layout.n_frames.max(1) as u32) - 1;
        let width = (layout.tokens_per_frame as f64).sqrt().ceil().max(1.0) as usize;
        let caption = |metas: &mut Vec<TokenMeta>, at: u32| {
            for _ in 0..layout.caption_tokens {
                metas.push(TokenMeta::text(metas.len(), shot, at, CaptionScope::ShotCaption));
            }
        };
        if caption_first {
            caption(&mut metas, first_frame);
        }
        for f in 0..layout.n_frames {
            for p in 0..layout.tokens_per_frame {
                let pos = ((p / width) as u32, (p % width) as u32);
                metas.push(TokenMeta::video(metas.len(), shot, first_frame + f as u32, pos));
            }
        }
        if !caption_first {
            caption(&mut metas, last_frame);
        }
        frame += layout.n_frames as u32;
    }
    metas
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform_video(frames: usize, per_frame: usize) -> TokenStream {
        let layout = [ShotLayout {
            n_frames: frames,
            tokens_per_frame: per_frame,
            caption_tokens: 0,
        }];
        tag_boundaries(layout_metas(0, &layout, true)).unwrap()
    }

    #[test]
    fn single_shot_two_frames() {
        let s = uniform_video(2, 3);
        assert_eq!(s.shot_starts(), &[0]);
        assert_eq!(s.frame_starts(), &[0, 3]);
        assert_eq!(s.modality_run_starts(), &[0]);
    }

    #[test]
    fn interleaved_captions_and_video() {
        // text(2, global) + video(4, shot 0) + text(2, shot 1) + video(4, shot 1)
        let mut metas = Vec::new();
        for _ in 0..2 {
            metas.push(TokenMeta::text(metas.len(), 0, 0, CaptionScope::GlobalCaption));
        }
        for p in 0..4 {
            metas.push(TokenMeta::video(metas.len(), 0, 0, (0, p)));
        }
        for _ in 0..2 {
            metas.push(TokenMeta::text(metas.len(), 1, 1, CaptionScope::ShotCaption));
        }
        for p in 0..4 {
            metas.push(TokenMeta::video(metas.len(), 1, 1, (0, p)));
        }
        let s = tag_boundaries(metas).unwrap();
        assert_eq!(s.modality_run_starts(), &[0, 2, 6, 8]);
        assert_eq!(s.shot_starts(), &[0, 6]);
        assert_eq!(s.frame_starts(), &[0, 2, 6, 8]);
    }

    #[test]
    fn decreasing_shot_is_rejected() {
        let metas = [0u32, 1, 0]
            .iter()
            .enumerate()
            .map(|(i, &s)| TokenMeta::video(i, s, i as u32, (0, 0)))
            .collect();
        assert!(matches!(
            tag_boundaries(metas),
            Err(MocError::NonMonotonicStream { index: 2, .. })
        ));
    }

    #[test]
    fn decreasing_frame_is_rejected() {
        let metas = vec![
            TokenMeta::video(0, 0, 1, (0, 0)),
            TokenMeta::video(1, 0, 0, (0, 0)),
        ];
        assert!(matches!(
            tag_boundaries(metas),
            Err(MocError::NonMonotonicStream { .. })
        ));
    }

    #[test]
    fn empty_stream_is_rejected() {
        assert_eq!(tag_boundaries(Vec::new()), Err(MocError::EmptyStream));
    }

    #[test]
    fn scope_must_match_modality() {
        let mut m = TokenMeta::video(0, 0, 0, (0, 0));
        m.caption_scope = CaptionScope::ShotCaption;
        assert!(matches!(
            tag_boundaries(vec![m]),
            Err(MocError::InvalidMeta { .. })
        ));
    }

    #[test]
    fn greedy_packs_two_frames_per_chunk() {
        let s = uniform_video(8, 100);
        let p = build_chunks(&s, 256).unwrap();
        assert_eq!(p.num_chunks(), 4);
        assert!(p.chunks().iter().all(|c| c.token_count() == 200));
        p.validate(&s).unwrap();
    }

    #[test]
    fn unit_target_gives_one_chunk_per_frame_and_caption() {
        let layout = [
            ShotLayout {
                n_frames: 3,
                tokens_per_frame: 4,
                caption_tokens: 5,
            },
            ShotLayout {
                n_frames: 2,
                tokens_per_frame: 4,
                caption_tokens: 2,
            },
        ];
        let s = tag_boundaries(layout_metas(3, &layout, true)).unwrap();
        let p = build_chunks(&s, 1).unwrap();
        // global caption, caption 0, 3 frames, caption 1, 2 frames
        assert_eq!(p.num_chunks(), 1 + 1 + 3 + 1 + 2);
        let counts: Vec<_> = p.chunks().iter().map(Chunk::token_count).collect();
        assert_eq!(counts, vec![3, 5, 4, 4, 4, 2, 4, 4]);
        p.validate(&s).unwrap();
    }

    #[test]
    fn oversized_frame_is_its_own_chunk() {
        let s = uniform_video(1, 300);
        let p = build_chunks(&s, 256).unwrap();
        assert_eq!(p.num_chunks(), 1);
        assert_eq!(p.chunk(0).token_count(), 300);
    }

    #[test]
    fn zero_target_is_rejected() {
        let s = uniform_video(1, 3);
        assert!(build_chunks(&s, 0).is_err());
    }

    #[test]
    fn lookup_hits_the_containing_chunk() {
        let s = uniform_video(2, 4);
        let p = build_chunks(&s, 4).unwrap();
        assert_eq!(p.num_chunks(), 2);
        assert_eq!(chunk_lookup(&p, 5), Ok(1));
        assert_eq!(chunk_lookup(&p, 0), Ok(0));
        assert_eq!(
            chunk_lookup(&p, 8),
            Err(MocError::IndexOutOfRange { index: 8, len: 8 })
        );
    }

    #[test]
    fn captions_after_video_are_supported() {
        let layout = [ShotLayout {
            n_frames: 2,
            tokens_per_frame: 2,
            caption_tokens: 3,
        }];
        let s = tag_boundaries(layout_metas(0, &layout, false)).unwrap();
        assert_eq!(s.modality_run_starts(), &[0, 4]);
        let p = build_chunks(&s, 100).unwrap();
        assert_eq!(p.num_chunks(), 2);
        assert!(p.chunk(1).is_text());
    }

    #[test]
    fn chunks_do_not_cross_shots() {
        let layout = [
            ShotLayout {
                n_frames: 2,
                tokens_per_frame: 3,
                caption_tokens: 0,
            };
            3
        ];
        let s = tag_boundaries(layout_metas(0, &layout, true)).unwrap();
        let p = build_chunks(&s, 1000).unwrap();
        assert_eq!(p.num_chunks(), 3);
        assert_eq!(p.shot_chunks(1), vec![1]);
    }
}

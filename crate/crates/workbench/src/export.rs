//! CSV artifacts: token metadata, chunks, tensors, routing counts.

use std::io::{Read, Write};

use anyhow::{bail, Context, Result};
use moc_core::router::RouteCount;
use moc_core::{CaptionScope, ChunkPartition, HeadTensor, Modality, Provenance, TokenStream};
use serde::{Deserialize, Serialize};

fn modality_name(m: Modality) -> &'static str {
    match m {
        Modality::Text => "text",
        Modality::Video => "video",
    }
}

fn scope_name(s: CaptionScope) -> &'static str {
    match s {
        CaptionScope::GlobalCaption => "global",
        CaptionScope::ShotCaption => "shot",
        CaptionScope::NotCaption => "",
    }
}

pub fn write_tokens<W: Write>(out: W, stream: &TokenStream) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "modality", "shot_id", "frame_id", "row", "col", "caption_scope"])?;
    for m in stream.metas() {
        let (row, col) = match m.spatial {
            Some((r, c)) => (r.to_string(), c.to_string()),
            None => (String::new(), String::new()),
        };
        w.write_record([
            m.index.to_string(),
            modality_name(m.modality).to_string(),
            m.shot_id.to_string(),
            m.frame_id.to_string(),
            row,
            col,
            scope_name(m.caption_scope).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_chunks<W: Write>(out: W, partition: &ChunkPartition) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["chunk_id", "start", "end", "kind", "shot_id", "caption_scope", "token_count"])?;
    for c in partition.chunks() {
        w.write_record([
            c.chunk_id.to_string(),
            c.start.to_string(),
            c.end.to_string(),
            modality_name(c.kind).to_string(),
            c.shot_id.to_string(),
            scope_name(c.scope).to_string(),
            c.token_count().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// One row per (head, token): `head, token, c0 .. c{d-1}`.
pub fn write_tensor<W: Write>(out: W, t: &HeadTensor) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["head".to_string(), "token".to_string()];
    header.extend((0..t.dim()).map(|c| format!("c{c}")));
    w.write_record(&header)?;
    for h in 0..t.heads() {
        for i in 0..t.len() {
            let mut rec = vec![h.to_string(), i.to_string()];
            rec.extend(t.row(h, i).iter().map(|x| format!("{x:e}")));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RouteCountRecord {
    head: usize,
    query_chunk: usize,
    selected_chunk: usize,
    count: u64,
    provenance: String,
}

pub fn write_route_counts<W: Write>(out: W, counts: &[RouteCount]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for c in counts {
        w.serialize(RouteCountRecord {
            head: c.head,
            query_chunk: c.query_chunk,
            selected_chunk: c.selected_chunk,
            count: c.count,
            provenance: c.provenance.as_str().to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_route_counts<R: Read>(input: R) -> Result<Vec<RouteCount>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (line, rec) in r.deserialize::<RouteCountRecord>().enumerate() {
        let rec = rec.with_context(|| format!("routing CSV row {}", line + 1))?;
        let Some(provenance) = Provenance::parse(&rec.provenance) else {
            bail!("routing CSV row {}: unknown provenance `{}`", line + 1, rec.provenance);
        };
        out.push(RouteCount {
            head: rec.head,
            query_chunk: rec.query_chunk,
            selected_chunk: rec.selected_chunk,
            count: rec.count,
            provenance,
        });
    }
    Ok(out)
}

/// Square count matrix with a `query_chunk` column followed by one column per
/// selected chunk.
pub fn write_matrix<W: Write>(out: W, m: &[Vec<u64>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["query_chunk".to_string()];
    header.extend((0..m.len()).map(|c| c.to_string()));
    w.write_record(&header)?;
    for (q, row) in m.iter().enumerate() {
        let mut rec = vec![q.to_string()];
        rec.extend(row.iter().map(u64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

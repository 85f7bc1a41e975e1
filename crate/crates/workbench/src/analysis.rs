//! Routing statistics aggregated by shot.

use moc_core::{ChunkPartition, Provenance, RoutingTable};

/// `Routed` selections made by queries of `query_shot`, summed over heads and
/// bucketed by the shot of the selected chunk.
pub fn routed_counts_by_shot(table: &RoutingTable, partition: &ChunkPartition, query_shot: u32) -> Vec<u64> {
    let n_shots = partition
        .chunks()
        .iter()
        .map(|c| c.shot_id as usize + 1)
        .max()
        .unwrap_or(0);
    let mut counts = vec![0u64; n_shots];
    for h in 0..table.heads() {
        for i in 0..table.len() {
            if partition.chunk(partition.chunk_of(i)).shot_id != query_shot {
                continue;
            }
            for c in table.selection(h, i).with_provenance(Provenance::Routed) {
                counts[partition.chunk(c).shot_id as usize] += 1;
            }
        }
    }
    counts
}

/// The earlier shot with the strictly largest count, if there is a unique one.
pub fn strongest_earlier_shot(counts: &[u64], target: usize) -> Option<usize> {
    let earlier = &counts[..target.min(counts.len())];
    let max = *earlier.iter().max()?;
    let mut at = earlier.iter().enumerate().filter(|(_, &c)| c == max);
    let (best, _) = at.next()?;
    match at.next() {
        Some(_) => None,
        None => Some(best),
    }
}

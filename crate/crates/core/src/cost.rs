//! Per-head FLOPs accounting for dense and routed attention, plus sparsity
//! measured from an actual routing table.
//!
//! Routed cost is `L d` (mean pooling) + `2 L C d` (one inner product per
//! query-chunk pair) + `4 L k m d` (QK and PV over the `k` selected chunks of
//! average length `m`). Dense cost is `4 L^2 d`.

use serde::{Deserialize, Serialize};

use crate::lattice::ChunkPartition;
use crate::router::{Provenance, RoutingTable};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostParams {
    pub seq_len: usize,
    pub num_chunks: usize,
    pub k: usize,
    /// Average token count of a selected chunk.
    pub m_bar: f64,
    pub head_dim: usize,
}

pub fn flops_moc(p: &CostParams) -> f64 {
    let l = p.seq_len as f64;
    let d = p.head_dim as f64;
    l * d + 2.0 * l * p.num_chunks as f64 * d + 4.0 * l * p.k as f64 * p.m_bar * d
}

pub fn flops_dense(seq_len: usize, head_dim: usize) -> f64 {
    let l = seq_len as f64;
    4.0 * l * l * head_dim as f64
}

/// `flops_dense / flops_moc` for the same `L` and `d`.
pub fn flops_ratio(p: &CostParams) -> f64 {
    flops_dense(p.seq_len, p.head_dim) / flops_moc(p)
}

/// Sparsity and mean routed-chunk length of a routing table.
///
/// Sparsity is `1 - attended / (H L^2)`, where attended counts each distinct
/// key token once per (head, query), mandatory links included.
pub fn measured_sparsity(table: &RoutingTable, partition: &ChunkPartition) -> (f64, f64) {
    let (heads, len) = (table.heads(), table.len());
    let mut attended = 0u64;
    let mut routed_tokens = 0u64;
    let mut routed_chunks = 0u64;
    for row in table.rows() {
        attended += row.token_count(partition) as u64;
        for c in row.with_provenance(Provenance::Routed) {
            routed_tokens += partition.chunk(c).token_count() as u64;
            routed_chunks += 1;
        }
    }
    let total = heads as f64 * len as f64 * len as f64;
    let sparsity = if total > 0.0 {
        1.0 - attended as f64 / total
    } else {
        0.0
    };
    let m_bar = if routed_chunks > 0 {
        routed_tokens as f64 / routed_chunks as f64
    } else {
        0.0
    };
    (sparsity, m_bar)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub flops_moc: f64,
    pub flops_dense: f64,
    pub ratio: f64,
    pub measured_sparsity: f64,
    pub measured_m_bar: f64,
    pub heads: usize,
}

impl CostReport {
    /// Model FLOPs evaluated with the table's chunk count, `k` and measured `m`.
    pub fn from_table(table: &RoutingTable, partition: &ChunkPartition, head_dim: usize) -> Self {
        let (sparsity, m_bar) = measured_sparsity(table, partition);
        let params = CostParams {
            seq_len: table.len(),
            num_chunks: partition.num_chunks(),
            k: table.k(),
            m_bar,
            head_dim,
        };
        let moc = flops_moc(&params);
        let dense = flops_dense(table.len(), head_dim);
        Self {
            flops_moc: moc,
            flops_dense: dense,
            ratio: dense / moc,
            measured_sparsity: sparsity,
            measured_m_bar: m_bar,
            heads: table.heads(),
        }
    }

    pub fn total_flops_moc(&self) -> f64 {
        self.flops_moc * self.heads as f64
    }

    pub fn total_flops_dense(&self) -> f64 {
        self.flops_dense * self.heads as f64
    }

    /// Flat `key=value` lines.
    pub fn to_record(&self) -> String {
        format!(
            "flops_moc={:e}\nflops_dense={:e}\nratio={}\nmeasured_sparsity={:.3}\nmeasured_m_bar={}\nheads={}\ntotal_flops_moc={:e}\ntotal_flops_dense={:e}\n",
            self.flops_moc,
            self.flops_dense,
            self.ratio,
            self.measured_sparsity,
            self.measured_m_bar,
            self.heads,
            self.total_flops_moc(),
            self.total_flops_dense(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::{build_chunks, layout_metas, tag_boundaries, ShotLayout};
    use crate::router::{SelectedChunk, Selection};

    #[test]
    fn unit_parameters() {
        let p = CostParams {
            seq_len: 1,
            num_chunks: 1,
            k: 1,
            m_bar: 1.0,
            head_dim: 1,
        };
        assert_eq!(flops_moc(&p), 7.0);
        assert_eq!(flops_dense(1, 1), 4.0);
    }

    #[test]
    fn pooling_term_only() {
        let p = CostParams {
            seq_len: 10,
            num_chunks: 0,
            k: 0,
            m_bar: 64.0,
            head_dim: 8,
        };
        assert_eq!(flops_moc(&p), 80.0);
    }

    #[test]
    fn dense_is_quadratic() {
        assert_eq!(flops_dense(2000, 64), 4.0 * flops_dense(1000, 64));
    }

    #[test]
    fn ratio_matches_closed_form() {
        // dense / moc = 4L / (1 + 2C + 4 k m)
        let p = CostParams {
            seq_len: 50_000,
            num_chunks: 20,
            k: 3,
            m_bar: 700.0,
            head_dim: 64,
        };
        let closed = 4.0 * 50_000.0 / (1.0 + 40.0 + 4.0 * 3.0 * 700.0);
        assert!((flops_ratio(&p) - closed).abs() / closed < 1e-12);
    }

    fn partition(n: usize) -> ChunkPartition {
        let layout = [ShotLayout {
            n_frames: n,
            tokens_per_frame: 1,
            caption_tokens: 0,
        }];
        build_chunks(&tag_boundaries(layout_metas(0, &layout, true)).unwrap(), 1).unwrap()
    }

    #[test]
    fn saturated_has_zero_sparsity() {
        let p = partition(5);
        let t = RoutingTable::saturated(2, &p);
        let (s, m) = measured_sparsity(&t, &p);
        assert_eq!(s, 0.0);
        assert_eq!(m, 1.0);
    }

    #[test]
    fn self_only_sparsity() {
        let p = partition(8);
        let rows = (0..8)
            .map(|i| {
                Selection::new(vec![SelectedChunk {
                    chunk: i,
                    provenance: Provenance::Mandatory,
                    score: None,
                }])
                .unwrap()
            })
            .collect();
        let t = RoutingTable::from_rows(1, 8, 8, 1, rows).unwrap();
        let (s, m) = measured_sparsity(&t, &p);
        assert!((s - (1.0 - 1.0 / 8.0)).abs() < 1e-15);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn record_is_key_value() {
        let p = partition(4);
        let t = RoutingTable::saturated(1, &p);
        let r = CostReport::from_table(&t, &p, 2);
        let rec = r.to_record();
        assert!(rec.lines().all(|l| l.contains('=')));
        assert!(rec.contains("measured_sparsity=0.000"));
    }
}

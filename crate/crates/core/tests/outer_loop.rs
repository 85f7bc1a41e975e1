mod common;

use common::{check_partition, random_inputs, rng};
use moc_core::lattice::layout_metas;
use moc_core::reference::{naive_dense, sorted_topk};
use moc_core::tensor::max_rel_err;
use moc_core::{
    build_chunks, curate_context, dense_attention, moc_attention, outer_route, tag_boundaries,
    OuterPartition, RoutingTable, ShotLayout,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random_shots(r: &mut ChaCha8Rng) -> (usize, Vec<ShotLayout>) {
    let n = r.random_range(2..=7);
    let shots = (0..n)
        .map(|_| ShotLayout {
            n_frames: r.random_range(1..=3),
            tokens_per_frame: r.random_range(1..=6),
            caption_tokens: r.random_range(0..=3),
        })
        .collect();
    (r.random_range(0..=3), shots)
}

#[test]
fn block_selection_matches_full_sort() {
    let mut r = rng(30);
    for _ in 0..100 {
        let (global, shots) = random_shots(&mut r);
        let stream = tag_boundaries(layout_metas(global, &shots, true)).unwrap();
        let query_shot = r.random_range(1..shots.len() as u32);
        let op = OuterPartition::by_shot(&stream, query_shot).unwrap();
        let heads = r.random_range(1..=3);
        let x = random_inputs(&mut r, heads, stream.len(), 5);
        let query = x.q.select_tokens(&op.query().clone().collect::<Vec<_>>());
        let m = r.random_range(1..=op.num_blocks() + 1);
        let sel = outer_route(&x.k, &query, &op, m).unwrap();

        let scored: Vec<(usize, f64)> = op
            .blocks()
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let mut s = 0.0;
                for h in 0..heads {
                    for c in 0..5 {
                        let qm: f64 = (0..query.len()).map(|t| query.get(h, t, c)).sum::<f64>() / query.len() as f64;
                        let km: f64 = b.range.clone().map(|t| x.k.get(h, t, c)).sum::<f64>() / b.range.len() as f64;
                        s += qm * km;
                    }
                }
                (j, s)
            })
            .collect();
        assert_eq!(sel.selected, sorted_topk(&scored, m));
        assert_eq!(sel.selected.len(), m.min(op.num_blocks()));
    }
}

#[test]
fn curated_streams_are_valid_and_compose_with_inner_attention() {
    let mut r = rng(31);
    for _ in 0..30 {
        let (global, shots) = random_shots(&mut r);
        let stream = tag_boundaries(layout_metas(global, &shots, true)).unwrap();
        let target = r.random_range(1..=10);
        let partition = build_chunks(&stream, target).unwrap();
        let query_shot = r.random_range(1..=shots.len() as u32);
        let op = OuterPartition::by_shot(&stream, query_shot).unwrap();
        let x = random_inputs(&mut r, 2, stream.len(), 4);
        let query_tokens: Vec<usize> = if op.query().is_empty() {
            (0..stream.len()).collect()
        } else {
            op.query().clone().collect()
        };
        let sel = outer_route(&x.k, &x.q.select_tokens(&query_tokens), &op, 2).unwrap();
        let include_query = r.random_bool(0.5);
        let cur = curate_context(&stream, &partition, &sel, include_query).unwrap();
        check_partition(&cur.stream, &cur.partition, target);
        for (new, &old) in cur.new_to_old.iter().enumerate() {
            assert_eq!(cur.old_to_new[old], Some(new));
        }
        assert!(cur.new_to_old.windows(2).all(|w| w[0] < w[1]));

        let sub = x.select_tokens(&cur.new_to_old);
        let table = RoutingTable::saturated(2, &cur.partition);
        let inner = moc_attention(&sub, &table, &cur.partition).unwrap();
        let dense = dense_attention(&sub).unwrap();
        assert!(max_rel_err(inner.out.as_slice(), dense.out.as_slice(), 1e-12) < 1e-5);
        assert!(max_rel_err(inner.out.as_slice(), naive_dense(&sub).as_slice(), 1e-12) < 1e-5);
    }
}

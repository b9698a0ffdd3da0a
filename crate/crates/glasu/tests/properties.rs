//! Property tests: codec inverses, aggregation algebra, and schedule
//! invariants under randomized inputs.

use proptest::prelude::*;

use glasu::federation::{aggregate, extract, local_compose, AggKind};
use glasu::graph::{normalize_adjacency, Graph};
use glasu::linalg::Matrix;
use glasu::sampling::{sample_round, LayerPlan, SamplerConfig};
use glasu::transport::{deserialize, serialize, Message};

fn sorted_ids(max_len: usize) -> impl Strategy<Value = Vec<u32>> {
    proptest::collection::btree_set(0u32..10_000, 0..max_len)
        .prop_map(|s| s.into_iter().collect())
}

fn finite_matrix(max_dim: usize) -> impl Strategy<Value = Matrix> {
    (1..=max_dim, 1..=max_dim).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-1e6f64..1e6, r * c)
            .prop_map(move |data| Matrix::from_vec(r, c, data))
    })
}

fn message_strategy() -> impl Strategy<Value = Message> {
    prop_oneof![
        sorted_ids(64).prop_map(Message::SampleBroadcast),
        (any::<u8>(), sorted_ids(64)).prop_map(|(layer, set)| Message::IndexUpload { layer, set }),
        (any::<u8>(), sorted_ids(64))
            .prop_map(|(layer, set)| Message::IndexUnionBroadcast { layer, set }),
        (any::<u8>(), finite_matrix(6))
            .prop_map(|(layer, matrix)| Message::ReprUpload { layer, matrix }),
        (any::<u8>(), finite_matrix(6))
            .prop_map(|(layer, matrix)| Message::ReprBroadcast { layer, matrix }),
        finite_matrix(6).prop_map(Message::CotangentBroadcast),
    ]
}

proptest! {
    #[test]
    fn codec_roundtrips_every_message(msg in message_strategy()) {
        let bytes = serialize(&msg);
        let back = deserialize(&bytes).unwrap();
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn concat_extract_compose_roundtrip(
        rows in 1usize..6,
        width in 1usize..4,
        m_total in 1usize..=8,
        seed in any::<u64>(),
    ) {
        let mut rng = glasu::linalg::RngState::new(seed, 0);
        let kind = AggKind::concat_uniform(m_total, width);
        let parts: Vec<Matrix> = (0..m_total)
            .map(|_| Matrix::from_vec(
                rows, width,
                (0..rows * width).map(|_| rng.next_f64() * 2e3 - 1e3).collect(),
            ))
            .collect();
        let h = aggregate(&parts, &kind);
        for (m, part) in parts.iter().enumerate() {
            let minus = extract(&h, part, &kind, m_total, m);
            let back = local_compose(&minus, part, &kind, m_total, m);
            prop_assert!(back.bits_eq(&h));
        }
    }

    #[test]
    fn average_aggregate_bounded_by_parts(
        rows in 1usize..5,
        cols in 1usize..5,
        m_total in 1usize..=8,
        seed in any::<u64>(),
    ) {
        let mut rng = glasu::linalg::RngState::new(seed, 1);
        let parts: Vec<Matrix> = (0..m_total)
            .map(|_| Matrix::from_vec(
                rows, cols,
                (0..rows * cols).map(|_| rng.next_f64()).collect(),
            ))
            .collect();
        let mean = aggregate(&parts, &AggKind::Average);
        for idx in 0..rows * cols {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for p in &parts {
                lo = lo.min(p.data()[idx]);
                hi = hi.max(p.data()[idx]);
            }
            let v = mean.data()[idx];
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
    }

    #[test]
    fn schedule_nesting_and_self_inclusion(
        seed in any::<u64>(),
        round in 0u64..8,
        fanout in 1usize..4,
    ) {
        // Ring graph keeps every node degree 2.
        let n = 16u32;
        let g = Graph::from_edges(
            n as usize,
            (0..n).map(|i| (i, (i + 1) % n)),
        ).unwrap();
        let adj = normalize_adjacency(&g);
        let plan = LayerPlan::suffix(3, 2).unwrap();
        let cfg = SamplerConfig { batch_size: 4, fanout };
        let root = glasu::linalg::RngState::new(seed, 0);
        let mask: Vec<u32> = (0..n).collect();
        let sched = sample_round(&[&adj, &adj], &mask, &plan, &cfg, &root, round).unwrap();
        for sets in &sched.sets {
            for l in 0..3 {
                // Sorted strictly ascending.
                prop_assert!(sets[l].windows(2).all(|w| w[0] < w[1]));
                // Every out-node appears in the in-set (self edge exists).
                for i in &sets[l + 1] {
                    prop_assert!(sets[l].contains(i));
                }
            }
        }
        // Shared at the top aggregation layer (batch copy) and at L.
        prop_assert_eq!(&sched.sets[0][3], &sched.sets[1][3]);
        prop_assert_eq!(&sched.sets[0][2], &sched.sets[1][2]);
    }
}

use hardneg::losses::{
    cbb_retrieval_term, cbb_total, cosent, info_nce_explicit, info_nce_in_batch, PairBatch, ShardedRetrievalBatch,
    StsBatch,
};
use hardneg::numeric::DenseVector;
use hardneg::shard::partition_negatives;
use proptest::prelude::*;

const DIM: usize = 5;

fn vector() -> impl Strategy<Value = DenseVector<f64>> {
    prop::collection::vec(-1.0f64..1.0, DIM)
        .prop_filter("non-zero", |v| v.iter().map(|x| x * x).sum::<f64>() > 1e-3)
        .prop_map(|v| DenseVector::new(v).unwrap())
}

fn vectors(n: usize) -> impl Strategy<Value = Vec<DenseVector<f64>>> {
    prop::collection::vec(vector(), n)
}

/// Queries, positives and 4 negatives per query.
fn retrieval(n_q: usize) -> impl Strategy<Value = (Vec<DenseVector<f64>>, Vec<DenseVector<f64>>, Vec<Vec<DenseVector<f64>>>)> {
    (vectors(n_q), vectors(n_q), prop::collection::vec(vectors(4), n_q))
}

fn sts(n: usize) -> impl Strategy<Value = StsBatch<f64>> {
    (vectors(n), vectors(n), prop::collection::vec(0u8..5, n)).prop_map(|(a, b, l)| StsBatch {
        a,
        b,
        labels: l.into_iter().map(f64::from).collect(),
    })
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-10 * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #[test]
    fn sharded_retrieval_matches_the_monolithic_loss(
        (q, p, negs) in (1usize..5).prop_flat_map(retrieval),
        n_workers in prop::sample::select(vec![1usize, 2, 4]),
        tau in 0.05f64..1.0,
    ) {
        let oracle = info_nce_explicit(&q, &p, &negs, tau, q.len() as f64).unwrap();
        let batch = ShardedRetrievalBatch {
            queries: q.clone(),
            positives: p.clone(),
            shards: partition_negatives(&negs, n_workers).unwrap(),
        };
        let sharded = cbb_retrieval_term(&batch, tau).unwrap();
        prop_assert!(close(sharded.value, oracle.value), "{} vs {}", sharded.value, oracle.value);
        for (a, b) in sharded.grads.queries.iter().zip(&oracle.grads.queries) {
            for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
                prop_assert!(close(*x, *y));
            }
        }
    }

    #[test]
    fn shard_order_does_not_change_the_loss(
        (q, p, negs) in (1usize..4).prop_flat_map(retrieval),
        tau in 0.05f64..1.0,
    ) {
        let shards = partition_negatives(&negs, 4).unwrap();
        let forward = ShardedRetrievalBatch { queries: q.clone(), positives: p.clone(), shards: shards.clone() };
        let mut reversed = forward.clone();
        reversed.shards.reverse();
        let a = cbb_retrieval_term(&forward, tau).unwrap().value;
        let b = cbb_retrieval_term(&reversed, tau).unwrap().value;
        prop_assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn in_batch_loss_is_invariant_to_row_order_and_scale(
        (q, p) in (1usize..6).prop_flat_map(|m| (vectors(m), vectors(m))),
        scale in 0.1f64..10.0,
        tau in 0.05f64..1.0,
    ) {
        let base = info_nce_in_batch(&PairBatch { queries: q.clone(), positives: p.clone() }, tau).unwrap().value;
        prop_assert!(base >= 0.0);
        let mut rq = q.clone();
        let mut rp = p.clone();
        rq.reverse();
        rp.reverse();
        let reordered = info_nce_in_batch(&PairBatch { queries: rq, positives: rp }, tau).unwrap().value;
        prop_assert!(close(base, reordered));
        let scaled: Vec<_> = q.iter().map(|v| v.scaled(scale)).collect();
        let rescaled = info_nce_in_batch(&PairBatch { queries: scaled, positives: p }, tau).unwrap().value;
        prop_assert!(close(base, rescaled));
    }

    #[test]
    fn cosent_depends_only_on_label_order(
        batch in (1usize..7).prop_flat_map(sts),
        shift in -3.0f64..3.0,
        stretch in 0.1f64..5.0,
        tau in 0.05f64..1.0,
    ) {
        let base = cosent(&batch, tau).unwrap().value;
        prop_assert!(base >= 0.0);
        let mut relabelled = batch.clone();
        for l in &mut relabelled.labels {
            *l = *l * stretch + shift;
        }
        prop_assert!(close(base, cosent(&relabelled, tau).unwrap().value));
        let mut flat = batch.clone();
        flat.labels.iter_mut().for_each(|l| *l = 1.0);
        prop_assert_eq!(cosent(&flat, tau).unwrap().value, 0.0);
    }

    #[test]
    fn cbb_total_is_retrieval_plus_weighted_cosent(
        (q, p, negs) in (1usize..4).prop_flat_map(retrieval),
        batch in (1usize..5).prop_flat_map(sts),
        beta in 0.0f64..2.0,
        tau in 0.05f64..1.0,
    ) {
        let retri = ShardedRetrievalBatch { queries: q, positives: p, shards: partition_negatives(&negs, 2).unwrap() };
        let out = cbb_total(&retri, &batch, tau, beta).unwrap();
        let r = cbb_retrieval_term(&retri, tau).unwrap().value;
        let s = cosent(&batch, tau).unwrap().value;
        prop_assert!(close(out.value, r + beta * s));
        prop_assert_eq!(out.retrieval_value, r);
        prop_assert_eq!(out.sts_value, s);
    }
}

#[test]
fn uniform_logits_give_log_batch_size() {
    let v = DenseVector::new(vec![1.0, 0.0, 0.0]).unwrap();
    let batch = PairBatch {
        queries: vec![v.clone(); 4],
        positives: vec![v; 4],
    };
    let loss = info_nce_in_batch(&batch, 0.05).unwrap().value;
    assert!((loss - 4f64.ln()).abs() < 1e-12);
}

#[test]
fn invalid_temperature_is_rejected() {
    let v = DenseVector::new(vec![1.0, 0.0]).unwrap();
    let batch = PairBatch {
        queries: vec![v.clone()],
        positives: vec![v],
    };
    for tau in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(info_nce_in_batch(&batch, tau).is_err());
    }
}

use moeforge::analysis::*;
use moeforge::corpus::{generate_corpus, Corpus, CorpusConfig, Split};
use moeforge::model::{LayerId, Model, ModelConfig, MoeMode, Stack};
use moeforge::routing::{GateConfig, RoutingPolicy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus() -> Corpus {
    generate_corpus(&CorpusConfig { train_sizes: vec![40, 40], valid_size: 30, vocab_size: 24, min_len: 3, max_len: 5, ..Default::default() })
        .unwrap()
}

fn model(mode: MoeMode, experts: usize, k: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        d_model: 16,
        ffn_dim: 32,
        heads: 2,
        encoder_layers: 4,
        decoder_layers: 2,
        vocab_size: 24,
        max_len: 8,
        moe_mode: mode,
        gate: GateConfig { num_experts: experts, k, ..Default::default() },
        ..Default::default()
    };
    Model::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Smallest subset size whose counts cover half the total, by enumeration.
fn brute_e50(counts: &[u64]) -> usize {
    let total: u64 = counts.iter().sum();
    let n = counts.len();
    (0u32..1 << n)
        .filter(|mask| {
            let s: u64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| counts[i]).sum();
            2 * s >= total
        })
        .map(|mask| mask.count_ones() as usize)
        .min()
        .unwrap()
}

#[test]
fn e50_matches_brute_force_cover() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let n = rng.gen_range(1..=10);
        let mut counts: Vec<u64> = (0..n).map(|_| rng.gen_range(0..20)).collect();
        if counts.iter().all(|&c| c == 0) {
            counts[0] = 1;
        }
        let total: u64 = counts.iter().sum();
        let fractions: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        assert_eq!(e50(&fractions).unwrap(), brute_e50(&counts), "counts {counts:?}");
    }
}

fn onehot(layer: LayerId, experts: usize, assign: &[usize]) -> UsageMatrix {
    let values = assign.iter().flat_map(|&a| (0..experts).map(move |e| if e == a { 1.0 } else { 0.0 })).collect();
    UsageMatrix { layer, experts, values }
}

#[test]
fn colocation_fixtures() {
    let (l1, l3) = (LayerId { stack: Stack::Encoder, index: 1 }, LayerId { stack: Stack::Encoder, index: 3 });
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let t = 10_000;
    let a: Vec<usize> = (0..t).map(|_| rng.gen_range(0..8)).collect();
    let b: Vec<usize> = (0..t).map(|_| rng.gen_range(0..8)).collect();
    let same = colocation(&onehot(l1, 8, &a), &onehot(l3, 8, &a)).unwrap();
    assert!((same - 1.0).abs() < 1e-12, "identity routing {same}");
    let relabeled: Vec<usize> = a.iter().map(|&e| (e + 3) % 8).collect();
    let perm = colocation(&onehot(l1, 8, &a), &onehot(l3, 8, &relabeled)).unwrap();
    assert!((perm - 1.0).abs() < 1e-12, "relabeled routing {perm}");
    let indep = colocation(&onehot(l1, 8, &a), &onehot(l3, 8, &b)).unwrap();
    assert!(indep < 0.1, "independent routing {indep}");
}

#[test]
fn similarity_is_symmetric_with_unit_diagonal() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..50 {
        let n = rng.gen_range(2..8);
        let dim = rng.gen_range(1..20);
        let v: Vec<Vec<f64>> = (0..n).map(|_| (0..dim).map(|_| rng.gen_range(0.01..1.0)).collect()).collect();
        let m = similarity_matrix(&v).unwrap();
        for i in 0..n {
            assert_eq!(m[i][i], Some(1.0));
            for j in 0..n {
                assert_eq!(m[i][j], m[j][i]);
                let s = m[i][j].unwrap();
                assert!((0.0..=1.0 + 1e-12).contains(&s));
            }
        }
    }
}

#[test]
fn usage_counts_reconcile_with_token_counts() {
    let c = corpus();
    let m = model(MoeMode::Moe, 4, 2, 1);
    let report = collect_usage(&m, &c, &[0, 1], &UsageOptions::default()).unwrap();
    assert!(report.notice.is_none());
    assert_eq!(report.usages.len(), 2 * m.num_moe_layers());
    for u in &report.usages {
        let task: usize = u.group.parse().unwrap();
        let ex = c.examples(task, Split::Valid).unwrap();
        let expected: usize = match u.layer.stack {
            Stack::Encoder => ex.iter().map(|e| e.src.len() + 1).sum(),
            Stack::Decoder => ex.iter().map(|e| e.tgt.len()).sum(),
        };
        assert_eq!(u.total(), expected, "{} task {task}", u.layer);
    }
    for (layer, mat) in &report.matrices {
        let per_layer: usize = report.usages.iter().filter(|u| u.layer == *layer).map(|u| u.total()).sum();
        assert_eq!(mat.tokens(), per_layer);
        assert!(mat.values.chunks(4).all(|row| row.iter().sum::<f64>() == 1.0));
    }
    let table = colocation_table(&report).unwrap();
    assert_eq!(table.len(), 1);
    assert_eq!(table[0].0.stack, Stack::Encoder);

    let grouped = group_usage(&report.usages, |_| "all".into()).unwrap();
    assert_eq!(grouped.len(), m.num_moe_layers());
}

#[test]
fn single_expert_and_forced_routing_are_one_hot() {
    let c = corpus();
    let single = collect_usage(&model(MoeMode::Moe, 1, 1, 2), &c, &[0, 1], &UsageOptions::default()).unwrap();
    for u in &single.usages {
        assert_eq!(u.counts.len(), 1);
        assert_eq!(e50(&u.fractions()).unwrap(), 1);
    }

    let opts = UsageOptions { policy: RoutingPolicy::ForcedByTask(vec![2, 5]), ..Default::default() };
    let forced = collect_usage(&model(MoeMode::Moe, 8, 2, 3), &c, &[0, 1], &opts).unwrap();
    for u in &forced.usages {
        let want = if u.group == "0" { 2 } else { 5 };
        assert_eq!(u.counts[want], u.total());
    }
    for side in [Stack::Encoder, Stack::Decoder] {
        let v = group_vectors(&forced.usages, side);
        let vecs: Vec<Vec<f64>> = v.into_iter().map(|(_, x)| x).collect();
        assert_eq!(similarity_matrix(&vecs).unwrap()[0][1], Some(0.0));
    }
}

#[test]
fn dense_model_has_nothing_to_analyze() {
    let c = corpus();
    let m = model(MoeMode::Dense, 4, 2, 1);
    let report = collect_usage(&m, &c, &[0], &UsageOptions::default()).unwrap();
    assert!(report.usages.is_empty() && report.notice.is_some());
    assert!(random_routing_eval(&m, &c, &[0], &[1, 2], 1).is_err());
}

#[test]
fn random_routing_over_all_experts_matches_top_k() {
    let c = corpus();
    let m = model(MoeMode::Moe, 2, 2, 5);
    for row in random_routing_eval(&m, &c, &[0, 1], &[1, 2], 1).unwrap() {
        assert!(row.rel_degradation.abs() < 1e-12, "{row:?}");
    }
}

#[test]
fn tied_experts_with_uniform_gate_ignore_routing() {
    let c = corpus();
    let mut m = model(MoeMode::Moe, 8, 2, 6);
    m.tie_experts(true);
    for row in random_routing_eval(&m, &c, &[0, 1], &[1, 2], 1).unwrap() {
        assert!(row.rel_degradation.abs() < 1e-12, "{row:?}");
    }
    let moe = &m.moe_layers()[0].1.experts.experts;
    assert_eq!(m.params.get(moe[0].ids()[0]).data(), m.params.get(moe[7].ids()[0]).data());
}

use moeforge::corpus::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn two_tasks(sizes: Vec<usize>) -> Corpus {
    generate_corpus(&CorpusConfig { train_sizes: sizes, valid_size: 5, vocab_size: 32, ..Default::default() }).unwrap()
}

fn fractions(corpus: &Corpus, active: &[usize], temperature: f64, draws: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut counts = vec![0usize; corpus.num_tasks()];
    let mut n = 0;
    while n < draws {
        let b = sample_batch(corpus, active, 200, temperature, &mut rng).unwrap();
        for &t in &b.tasks {
            counts[t] += 1;
        }
        n += b.len();
    }
    counts.iter().map(|&c| c as f64 / n as f64).collect()
}

#[test]
fn proportional_sampling_at_unit_temperature() {
    let c = two_tasks(vec![9000, 1000]);
    let draws = 100_000;
    let f = fractions(&c, &[0, 1], 1.0, draws);
    let sigma = (0.9f64 * 0.1 / draws as f64).sqrt();
    assert!((f[0] - 0.9).abs() < 3.0 * sigma, "fraction {}", f[0]);
}

#[test]
fn infinite_temperature_is_uniform() {
    let c = two_tasks(vec![9000, 1000]);
    let draws = 100_000;
    let f = fractions(&c, &[0, 1], f64::INFINITY, draws);
    let sigma = (0.25f64 / draws as f64).sqrt();
    assert!((f[0] - 0.5).abs() < 3.0 * sigma, "fraction {}", f[0]);
}

#[test]
fn single_active_task_and_empty_set() {
    let c = two_tasks(vec![50, 50]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let b = sample_batch(&c, &[1], 500, 1.0, &mut rng).unwrap();
    assert!(b.tasks.iter().all(|&t| t == 1));
    assert!(b.sources.iter().all(|s| s[0] == 2));
    assert!(b.targets.iter().all(|t| t[0] == 3));
    assert!(b.num_source_tokens() + b.targets.iter().map(Vec::len).sum::<usize>() >= 500);
    assert!(sample_batch(&c, &[], 500, 1.0, &mut rng).is_err());
}

#[test]
fn generation_is_deterministic_and_seed_sensitive() {
    let cfg = CorpusConfig { noise: 0.1, contextual: true, ..CorpusConfig::default() };
    let a = generate_corpus(&cfg).unwrap();
    let b = generate_corpus(&cfg).unwrap();
    assert_eq!(a, b);
    let mut ja = Vec::new();
    let mut jb = Vec::new();
    a.write_jsonl(&mut ja).unwrap();
    b.write_jsonl(&mut jb).unwrap();
    assert_eq!(ja, jb);
    let c = generate_corpus(&CorpusConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.tasks[0].train, c.tasks[0].train);
}

#[test]
fn mapping_is_a_bijection_and_targets_follow_it() {
    let c = generate_corpus(&CorpusConfig::default()).unwrap();
    let off = c.config.num_reserved();
    for t in &c.tasks {
        let mut p = t.def.permutation.clone();
        p.sort_unstable();
        assert_eq!(p, (0..c.vocab_size() - off).collect::<Vec<_>>());
        for ex in t.train.iter().take(50) {
            assert_eq!(ex.tgt, translate(&t.def, &ex.src, false, off));
            assert!(ex.src.iter().all(|&tok| tok >= off && tok < c.vocab_size()));
        }
    }
    let sizes: Vec<usize> = c.tasks.iter().map(|t| t.train.len()).collect();
    assert!(sizes.iter().max().unwrap() / sizes.iter().min().unwrap() >= 100);
}

#[test]
fn noise_rate_is_respected() {
    let cfg = CorpusConfig { train_sizes: vec![20_000], noise: 0.2, ..CorpusConfig::default() };
    let c = generate_corpus(&cfg).unwrap();
    let off = cfg.num_reserved();
    let t = &c.tasks[0];
    let (mut changed, mut total) = (0usize, 0usize);
    for ex in &t.train {
        let clean = translate(&t.def, &ex.src, false, off);
        changed += clean.iter().zip(&ex.tgt).filter(|(a, b)| a != b).count();
        total += clean.len();
    }
    // A replacement hits the clean token with probability 1/C.
    let content = (cfg.vocab_size - off) as f64;
    let p = 0.2 * (1.0 - 1.0 / content);
    let frac = changed as f64 / total as f64;
    let sigma = (p * (1.0 - p) / total as f64).sqrt();
    assert!((frac - p).abs() < 3.0 * sigma, "noise fraction {frac}, expected {p}");
}

#[test]
fn task_ids_must_be_unique_on_import() {
    let c = two_tasks(vec![3, 3]);
    let mut buf = Vec::new();
    c.write_jsonl(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let tampered = text.replacen("\"id\":1", "\"id\":0", 1);
    assert!(Corpus::read_jsonl(tampered.as_bytes()).is_err());
}

use mvgr_core::embedlib::{EmbeddingRecord, Level};
use mvgr_core::synth::{generate_city, Archetype, ArchetypeCount, City, CityConfig};
use mvgr_core::uplift::*;
use mvgr_core::Error;
use mvgr_tensor::Tape;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn city() -> City {
    generate_city(&CityConfig {
        seed: 5,
        hex_radius: 2,
        archetype_mix: Archetype::ALL.into_iter().map(|archetype| ArchetypeCount { archetype, counties: 1 }).collect(),
        ..CityConfig::default()
    })
    .unwrap()
}

fn small_cfg(epochs: usize) -> UpliftTrainConfig {
    UpliftTrainConfig {
        seed: 3,
        hidden: 16,
        epochs,
        batch_size: 64,
        lr: 3e-3,
    }
}

fn three_arms() -> TreatmentSet {
    TreatmentSet::new(vec!["none".into(), "85%-x".into(), "60%-x".into()]).unwrap()
}

/// Two feature patterns, each seen under every treatment with the same
/// outcomes: `rate_a` of pattern A converts, `rate_b` of pattern B.
fn balanced(rate_a: f64, rate_b: f64, flip: bool) -> UpliftData {
    let treatments = three_arms();
    let mut samples = Vec::new();
    for t in 0..treatments.len() {
        for (pattern, rate) in [(1.0, rate_a), (-1.0, rate_b)] {
            for i in 0..100 {
                let converted = ((i as f64) < rate * 100.0) != flip;
                samples.push(UpliftSample {
                    sample_id: samples.len(),
                    region_id: 0,
                    treatment: t,
                    converted,
                    features: vec![pattern, -pattern],
                });
            }
        }
    }
    UpliftData {
        treatments,
        samples,
        embedding_dim: 0,
    }
}

#[test]
fn identical_outcomes_give_identical_heads() {
    let data = balanced(0.8, 0.3, false);
    let (model, _) = train_uplift(&data, &small_cfg(40)).unwrap();
    let p = model.predict(&[vec![1.0, -1.0], vec![-1.0, 1.0]]).unwrap();
    for (row, rate) in p.iter().zip([0.8, 0.3]) {
        for &v in row {
            assert!(v > 0.0 && v < 1.0);
            assert!((v - rate).abs() < 0.05, "{row:?} vs {rate}");
        }
        let spread = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - row.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(spread < 0.05, "{row:?}");
    }
}

#[test]
fn label_flip_gives_complements() {
    let (a, _) = train_uplift(&balanced(0.8, 0.3, false), &small_cfg(40)).unwrap();
    let (b, _) = train_uplift(&balanced(0.8, 0.3, true), &small_cfg(40)).unwrap();
    let x = [vec![1.0, -1.0], vec![-1.0, 1.0]];
    let (pa, pb) = (a.predict(&x).unwrap(), b.predict(&x).unwrap());
    for (ra, rb) in pa.iter().zip(&pb) {
        for (va, vb) in ra.iter().zip(rb) {
            assert!((va + vb - 1.0).abs() < 0.05, "{va} + {vb}");
        }
    }
}

#[test]
fn training_loss_decreases_on_generated_data() {
    let data = generate_uplift(
        &city(),
        &UpliftGenConfig {
            seed: 9,
            n_samples: 2000,
            ..UpliftGenConfig::default()
        },
    )
    .unwrap();
    let (_, log) = train_uplift(&data, &small_cfg(10)).unwrap();
    assert_eq!(log.eval_losses.len(), 11);
    for w in log.eval_losses.windows(2) {
        assert!(w[1] < w[0], "{:?}", log.eval_losses);
    }
    let (_, again) = train_uplift(&data, &small_cfg(10)).unwrap();
    assert_eq!(log, again);
}

#[test]
fn only_observed_heads_receive_gradient() {
    let data = balanced(0.6, 0.4, false);
    let (model, _) = train_uplift(&data, &small_cfg(1)).unwrap();
    let batch: Vec<&UpliftSample> = data.samples.iter().filter(|s| s.treatment != 1).step_by(7).collect();
    let mut tape = Tape::new();
    let loss = model.batch_loss(&mut tape, &batch).unwrap();
    let grads = tape.backward(loss);
    let by_id: std::collections::HashMap<_, _> = grads.param_grads(&tape).into_iter().collect();
    let head_norm = |t: usize| {
        let h = model.heads[t];
        [Some(h.w), h.b].into_iter().flatten().map(|id| by_id[&id].iter().map(|g| g * g).sum::<f64>()).sum::<f64>()
    };
    assert_eq!(head_norm(1), 0.0);
    assert!(head_norm(0) > 0.0 && head_norm(2) > 0.0);
    assert!(by_id[&model.trunk[0].w].iter().any(|&g| g != 0.0));
}

#[test]
fn unobserved_treatment_is_rejected() {
    let mut data = balanced(0.6, 0.4, false);
    data.samples.retain(|s| s.treatment != 2);
    match train_uplift(&data, &small_cfg(1)) {
        Err(Error::Invalid(msg)) => assert!(msg.contains("60%-x"), "{msg}"),
        other => panic!("expected rejection, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn uplift_is_head_difference() {
    let data = generate_uplift(
        &city(),
        &UpliftGenConfig {
            seed: 2,
            n_samples: 600,
            treatments: three_arms(),
            ..UpliftGenConfig::default()
        },
    )
    .unwrap();
    let (model, _) = train_uplift(&data, &small_cfg(3)).unwrap();
    let x: Vec<Vec<f64>> = data.samples.iter().take(50).map(|s| s.features.clone()).collect();
    let p = model.predict(&x).unwrap();
    for (t, name) in data.treatments.names().iter().enumerate() {
        let u = model.uplift(&x, name).unwrap();
        for (ui, pi) in u.iter().zip(&p) {
            assert!((ui - (pi[t] - pi[0])).abs() < 1e-12);
            assert!(*ui > -1.0 && *ui < 1.0);
            if t == 0 {
                assert_eq!(*ui, 0.0);
            }
        }
    }
    assert!(model.uplift(&x, "50%-x").is_err());
    assert!(model.predict(&[vec![0.0; 3]]).is_err());
}

#[test]
fn model_and_samples_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = generate_uplift(
        &city(),
        &UpliftGenConfig {
            seed: 4,
            n_samples: 300,
            ..UpliftGenConfig::default()
        },
    )
    .unwrap();
    let path = dir.path().join(SAMPLES_CSV);
    write_samples_csv(&path, &data).unwrap();
    let header = std::fs::read_to_string(&path).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "sample_id,region_id,treatment,converted,f0,f1,f2,f3,f4,f5");
    let back = read_samples_csv(&path, &data.treatments).unwrap();
    assert_eq!(back, data);

    let (model, _) = train_uplift(&data, &small_cfg(2)).unwrap();
    model.save(&dir.path().join("model")).unwrap();
    let loaded = MultiHeadModel::load(&dir.path().join("model")).unwrap();
    let x: Vec<Vec<f64>> = data.samples.iter().take(20).map(|s| s.features.clone()).collect();
    for (a, b) in model.predict(&x).unwrap().iter().zip(loaded.predict(&x).unwrap()) {
        for (u, v) in a.iter().zip(b) {
            assert!((u - v).abs() < 1e-5);
        }
    }
}

fn library(dim: usize, regions: &[usize]) -> Vec<EmbeddingRecord> {
    regions
        .iter()
        .map(|&r| EmbeddingRecord {
            region_id: r,
            level: Level::County,
            vector: (0..dim).map(|j| (r * 10 + j) as f32 * 0.5).collect(),
            version: "v1".into(),
            source_hash: "x".into(),
        })
        .collect()
}

#[test]
fn augmentation_appends_region_vectors() {
    let data = generate_uplift(
        &city(),
        &UpliftGenConfig {
            seed: 1,
            n_samples: 200,
            ..UpliftGenConfig::default()
        },
    )
    .unwrap();
    let aug = augment_features(&data, &library(5, &[0, 1, 2, 3]), Level::County).unwrap();
    assert_eq!(aug.feature_dim(), data.feature_dim() + 5);
    assert_eq!(aug.embedding_dim, 5);
    for (a, s) in aug.samples.iter().zip(&data.samples) {
        assert_eq!(&a.features[..6], &s.features[..]);
        let expect: Vec<f64> = (0..5).map(|j| (s.region_id * 10 + j) as f64 * 0.5).collect();
        assert_eq!(&a.features[6..], &expect[..]);
    }
    let mut zero = library(3, &[0, 1, 2, 3]);
    zero.iter_mut().for_each(|r| r.vector.iter_mut().for_each(|v| *v = 0.0));
    let z = augment_features(&data, &zero, Level::County).unwrap();
    assert!(z.samples.iter().all(|s| s.features[6..] == [0.0; 3]));

    match augment_features(&data, &library(5, &[0, 1, 3]), Level::County) {
        Err(Error::MissingArtifact(msg)) => assert!(msg.contains("region 2"), "{msg}"),
        other => panic!("expected missing region, got {:?}", other.map(|_| ())),
    }
    assert!(augment_features(&data, &library(5, &[0, 1, 2, 3]), Level::Grid).is_err());
}

#[test]
fn generated_uplift_depends_on_archetype() {
    let x = [0.0; 6];
    let lift = |a| conversion_probability(a, 5, 6, &x) - conversion_probability(a, 0, 6, &x);
    let lifts: Vec<f64> = Archetype::ALL.into_iter().map(lift).collect();
    let (lo, hi) = lifts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    assert!(hi - lo > 0.2, "{lifts:?}");
}

#[test]
fn true_uplift_ranking_is_optimal_on_small_data() {
    // (treated, converted) with a consistent latent uplift per sample.
    let arms = [1, 1, 0, 0, 1, 1, 0, 0];
    let y = [true, true, false, false, false, false, true, false];
    let truth = [0.9, 0.8, 0.5, 0.4, 0.1, 0.0, -0.5, 0.45];
    let best = qini(&truth, &y, &arms, 0).unwrap();
    let mut perm: Vec<usize> = (0..8).collect();
    let mut checked = 0;
    permute(&mut perm, 0, &mut |p| {
        let scores: Vec<f64> = p.iter().map(|&i| truth[i]).collect();
        assert!(qini(&scores, &y, &arms, 0).unwrap() <= best + 1e-12);
        checked += 1;
    });
    assert_eq!(checked, 40320);
}

fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, f);
        v.swap(k, i);
    }
}

#[test]
fn random_scores_sit_inside_the_permutation_null() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 2000;
    let arms: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.3)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.gen()).collect();
    let q = qini(&scores, &y, &arms, 0).unwrap();
    let null = qini_permutation_null(&scores, &y, &arms, 0, 200, 5).unwrap();
    let mean = null.iter().sum::<f64>() / 200.0;
    let sd = (null.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 199.0).sqrt();
    assert!(mean.abs() < 4.0 * sd / 200f64.sqrt(), "mean {mean} sd {sd}");
    assert!(q.abs() < 4.0 * sd, "q {q} sd {sd}");
}

#[test]
fn naive_curve_matches() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 40;
    let arms: Vec<usize> = (0..n).map(|i| if i < 3 { i % 2 } else { rng.gen_range(0..3) }).collect();
    let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64).collect();
    let curve = qini_curve(&scores, &y, &arms, 0).unwrap();
    // Stable descending order, recounted from scratch at every prefix.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    for k in 1..=n {
        let pre = &order[..k];
        let count = |treated: bool, conv: bool| pre.iter().filter(|&&i| (arms[i] != 0) == treated && (!conv || y[i])).count() as f64;
        let (nt, nc, rt, rc) = (count(true, false), count(false, false), count(true, true), count(false, true));
        let expect = rt - if nc > 0.0 { rc * nt / nc } else { 0.0 };
        assert!((curve[k] - expect).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn qini_is_rank_based(seed in 0u64..1000, a in 0.1f64..5.0, b in -3.0f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 60;
        let arms: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.gen_range(0..2) }).collect();
        let y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = qini(&s, &y, &arms, 0).unwrap();
        let t1: Vec<f64> = s.iter().map(|v| a * v + b).collect();
        let t2: Vec<f64> = s.iter().map(|v| v.exp()).collect();
        let t3: Vec<f64> = s.iter().map(|v| v.powi(3)).collect();
        for t in [t1, t2, t3] {
            prop_assert!((qini(&t, &y, &arms, 0).unwrap() - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_outcomes_give_zero(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arms: Vec<usize> = (0..30).map(|i| if i < 2 { i } else { rng.gen_range(0..3) }).collect();
        let s: Vec<f64> = (0..30).map(|_| rng.gen()).collect();
        prop_assert_eq!(qini(&s, &[false; 30], &arms, 0).unwrap(), 0.0);
    }
}

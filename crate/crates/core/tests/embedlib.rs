use mvgr_core::embedlib::*;
use mvgr_core::Error;
use nalgebra::{DMatrix, SymmetricEigen};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn records(n: usize, dim: usize, seed: u64) -> Vec<EmbeddingRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| EmbeddingRecord {
            region_id: i * 3 + 1,
            level: if i % 4 == 0 { Level::County } else { Level::Grid },
            vector: (0..dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
            version: "v1".into(),
            source_hash: "abc".into(),
        })
        .collect()
}

#[test]
fn round_trip_is_bit_exact() {
    let recs = records(10, 7, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("v1");
    let m = save_library(&recs, &path, "2024-01-01T00:00:00Z").unwrap();
    assert_eq!((m.count, m.dimension), (10, 7));
    let (m2, back) = load_library(&path).unwrap();
    assert_eq!(m, m2);
    for (a, b) in recs.iter().zip(&back) {
        assert_eq!(a.region_id, b.region_id);
        assert_eq!(a.level, b.level);
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.vector), bits(&b.vector));
    }
    assert!(save_library(&recs, &path, "later").is_err());
}

#[test]
fn corruption_and_bad_input_are_rejected() {
    let recs = records(10, 4, 2);
    let dir = tempfile::tempdir().unwrap();
    save_library(&recs, dir.path(), "t").unwrap();
    let vpath = dir.path().join(VECTORS_FILE);
    let mut bytes = std::fs::read(&vpath).unwrap();
    bytes[5] ^= 0x01;
    std::fs::write(&vpath, bytes).unwrap();
    assert!(matches!(load_library(dir.path()), Err(Error::Integrity(_))));

    let mut mixed = records(3, 4, 3);
    mixed[1].vector.push(0.5);
    let other = tempfile::tempdir().unwrap();
    assert!(matches!(save_library(&mixed, other.path(), "t"), Err(Error::Shape(_))));
    assert!(matches!(load_library(other.path()), Err(Error::MissingArtifact(_))));
}

fn naive_top_k(recs: &[EmbeddingRecord], q: &[f64], k: usize, level: Option<Level>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = Vec::new();
    for r in recs {
        if level.is_some_and(|l| l != r.level) {
            continue;
        }
        let mut dot = 0.0;
        let mut rn = 0.0;
        let mut qn = 0.0;
        for i in 0..q.len() {
            let v = f64::from(r.vector[i]);
            dot += v * q[i];
            rn += v * v;
            qn += q[i] * q[i];
        }
        all.push((r.region_id, dot / (rn.sqrt() * qn.sqrt())));
    }
    let mut out = Vec::new();
    while out.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for &(id, s) in &all {
            if out.iter().any(|&(o, _)| o == id) {
                continue;
            }
            if best.is_none_or(|(bid, bs)| s > bs || (s == bs && id < bid)) {
                best = Some((id, s));
            }
        }
        out.push(best.unwrap());
    }
    out
}

#[test]
fn top_k_matches_brute_force_on_500_records() {
    let recs = records(500, 12, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let q: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for (k, level) in [(1, None), (25, None), (500, None), (40, Some(Level::County))] {
            let got = top_k_similar(&recs, &q, k, level).unwrap();
            let want = naive_top_k(&recs, &q, k, level);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert_eq!(a.0, b.0);
                assert!((a.1 - b.1).abs() < 1e-12);
            }
        }
    }
    assert!(top_k_similar(&recs, &[0.0; 12], 3, None).is_err());
    assert!(top_k_similar(&recs, &[1.0; 12], 501, None).is_err());
}

#[test]
fn exact_match_ranks_first() {
    let mut recs = records(4, 4, 6);
    for (i, r) in recs.iter_mut().enumerate() {
        r.vector = (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect();
    }
    let hit = top_k_similar(&recs, &[0.0, 0.0, 3.0, 0.0], 4, None).unwrap();
    assert_eq!(hit[0], (recs[2].region_id, 1.0));
    let ids: Vec<usize> = hit[1..].iter().map(|h| h.0).collect();
    assert_eq!(ids, vec![recs[0].region_id, recs[1].region_id, recs[3].region_id]);
}

#[test]
fn kmeans_separates_and_degenerates() {
    let pts = vec![vec![0.0, 0.0], vec![0.1, 0.0], vec![10.0, 10.0], vec![10.0, 10.1]];
    let km = kmeans(&pts, 2, 1, 50).unwrap();
    assert_eq!(km.assignments[0], km.assignments[1]);
    assert_eq!(km.assignments[2], km.assignments[3]);
    assert_ne!(km.assignments[0], km.assignments[2]);
    let all = kmeans(&pts, 4, 1, 50).unwrap();
    assert_eq!(all.inertia, 0.0);
    assert!(kmeans(&pts, 0, 1, 50).is_err());
    assert!(kmeans(&pts, 5, 1, 50).is_err());
}

#[test]
fn kmeans_beats_random_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pts: Vec<Vec<f64>> = (0..100).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let km = kmeans(&pts, 5, 3, 100).unwrap();
    let labels: Vec<usize> = (0..100).map(|_| rng.gen_range(0..5)).collect();
    let mut random = 0.0;
    for c in 0..5 {
        let members: Vec<&Vec<f64>> = pts.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
        let mean: Vec<f64> = (0..3).map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64).collect();
        random += members.iter().map(|p| p.iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>()).sum::<f64>();
    }
    assert!(km.inertia <= random);
}

#[test]
fn purity_counts_majorities() {
    assert_eq!(purity(&[0, 0, 1, 1], &["a", "b", "c", "c"]).unwrap(), 0.75);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]
    #[test]
    fn kmeans_inertia_never_increases(seed in 0u64..5000, k in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts: Vec<Vec<f64>> = (0..40).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let km = kmeans(&pts, k, seed, 100).unwrap();
        for w in km.history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12));
        }
    }
}

#[test]
fn projection_of_a_line_is_one_dimensional() {
    let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0, -(i as f64)]).collect();
    let p = project_2d(&pts).unwrap();
    let ys: Vec<f64> = p.coords.iter().map(|c| c[1]).collect();
    let m = ys.iter().sum::<f64>() / 20.0;
    assert!(ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / 20.0 < 1e-9);
}

#[test]
fn projection_of_planar_points_keeps_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts: Vec<Vec<f64>> = (0..15).map(|_| vec![rng.gen_range(-5.0..5.0), rng.gen_range(-1.0..1.0)]).collect();
    let p = project_2d(&pts).unwrap();
    for i in 0..15 {
        for j in 0..15 {
            let d0 = ((pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2)).sqrt();
            let d1 = ((p.coords[i][0] - p.coords[j][0]).powi(2) + (p.coords[i][1] - p.coords[j][1]).powi(2)).sqrt();
            assert!((d0 - d1).abs() < 1e-9);
        }
    }
}

#[test]
fn reconstruction_error_is_trailing_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let pts: Vec<Vec<f64>> = (0..30).map(|_| (0..5).map(|j| rng.gen_range(-1.0..1.0) * (5 - j) as f64).collect()).collect();
    let p = project_2d(&pts).unwrap();
    let mut err = 0.0;
    for (x, c) in pts.iter().zip(&p.coords) {
        for j in 0..5 {
            let rec = p.mean[j] + c[0] * p.axes[0][j] + c[1] * p.axes[1][j];
            err += (x[j] - rec).powi(2);
        }
    }
    let x = DMatrix::from_fn(30, 5, |i, j| pts[i][j] - p.mean[j]);
    let mut ev: Vec<f64> = SymmetricEigen::new(x.transpose() * &x).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    let trailing: f64 = ev[2..].iter().sum();
    assert!((err - trailing).abs() < 1e-6, "{err} vs {trailing}");
    for axis in &p.axes {
        let lead = axis.iter().cloned().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
        assert!(lead > 0.0);
    }
}

#[test]
fn projection_csv_has_expected_header() {
    let pts = vec![vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 2.0]];
    let p = project_2d(&pts).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("projection.csv");
    write_projection_csv(&path, &[4, 5, 6], &p, &[0, 1, 0]).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("region_id,x,y,cluster\n4,"));
    assert_eq!(text.lines().count(), 4);
}

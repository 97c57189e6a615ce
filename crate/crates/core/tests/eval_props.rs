use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use unmix::autodiff::Tensor;
use unmix::eval::{match_components, read_report_document, report_to_csv, rmse, write_report, EvalReport};
use unmix::synth::{generate_sources, zscore_rows, SourceSpec};

fn truth(seed: u64) -> Tensor {
    generate_sources(200, seed, &SourceSpec::default()).unwrap().sources
}

fn random_rows(n: usize, t: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = Normal::new(0.0, 1.0).unwrap();
    Tensor::new(vec![n, t], (0..n * t).map(|_| d.sample(&mut rng)).collect()).unwrap()
}

fn scramble(x: &Tensor, perm: &[usize], signs: &[f64], scales: &[f64], shifts: &[f64]) -> Tensor {
    let rows: Vec<Vec<f64>> = perm
        .iter()
        .enumerate()
        .map(|(k, &src)| {
            x.row(src)
                .iter()
                .map(|v| signs[k] * scales[k] * v + shifts[k])
                .collect()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn rmse_examples() {
    let a = [1.0, -2.0, 0.5];
    assert_eq!(rmse(&a, &a).unwrap(), 0.0);
    let b: Vec<f64> = a.iter().map(|v| v - 2.0).collect();
    assert!((rmse(&a, &b).unwrap() - 2.0).abs() < 1e-15);
    assert_eq!(rmse(&a, &[0.0, 1.0, 2.0]).unwrap(), rmse(&[0.0, 1.0, 2.0], &a).unwrap());
    assert!(rmse(&a, &[0.0]).is_err());
}

#[test]
fn exact_recovery_inverts_the_scramble() {
    let s = truth(0);
    let scrambled = scramble(&s, &[2, 0, 1], &[1.0, -1.0, 1.0], &[1.0; 3], &[0.0; 3]);
    let r = match_components(&scrambled, &s).unwrap();
    assert!(r.average < 1e-12);
    assert!(r.per_source.iter().all(|&v| v < 1e-12));
    for (k, &src) in [2, 0, 1].iter().enumerate() {
        assert_eq!(r.permutation[src], k);
        assert_eq!(r.signs[src], if k == 1 { -1 } else { 1 });
    }
}

#[test]
fn identity_input_gives_identity_assignment() {
    let s = truth(1);
    let r = match_components(&s, &s).unwrap();
    assert_eq!(r.permutation, vec![0, 1, 2]);
    assert_eq!(r.signs, vec![1, 1, 1]);
    assert_eq!(r.average, 0.0);
}

#[test]
fn noise_level_is_recovered() {
    let d = Normal::new(0.0, 0.1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (n, t) = (3, 20_000);
    let s = zscore_rows(&random_rows(n, t, 4)).unwrap();
    let noisy = Tensor::new(vec![n, t], s.data().iter().map(|v| v + d.sample(&mut rng)).collect()).unwrap();
    let r = match_components(&noisy, &s).unwrap();
    for &v in &r.per_source {
        assert!((v - 0.1).abs() < 0.02, "{v}");
    }
}

#[test]
fn degenerate_inferred_rejected() {
    let s = truth(0);
    let mut bad = s.clone();
    bad.data_mut()[..200].fill(3.0);
    assert!(match_components(&bad, &s).is_err());
    assert!(match_components(&s, &random_rows(3, 100, 0)).is_err());
}

#[test]
fn csv_layout_and_json_twin() {
    let reports = vec![
        EvalReport::from_values("gp-avae", "underdetermined", vec![0.5, 0.25, 0.75]),
        EvalReport::from_values("half-gp-avae", "underdetermined", vec![0.1, 0.2, 0.3]),
    ];
    let csv = report_to_csv(&reports).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "source,gp-avae,half-gp-avae");
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("Average,0.5,0.2"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.csv");
    write_report(&reports, 7, "abc", serde_json::json!({"t": 200}), &path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), csv);
    let doc = read_report_document(&path.with_extension("json")).unwrap();
    assert_eq!(doc.seed, 7);
    assert_eq!(doc.config_hash, "abc");
    assert_eq!(doc.reports, reports);
    for r in &doc.reports {
        let mean = r.per_source.iter().sum::<f64>() / 3.0;
        assert!((r.average - mean).abs() < 1e-12);
    }
    assert!(write_report(
        &reports,
        0,
        "",
        serde_json::Value::Null,
        &dir.path().join("missing/report.csv")
    )
    .is_err());
    assert!(report_to_csv(&[]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn invariant_to_permutation_sign_and_affine_maps(
        seed in 0u64..50,
        perm in Just(vec![0usize, 1, 2]).prop_shuffle(),
        signs in prop::collection::vec(prop::bool::ANY, 3),
        scales in prop::collection::vec(0.1f64..10.0, 3),
        shifts in prop::collection::vec(-5.0f64..5.0, 3),
    ) {
        let s = truth(seed % 4);
        let inferred = random_rows(3, 200, seed);
        let base = match_components(&inferred, &s).unwrap();
        let signs: Vec<f64> = signs.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let moved = scramble(&inferred, &perm, &signs, &scales, &shifts);
        let r = match_components(&moved, &s).unwrap();
        prop_assert!((r.average - base.average).abs() < 1e-12);
        let mut a = r.per_source.clone();
        let mut b = base.per_source.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matched_never_worse_than_identity(seed in 0u64..1000) {
        let s = truth(seed % 4);
        let inferred = zscore_rows(&random_rows(3, 200, seed)).unwrap();
        let r = match_components(&inferred, &s).unwrap();
        let identity: f64 = (0..3).map(|i| rmse(inferred.row(i), s.row(i)).unwrap()).sum::<f64>() / 3.0;
        prop_assert!(r.average <= identity + 1e-12);
        prop_assert!(r.per_source.iter().all(|&v| v >= 0.0));
        let mut p = r.permutation.clone();
        p.sort();
        prop_assert_eq!(p, vec![0, 1, 2]);
    }
}

use cgmm_core::io::{load_csv, load_params, save_csv, save_json, ParamsDocument};
use cgmm_core::linalg::Matrix;
use cgmm_core::sim::{fit_gmm_baseline, generate, SimModel, SimModelSpec};
use cgmm_core::{fit_em, impute, Dataset, DesignSpec, FitConfig};
use proptest::prelude::*;

fn m1_sample(n: usize, seed: u64) -> Dataset {
    let mut spec = SimModelSpec::new(SimModel::M1, seed);
    spec.n = n;
    spec.population = 10 * n;
    generate(&spec, 0).unwrap().sample
}

#[test]
fn saved_params_impute_exactly_like_the_fit() {
    let data = m1_sample(400, 3);
    let spec = DesignSpec::full(2);
    let cfg = FitConfig {
        n_components: 3,
        ..FitConfig::default()
    };
    let report = fit_em(&data, &spec, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("params.json");
    save_json(&path, &ParamsDocument::from_report(&report)).unwrap();
    let doc = load_params(&path).unwrap();
    assert_eq!(doc.params::<f64>(), report.params);
    let a = impute(&data, &spec, &report.params).unwrap();
    let b = impute(&data, &doc.design, &doc.params()).unwrap();
    assert_eq!(a.y_imputed, b.y_imputed);
}

#[test]
fn joint_mixture_recovers_model_one_means() {
    let data = m1_sample(1000, 11);
    let cfg = FitConfig {
        n_components: 3,
        ..FitConfig::default()
    };
    let fit = fit_gmm_baseline(&data, &cfg).unwrap();
    let truth = [[0.0, -2.0, 1.0], [2.0, 0.0, 3.0], [-2.0, 2.0, -3.0]];
    for mu in truth {
        let best = (0..3)
            .map(|g| {
                let m = fit.report.params.coef[g].row(0);
                m.iter().zip(&mu).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best < 0.35, "no fitted component near {mu:?}");
    }
}

#[test]
fn single_precision_fit_tracks_double() {
    let data = m1_sample(300, 5);
    let x32 = data.x().cast::<f32>();
    let y32 = data.y().cast::<f32>();
    let data32 = cgmm_core::model::Dataset::<f32>::new(x32, y32, data.mask().to_vec()).unwrap();
    let cfg = FitConfig {
        n_components: 1,
        ..FitConfig::default()
    };
    let spec = DesignSpec::full(2);
    let a = fit_em(&data, &spec, &cfg).unwrap();
    let b = fit_em(&data32, &spec, &cfg).unwrap();
    for k in 0..3 {
        assert!((a.params.coef[0][(k, 0)] - f64::from(b.params.coef[0][(k, 0)])).abs() < 1e-3);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn csv_round_trip(
        n in 1usize..12,
        q in 1usize..4,
        p in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut s = seed;
        let mut next = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        let x = Matrix::from_vec(n, q, (0..n * q).map(|_| 1e3 * (next() - 0.5)).collect());
        let y = Matrix::from_vec(n, p, (0..n * p).map(|_| (next() - 0.5) / 7.0).collect());
        let mask: Vec<bool> = (0..n * p).map(|_| next() < 0.7).collect();
        let data = Dataset::new(x, y, mask).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&path, &data).unwrap();
        let back: Dataset = load_csv(&path).unwrap();
        prop_assert_eq!(back.x(), data.x());
        prop_assert_eq!(back.mask(), data.mask());
        for i in 0..n {
            for j in 0..p {
                if data.is_observed(i, j) {
                    prop_assert_eq!(back.y()[(i, j)], data.y()[(i, j)]);
                }
            }
        }
    }
}

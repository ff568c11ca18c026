use mati::data::{self, BinningScheme, TabularDataset};
use mati::gmm::{self, GaussianComponent, GmmModel};
use mati::synth::{self, smoter_interpolate, Heom, Sample};
use mati::{eval, rng, ttsa, Matrix};
use proptest::prelude::*;

fn finite(lo: f64, hi: f64) -> impl Strategy<Value = f64> {
    lo..hi
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(w in prop::collection::vec(finite(-50.0, 50.0), 1..10)) {
        let p = ttsa::softmax(&w);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&v| v > 0.0 || v == 0.0));
        let shifted: Vec<f64> = w.iter().map(|v| v + 7.5).collect();
        for (a, b) in p.iter().zip(ttsa::softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn apportion_hits_total(total in 0usize..5000, w in prop::collection::vec(finite(0.01, 10.0), 1..8)) {
        let c = data::apportion(total, &w);
        prop_assert_eq!(c.iter().sum::<usize>(), total);
        let s: f64 = w.iter().sum();
        for (ci, wi) in c.iter().zip(&w) {
            let quota = total as f64 * wi / s;
            prop_assert!((*ci as f64 - quota).abs() < 1.0 + 1e-9);
        }
    }

    #[test]
    fn reciprocal_weights_sum_to_one(f in prop::collection::vec(finite(0.0, 1.0), 1..20)) {
        let w = data::reciprocal_weights(&f);
        if f.iter().any(|&v| v > 0.0) {
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        for (wi, fi) in w.iter().zip(&f) {
            prop_assert_eq!(*fi == 0.0, *wi == 0.0);
        }
    }

    #[test]
    fn bins_contain_their_labels(ys in prop::collection::vec(finite(-100.0, 100.0), 1..200), width in 0.5f64..20.0) {
        let scheme = BinningScheme::covering(&ys, width, None).unwrap();
        for &y in &ys {
            let b = data::bin_index(y, &scheme);
            let (lo, hi) = scheme.edges(b);
            prop_assert!(y >= lo - 1e-9 && y <= hi + 1e-9, "{y} not in [{lo}, {hi}]");
        }
        let counts = data::bin_counts(&ys, &scheme);
        prop_assert_eq!(counts.iter().sum::<usize>(), ys.len());
    }

    #[test]
    fn smoter_stays_between_parents(
        a in prop::collection::vec(finite(-10.0, 10.0), 3),
        b in prop::collection::vec(finite(-10.0, 10.0), 3),
        ya in finite(-5.0, 5.0),
        yb in finite(-5.0, 5.0),
        u in 0.0f64..1.0,
    ) {
        let ds = TabularDataset::numeric(Matrix::from_rows(&[a.clone(), b.clone()]).unwrap(), vec![ya, yb]).unwrap();
        let metric = Heom::fit(&ds);
        let (x, y) = smoter_interpolate(
            Sample { features: &a, target: ya },
            Sample { features: &b, target: yb },
            u,
            |_| true,
            &metric,
        );
        prop_assert!(y >= ya.min(yb) - 1e-12 && y <= ya.max(yb) + 1e-12);
        for j in 0..3 {
            prop_assert!(x[j] >= a[j].min(b[j]) - 1e-12 && x[j] <= a[j].max(b[j]) + 1e-12);
        }
    }

    #[test]
    fn relevance_lies_in_unit_interval(ys in prop::collection::vec(finite(0.0, 100.0), 5..300), probe in finite(-50.0, 150.0)) {
        if let Ok(r) = synth::build_relevance(&ys) {
            let v = r.eval(probe);
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn pairwise_gap_equals_centered_form(v in prop::collection::vec(finite(-1e3, 1e3), 2..60)) {
        let (pairwise, center) = eval::gap_center_identity(&v).unwrap();
        let scale = pairwise.abs().max(center.abs()).max(1e-12);
        prop_assert!((pairwise - center).abs() / scale < 1e-9);
    }

    #[test]
    fn corruption_only_borrows_column_values(rows in 2usize..30, cols in 1usize..5, r in 0.0f64..1.0, seed in any::<u64>()) {
        let mut g = rng::stream(seed, "prop-corrupt");
        let data: Vec<f64> = (0..rows * cols).map(|i| i as f64).collect();
        let x = Matrix::new(rows, cols, data).unwrap();
        let c = ttsa::corrupt(&x, r, &mut g).unwrap();
        for i in 0..rows {
            for j in 0..cols {
                let col: Vec<f64> = x.column(j).collect();
                prop_assert!(col.contains(&c.get(i, j)));
            }
        }
        let same = ttsa::corrupt(&x, 0.0, &mut g).unwrap();
        prop_assert_eq!(same, x);
    }

    #[test]
    fn posterior_assignment_is_in_range(
        means in prop::collection::vec(finite(-20.0, 20.0), 1..5),
        y in finite(-50.0, 50.0),
    ) {
        let k = means.len();
        let mut sorted = means.clone();
        sorted.sort_by(f64::total_cmp);
        let model = GmmModel {
            components: sorted
                .iter()
                .map(|&m| GaussianComponent { weight: 1.0 / k as f64, mean: m, stddev: 1.0 })
                .collect(),
            log_likelihood: 0.0,
            aic: 0.0,
            n_iterations: 0,
            converged: true,
            log_likelihood_trace: Vec::new(),
        };
        let n = gmm::posterior_assign(&model, y);
        prop_assert!(n < k);
        let nearest = sorted
            .iter()
            .map(|m| (m - y).abs())
            .fold(f64::INFINITY, f64::min);
        prop_assert!(((sorted[n] - y).abs() - nearest).abs() < 1e-9);
    }
}

use std::sync::OnceLock;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sqbox::envs::{
    battle_transition, features_of, sample_trajectories, BattleConfig, BattleState, EnvConfig,
    TamariskConfig,
};
use sqbox::eval::{
    coverage_ci_lower, failure_table, run_gaussian_study, run_mdp_study, run_mdp_study_on,
    run_quantile_ci_study, GaussianStudyConfig, MdpStudyConfig, QuantileCiConfig,
};
use sqbox::forest::{Forest, ForestParams};
use sqbox::io::{read_trajectories, write_trajectories, TrajectoryHeader};
use sqbox::multibox::{fit_sbox, PointSet};
use sqbox::quantile::{
    binomial_cdf, conformal_index, conformal_quantile, inflated_level, quantile_ucb,
    QuantileStrategy, ScoreList,
};
use sqbox::trajband::{
    band_covers, calibrate_sqbox, exceedance, fit_sqbox, Band, BehaviorMatrix, SplitConfig,
    SqboxModel,
};

fn config() -> ProptestConfig {
    ProptestConfig {
        cases: 1000,
        failure_persistence: None,
        ..ProptestConfig::default()
    }
}

fn pool(threads: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
}

fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0f64..100.0, 1..200)
}

/// A miscoverage level valid for `n` calibration scores.
fn valid_delta(n: usize, u: f64) -> f64 {
    let lo = 1.0 / (n as f64 + 1.0);
    lo + u * (0.99 - lo).max(0.0)
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn conformal_index_grows_as_delta_shrinks(n in 1usize..500, u1 in 0.0f64..1.0, u2 in 0.0f64..1.0) {
        let (d1, d2) = (valid_delta(n, u1.min(u2)), valid_delta(n, u1.max(u2)));
        prop_assert!(conformal_index(n, d1).unwrap() >= conformal_index(n, d2).unwrap());
        prop_assert_eq!(conformal_index(n, 1.0 / (n as f64 + 1.0)).unwrap(), n);
    }

    #[test]
    fn strict_quantile_ignores_score_order(scores in scores_strategy(), u in 0.0f64..1.0, seed: u64) {
        let delta = valid_delta(scores.len(), u);
        let mut shuffled = scores.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = conformal_quantile(&ScoreList::new(scores).unwrap(), delta, QuantileStrategy::Strict).unwrap();
        let b = conformal_quantile(&ScoreList::new(shuffled).unwrap(), delta, QuantileStrategy::Strict).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn ucb_dominates_strict(scores in scores_strategy(), u in 0.0f64..1.0, conf in 0.5f64..0.999) {
        let n = scores.len();
        let delta = valid_delta(n, u);
        let s = ScoreList::new(scores).unwrap();
        let strict = conformal_quantile(&s, delta, QuantileStrategy::Strict).unwrap();
        let ucb = quantile_ucb(&s, inflated_level(n, delta), conf).unwrap();
        prop_assert!(ucb.rank >= strict.rank);
        prop_assert!(ucb.value >= strict.value);
    }

    #[test]
    fn binomial_complement_identity(n in 1u64..400, k_frac in 0.0f64..1.0, p in 0.0f64..=1.0) {
        let k = ((n - 1) as f64 * k_frac) as u64;
        let total = binomial_cdf(k, n, p) + binomial_cdf(n - k - 1, n, 1.0 - p);
        prop_assert!((total - 1.0).abs() < 1e-12, "{}", total);
    }

    #[test]
    fn refinement_gap_is_bounded(k in 1usize..5000, u in 0.0f64..1.0) {
        // The gap is a sawtooth, not monotone, but it always lies in
        // [0, 1/(k+1)) and that envelope shrinks with k.
        let delta = valid_delta(k, u);
        let idx = conformal_index(k, delta).unwrap();
        let gap = idx as f64 / (k + 1) as f64 - (1.0 - delta);
        prop_assert!(gap > -1e-9 && gap < 1.0 / (k + 1) as f64 + 1e-12);
    }
}

fn point_set_strategy() -> impl Strategy<Value = (usize, Vec<f64>)> {
    (1usize..5, 12usize..80)
        .prop_flat_map(|(d, n)| (Just(d), prop::collection::vec(-10.0f64..10.0, n * d)))
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn sbox_ignores_calibration_row_order((d, values) in point_set_strategy(), seed: u64) {
        let n = values.len() / d;
        let m = 2 + (seed as usize % (n - 4));
        let mut rows: Vec<Vec<f64>> = values.chunks(d).map(<[f64]>::to_vec).collect();
        let delta = valid_delta(n - m, 0.3);
        let a = fit_sbox(&PointSet::from_rows(&rows).unwrap(), m, delta, QuantileStrategy::Strict);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tail = &mut rows[m..];
        for i in (1..tail.len()).rev() {
            tail.swap(i, rng.random_range(0..=i));
        }
        let b = fit_sbox(&PointSet::from_rows(&rows).unwrap(), m, delta, QuantileStrategy::Strict);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sbox_beta_monotone_in_delta((d, values) in point_set_strategy(), u1 in 0.0f64..1.0, u2 in 0.0f64..1.0) {
        let n = values.len() / d;
        let m = n / 3;
        let pts = PointSet::new(values, d).unwrap();
        let (d1, d2) = (valid_delta(n - m, u1.min(u2)), valid_delta(n - m, u1.max(u2)));
        if let (Ok(b1), Ok(b2)) = (fit_sbox(&pts, m, d1, QuantileStrategy::Strict), fit_sbox(&pts, m, d2, QuantileStrategy::Strict)) {
            prop_assert!(b1.beta >= b2.beta);
        }
    }

    #[test]
    fn sbox_ci_beta_dominates((d, values) in point_set_strategy(), u in 0.0f64..1.0) {
        let n = values.len() / d;
        let m = n / 3;
        let pts = PointSet::new(values, d).unwrap();
        let delta = valid_delta(n - m, u).min(0.5);
        if let Ok(strict) = fit_sbox(&pts, m, delta, QuantileStrategy::Strict) {
            let ci = fit_sbox(&pts, m, delta, QuantileStrategy::ucb_for(delta).unwrap()).unwrap();
            prop_assert!(ci.beta >= strict.beta);
        }
    }
}

fn forest_data() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, u64)> {
    (10usize..60, 1usize..4, any::<u64>()).prop_map(|(n, d, seed)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..d)
                    .map(|_| rng.random_range(0.0..3.0f64).round())
                    .collect()
            })
            .collect();
        let y: Vec<f64> = x
            .iter()
            .map(|r| r.iter().sum::<f64>() + rng.random_range(-1.0..1.0))
            .collect();
        (x, y, seed)
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn forest_quantiles_are_monotone_bounded_and_normalized(
        (x, y, seed) in forest_data(),
        a1 in 0.0f64..=1.0,
        a2 in 0.0f64..=1.0,
        q in prop::collection::vec(-1.0f64..4.0, 3),
    ) {
        let params = ForestParams { tree_count: 5, min_leaf: 3, seed, ..ForestParams::default() };
        let forest = Forest::fit(&x, &y, params).unwrap();
        let query = &q[..x[0].len()];
        let (lo_a, hi_a) = (a1.min(a2), a1.max(a2));
        let v = forest.predict_quantiles(query, &[lo_a, hi_a]).unwrap();
        prop_assert!(v[0] <= v[1]);
        let (min, max) = y.iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
        prop_assert!(v[0] >= min && v[1] <= max);
        let total: f64 = forest.weights(query).unwrap().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forest_is_identical_across_thread_counts((x, y, seed) in forest_data()) {
        let params = ForestParams { tree_count: 8, min_leaf: 2, seed, ..ForestParams::default() };
        let serial = pool(1).install(|| Forest::fit(&x, &y, params).unwrap());
        let parallel = pool(4).install(|| Forest::fit(&x, &y, params).unwrap());
        prop_assert_eq!(serial, parallel);
    }
}

fn band_and_point() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    (1usize..20).prop_flat_map(|h| {
        (
            prop::collection::vec(-5.0f64..5.0, h),
            prop::collection::vec(0.0f64..3.0, h),
            prop::collection::vec(-8.0f64..8.0, h),
        )
            .prop_map(|(lo, width, b)| {
                let hi = lo.iter().zip(&width).map(|(l, w)| l + w).collect();
                (lo, hi, b)
            })
    })
}

/// A small fitted box model shared by the correction checks.
fn shared_model() -> &'static SqboxModel {
    static MODEL: OnceLock<SqboxModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let env = EnvConfig::Battle(BattleConfig::default());
        let recs = sample_trajectories(&env, 600, 20, 77).unwrap();
        let behaviors =
            BehaviorMatrix::from_rows(&recs.iter().map(|r| r.behavior.clone()).collect::<Vec<_>>())
                .unwrap();
        let params = ForestParams {
            tree_count: 30,
            min_leaf: 10,
            ..ForestParams::default()
        };
        let split = SplitConfig::sqbox(300, 100, 0.1, 0.2, QuantileStrategy::Strict);
        fit_sqbox(&features_of(&recs), &behaviors, split, params).unwrap()
    })
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn exceedance_is_nonnegative_and_zero_exactly_inside((lo, hi, b) in band_and_point()) {
        let x = exceedance(&b, &lo, &hi).unwrap();
        for t in 0..b.len() {
            prop_assert!(x[t] >= 0.0);
            prop_assert_eq!(x[t] == 0.0, lo[t] <= b[t] && b[t] <= hi[t]);
        }
        // A zero total-exceedance bound accepts exactly the covered paths.
        let total: f64 = x.iter().sum();
        let band = Band { lo: lo.clone(), hi: hi.clone() };
        prop_assert_eq!(band_covers(&band, &b).unwrap(), total <= 0.0);
    }

    #[test]
    fn ucb_scale_factor_dominates_strict(
        rows in prop::collection::vec(prop::collection::vec(0.0f64..4.0, 3), 30..120),
        u in 0.0f64..1.0,
    ) {
        let m = 10;
        let delta = valid_delta(rows.len() - m, u).min(0.5);
        let strict = calibrate_sqbox(&rows, m, delta, QuantileStrategy::Strict);
        let ucb = calibrate_sqbox(&rows, m, delta, QuantileStrategy::ucb_for(delta).unwrap());
        if let (Ok(s), Ok(c)) = (strict, ucb) {
            prop_assert_eq!(&s.sigma, &c.sigma);
            prop_assert!(c.beta.value >= s.beta.value);
        }
    }

    #[test]
    fn correction_does_not_depend_on_start_state(blue in 5u32..=20, red in 5u32..=10) {
        let model = shared_model();
        let s0 = [blue as f64, red as f64];
        let inner = model.inner_band(&s0).unwrap();
        let band = model.predict_band(&s0).unwrap();
        let reference = model.inner_band(&[5.0, 5.0]).unwrap();
        let reference_band = model.predict_band(&[5.0, 5.0]).unwrap();
        for t in 0..band.horizon() {
            let up = (band.hi[t] - inner.hi[t]) - (reference_band.hi[t] - reference.hi[t]);
            let down = (inner.lo[t] - band.lo[t]) - (reference.lo[t] - reference_band.lo[t]);
            prop_assert!(up.abs() < 1e-9 && down.abs() < 1e-9);
        }
    }
}

proptest! {
    #![proptest_config(config())]

    #[test]
    fn trajectories_are_identical_across_thread_counts(seed: u64, battle: bool, n in 1usize..6) {
        let env = if battle {
            EnvConfig::Battle(BattleConfig::default())
        } else {
            EnvConfig::Tamarisk(TamariskConfig::default())
        };
        let horizon = env.horizon();
        let serial = pool(1).install(|| sample_trajectories(&env, n, horizon, seed).unwrap());
        let parallel = pool(4).install(|| sample_trajectories(&env, n, horizon, seed).unwrap());
        prop_assert_eq!(&serial, &parallel);
        if !battle {
            for r in &serial {
                prop_assert!(r.rewards.iter().all(|&x| x <= 0.0));
                prop_assert!(r.behavior.windows(2).all(|w| w[1] <= w[0]));
            }
        }
    }

    #[test]
    fn battle_units_are_conserved(seed: u64) {
        let cfg = BattleConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s: BattleState = cfg.start(&mut rng);
        let (mut total, mut noise) = (0.0, 0.0);
        for _ in 0..cfg.horizon {
            let tr = battle_transition(&s, &cfg, &mut rng);
            prop_assert!(tr.state.blue <= s.blue);
            prop_assert_eq!(tr.state.blue, s.blue - tr.blue_lost);
            prop_assert_eq!(tr.state.red + tr.red_lost, s.red + tr.reinforcements);
            if s.t != cfg.reinforce_at {
                prop_assert_eq!(tr.reinforcements, 0);
            }
            total += tr.reward();
            noise += tr.noise;
            let integral = total - noise;
            prop_assert!((integral - integral.round()).abs() < 1e-9);
            s = tr.state;
        }
    }

    #[test]
    fn ci_lower_monotone(n in 1u64..500, h_frac in 0.0f64..=1.0, c1 in 0.5f64..0.999, c2 in 0.5f64..0.999) {
        let hits = (n as f64 * h_frac) as u64;
        let conf = c1.min(c2);
        let lb = coverage_ci_lower(hits, n, conf);
        if hits < n {
            prop_assert!(coverage_ci_lower(hits + 1, n, conf) >= lb);
        }
        prop_assert!(coverage_ci_lower(hits, n, c1.max(c2)) <= lb + 1e-12);
    }

    #[test]
    fn failure_flags_follow_from_counts(
        cells in prop::collection::vec((0i64..4, 0i64..4, any::<bool>()), 1..300),
        delta in 0.01f64..0.5,
    ) {
        let keys: Vec<(i64, i64)> = cells.iter().map(|c| (c.0, c.1)).collect();
        let violations: Vec<bool> = cells.iter().map(|c| c.2).collect();
        let table = failure_table(&keys, &violations, delta).unwrap();
        prop_assert_eq!(table.total_trials(), cells.len());
        for cell in &table.cells {
            let trials = keys.iter().filter(|k| **k == cell.key).count();
            let bad = keys.iter().zip(&violations).filter(|(k, v)| **k == cell.key && **v).count();
            prop_assert_eq!((cell.trials, cell.violations), (trials, bad));
            let tail = if bad == 0 { 1.0 } else { 1.0 - binomial_cdf(bad as u64 - 1, trials as u64, delta) };
            prop_assert!((cell.p_value - tail).abs() < 1e-9);
            if (tail - 0.05).abs() > 1e-9 {
                prop_assert_eq!(cell.flagged, tail < 0.05);
            }
        }
    }
}

fn small_study(env: EnvConfig) -> MdpStudyConfig {
    MdpStudyConfig {
        n_trajectories: 900,
        n_test: 300,
        sizes: vec![200, 300],
        deltas: vec![0.2, 0.1],
        m: 50,
        forest: ForestParams {
            tree_count: 10,
            min_leaf: 10,
            ..ForestParams::default()
        },
        failure_size: 300,
        examples: 1,
        seed: 5,
        ..MdpStudyConfig::new(env)
    }
}

#[test]
fn study_rerun_from_saved_trajectories_is_bit_identical() {
    for env in [
        EnvConfig::Battle(BattleConfig::default()),
        EnvConfig::Tamarisk(TamariskConfig::default()),
    ] {
        let config = small_study(env.clone());
        let direct = run_mdp_study(&config).unwrap();
        let recs =
            sample_trajectories(&env, config.n_trajectories, env.horizon(), config.seed).unwrap();
        let header = TrajectoryHeader::new(env.clone(), recs.len(), env.horizon(), config.seed);
        let mut buf = Vec::new();
        write_trajectories(&mut buf, &header, &recs).unwrap();
        let (_, loaded) = read_trajectories(buf.as_slice()).unwrap();
        let replay = run_mdp_study_on(&config, &loaded).unwrap();
        assert_eq!(direct, replay);
        assert_eq!(
            serde_json::to_string(&direct).unwrap(),
            serde_json::to_string(&replay).unwrap()
        );
    }
}

#[test]
fn box_and_quantile_reports_are_deterministic() {
    let config = GaussianStudyConfig {
        replications: 4,
        n_test: 200,
        ..GaussianStudyConfig::default()
    };
    let a = pool(1).install(|| run_gaussian_study(&config).unwrap());
    let b = pool(3).install(|| run_gaussian_study(&config).unwrap());
    assert_eq!(a, b);
    let qc = QuantileCiConfig {
        trials: 20,
        sizes: vec![200, 400],
        ..QuantileCiConfig::default()
    };
    assert_eq!(
        run_quantile_ci_study(&qc).unwrap(),
        run_quantile_ci_study(&qc).unwrap()
    );
}

#[test]
fn bonferroni_overcovers_correlated_gaussians() {
    let config = GaussianStudyConfig {
        replications: 20,
        n_test: 1000,
        rhos: vec![0.9],
        ..GaussianStudyConfig::default()
    };
    let report = run_gaussian_study(&config).unwrap();
    for &delta in &config.deltas {
        let sbox = report.find(0.9, delta, "SBox").unwrap();
        let bonf = report.find(0.9, delta, "Bonferroni").unwrap();
        assert!(bonf.mean_coverage > sbox.mean_coverage, "delta {delta}");
        assert!(bonf.mean_width > sbox.mean_width);
    }
}

#[test]
fn strict_marginal_coverage_is_tight() {
    // Exchangeable scores: P(new <= q) = k/(n+1) for the rank-k quantile.
    let (n, delta, reps) = (39usize, 0.1, 40_000usize);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut hits = 0usize;
    for _ in 0..reps {
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let q = conformal_quantile(
            &ScoreList::new(scores).unwrap(),
            delta,
            QuantileStrategy::Strict,
        )
        .unwrap();
        hits += usize::from(rng.random::<f64>() <= q.value);
    }
    let rate = hits as f64 / reps as f64;
    let se = (0.9 * 0.1 / reps as f64).sqrt();
    assert!(rate >= 1.0 - delta - 4.0 * se, "{rate}");
    assert!(
        rate <= 1.0 - delta + 1.0 / (n as f64 + 1.0) + 4.0 * se,
        "{rate}"
    );
}

//! Consistency of the proxy estimator against the analytic reward score:
//! the exact-posterior harness isolates Monte-Carlo error, and the
//! first-order comparator shows the expected temperature ordering.

use didr_core::diffusion::ChainKind;
use didr_core::drp::{cg_approx, drp_estimate, DrpConfig, DrpReference};
use didr_core::gmm::GmmSpec;
use didr_core::reward::RewardSpec;
use didr_core::rng::purpose;
use didr_core::schedule::VpSchedule;
use didr_core::tilted::TiltedTarget;
use ndarray::Array2;

fn estimate_at(
    gmm: &GmmSpec,
    schedule: VpSchedule,
    reward: &RewardSpec,
    t: f64,
    x_t: f64,
    k: usize,
    path_salt: u64,
) -> (f64, Option<f64>) {
    let cfg = DrpConfig::new(k, 1, reward.tau, ChainKind::DdpmStochastic);
    let reference = DrpReference::ExactPosterior { gmm, schedule };
    let out = drp_estimate(
        &Array2::from_elem((1, 1), x_t),
        &Array2::from_elem((1, 1), t),
        &cfg,
        reward,
        &reference,
        4_000 + path_salt,
        &[purpose::TEST, 60, path_salt],
        k <= 50_000,
    )
    .unwrap();
    let se = out.rows.map(|rows| {
        // delta-method standard error of the self-normalized ratio
        let s_hat = out.s_hat[[0, 0]];
        let n = rows.len() as f64;
        let b_bar = rows.iter().map(|r| (r.reward / reward.tau).exp()).sum::<f64>() / n;
        let var = rows
            .iter()
            .map(|r| {
                let b = (r.reward / reward.tau).exp();
                let a = b * r.gradient / reward.tau;
                let d = a - s_hat * b;
                d * d
            })
            .sum::<f64>()
            / n;
        (var / n).sqrt() / b_bar
    });
    (out.s_hat[[0, 0]], se)
}

#[test]
fn exact_posterior_estimate_matches_analytic_drs_within_monte_carlo_error() {
    let gmm = GmmSpec::symmetric_bimodal(2.0, 0.5);
    let schedule = VpSchedule::toy_default();
    let reward = RewardSpec::smooth(20.0, 1.0).unwrap();
    let target = TiltedTarget::new(gmm.clone(), reward).unwrap();
    for (t, x_t) in [(0.05, 0.3), (0.12, -0.4), (0.02, 0.05)] {
        let truth = target.drs(&schedule, t, x_t).unwrap();
        let (s_hat, se) = estimate_at(&gmm, schedule, &reward, t, x_t, 40_000, 1);
        let se = se.expect("rows requested");
        assert!(
            (s_hat - truth).abs() < 3.0 * se + 1e-4,
            "t={t} x_t={x_t}: {s_hat} vs {truth} (se {se})"
        );
    }
}

#[test]
fn monte_carlo_error_shrinks_with_chain_count() {
    // a unimodal posterior keeps the quantile-transport Jacobian bounded, so
    // the error follows the square-root law cleanly; bimodal posteriors have
    // rare valley-crossing paths with large transport velocities, which is
    // why the consistency test above leans on self-estimated standard errors
    let gmm = GmmSpec::single(0.0, 1.0);
    let schedule = VpSchedule::toy_default();
    let reward = RewardSpec::smooth(2.0, 1.0).unwrap();
    let target = TiltedTarget::new(gmm.clone(), reward).unwrap();
    let (t, x_t) = (0.1, 0.5);
    let truth = target.drs(&schedule, t, x_t).unwrap();
    let rmse = |k: usize| -> f64 {
        let reps = 24;
        let mut acc = 0.0;
        for rep in 0..reps {
            let (s_hat, _) = estimate_at(&gmm, schedule, &reward, t, x_t, k, 100 + rep);
            acc += (s_hat - truth) * (s_hat - truth);
        }
        (acc / reps as f64).sqrt()
    };
    let (e_small, e_large) = (rmse(100), rmse(10_000));
    println!("rmse K=100: {e_small}, K=10000: {e_large}");
    // square-root law predicts a factor of 10; demand at least 5 to leave
    // room for replicate noise
    assert!(e_large < e_small / 5.0, "{e_large} vs {e_small}");
}

#[test]
fn classifier_guidance_gap_orders_with_temperature() {
    let gmm = GmmSpec::symmetric_bimodal(2.0, 0.5);
    let schedule = VpSchedule::toy_default();
    let points: Vec<(f64, f64)> = vec![
        (0.02, -0.6),
        (0.02, 0.0),
        (0.02, 0.7),
        (0.05, -0.4),
        (0.05, 0.2),
        (0.1, -0.8),
        (0.1, 0.5),
        (0.2, 0.0),
    ];
    let gap = |tau: f64| -> Vec<f64> {
        let reward = RewardSpec::hard(tau).unwrap();
        let target = TiltedTarget::new(gmm.clone(), reward).unwrap();
        points
            .iter()
            .map(|&(t, x)| {
                let drs = target.drs(&schedule, t, x).unwrap();
                let cg = cg_approx(&gmm, &schedule, &reward, t, x).unwrap();
                (cg - drs).abs() / drs.abs().max(1e-12)
            })
            .collect()
    };
    let weak = gap(100.0);
    let strong = gap(0.5);
    for (i, (&w, &s)) in weak.iter().zip(strong.iter()).enumerate() {
        assert!(w < 0.02, "weak-tilt gap too large at point {i}: {w}");
        assert!(s > w, "strong tilt should be harder to linearize at point {i}: {s} vs {w}");
    }
}

#[test]
fn weights_are_a_probability_vector_across_kinds() {
    let gmm = GmmSpec::symmetric_bimodal(2.0, 0.5);
    let schedule = VpSchedule::toy_default();
    let field = didr_core::diffusion::GmmScoreField { gmm: &gmm, schedule };
    let reward = RewardSpec::smooth(20.0, 1.0).unwrap();
    let cfg = DrpConfig::new(5, 3, 1.0, ChainKind::DdpmStochastic);
    let reference = DrpReference::Score { field: &field, schedule };
    let out = drp_estimate(
        &ndarray::array![[0.3], [-1.0]],
        &ndarray::array![[0.04], [0.2]],
        &cfg,
        &reward,
        &reference,
        17,
        &[purpose::TEST, 61],
        true,
    )
    .unwrap();
    let rows = out.rows.unwrap();
    assert_eq!(rows.len(), 10);
    for sample in 0..2 {
        let total: f64 =
            rows.iter().filter(|r| r.sample == sample).map(|r| r.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(rows
            .iter()
            .filter(|r| r.sample == sample)
            .all(|r| r.weight >= 0.0));
    }
}

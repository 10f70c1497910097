//! Monte-Carlo and finite-difference oracles for the closed-form analytics:
//! forward marginals, the tilted target, the reward score correction, and
//! the flow velocity field.

use didr_core::diffusion::forward_sample;
use didr_core::gmm::GmmSpec;
use didr_core::reward::RewardSpec;
use didr_core::rng::{purpose, RngStream};
use didr_core::schedule::{vp_marginal, VpSchedule};
use didr_core::tilted::TiltedTarget;
use didr_core::velocity::analytic_velocity;

#[test]
fn vp_marginal_matches_forward_monte_carlo() {
    // push 10^6 samples through the forward kernel at alpha_bar = e^-1 and
    // compare moments against the closed-form marginal
    let g = GmmSpec::symmetric_bimodal(2.0, 0.5);
    let s = VpSchedule::toy_default();
    let t = 0.05;
    let marginal = vp_marginal(&g, &s, t).unwrap();
    let n = 1_000_000;
    let mut rng = RngStream::new(7, &[purpose::TEST, 40]);
    let (mut m1, mut m2) = (0.0, 0.0);
    for _ in 0..n {
        let x0 = g.sample(&mut rng);
        let eps = rng.normal();
        let xt = forward_sample(x0, &s, t, eps).unwrap();
        m1 += xt;
        m2 += xt * xt;
    }
    m1 /= n as f64;
    m2 /= n as f64;
    let var = m2 - m1 * m1;
    let want_mean = marginal.mean();
    let want_var = marginal.variance();
    // standard errors: mean se = sd/sqrt(n), var se ~ sqrt((mu4 - var^2)/n)
    let sd = want_var.sqrt();
    let se_mean = sd / (n as f64).sqrt();
    // crude fourth-moment bound for the bimodal marginal
    let mu4 = 3.0 * want_var * want_var + 6.0 * want_var * want_mean * want_mean + 20.0;
    let se_var = ((mu4 - want_var * want_var).abs() / n as f64).sqrt();
    assert!((m1 - want_mean).abs() < 3.0 * se_mean, "mean {m1} vs {want_mean}");
    assert!((var - want_var).abs() < 3.0 * se_var, "var {var} vs {want_var}");
    // the closed-form component layout is the expected one
    let ab: f64 = (-1.0f64).exp();
    assert!((marginal.components()[1].mean - 2.0 * ab.sqrt()).abs() < 1e-14);
    assert!(
        (marginal.components()[1].variance - (0.25 * ab + 1.0 - ab)).abs() < 1e-14
    );
}

#[test]
fn smooth_tilt_positive_mass_matches_importance_sampling() {
    // 10^7 self-normalized importance samples from q0 with weights e^{r/tau}
    let g = GmmSpec::symmetric_bimodal(2.0, 0.5);
    let reward = RewardSpec::smooth(20.0, 1.0).unwrap();
    let target = TiltedTarget::new(g.clone(), reward).unwrap();
    let quadrature = target.positive_mass().unwrap();
    let n = 10_000_000;
    let mut rng = RngStream::new(17, &[purpose::TEST, 41]);
    let (mut wsum, mut wpos) = (0.0, 0.0);
    for _ in 0..n {
        let x = g.sample(&mut rng);
        let w = reward.tilt(x);
        wsum += w;
        if x > 0.0 {
            wpos += w;
        }
    }
    let mc = wpos / wsum;
    assert!(
        (mc - quadrature).abs() < 1e-3,
        "importance-sampling {mc} vs quadrature {quadrature}"
    );
    // both temperatures of the open question: hard vs smooth targets sit on
    // top of each other for these parameters
    let hard = TiltedTarget::new(g, RewardSpec::hard(1.0).unwrap())
        .unwrap()
        .positive_mass()
        .unwrap();
    assert!((quadrature - hard).abs() < 1e-4, "smooth {quadrature} vs hard {hard}");
}

#[test]
fn drs_decomposition_holds_at_random_points() {
    // finite difference of log q_t* minus the marginal score equals the
    // reward correction, for both reward kinds
    let g = GmmSpec::symmetric_bimodal(2.0, 0.5);
    let s = VpSchedule::toy_default();
    let h = 3e-5;
    for reward in [RewardSpec::hard(1.0).unwrap(), RewardSpec::smooth(20.0, 1.0).unwrap()] {
        let target = TiltedTarget::new(g.clone(), reward).unwrap();
        let mut rng = RngStream::new(23, &[purpose::TEST, 42]);
        for trial in 0..30 {
            let t = rng.uniform_in(0.01, 0.25);
            let x_t = rng.uniform_in(-3.0, 3.0);
            let fd = (target.log_marginal(&s, t, x_t + h).unwrap()
                - target.log_marginal(&s, t, x_t - h).unwrap())
                / (2.0 * h);
            let ref_score = vp_marginal(&g, &s, t).unwrap().score(x_t);
            let drs = target.drs(&s, t, x_t).unwrap();
            assert!(
                (fd - ref_score - drs).abs() < 1e-6,
                "{reward:?} trial {trial}: t={t} x_t={x_t} err={}",
                (fd - ref_score - drs).abs()
            );
        }
    }
}

#[test]
fn drs_envelope_decays_toward_the_horizon() {
    // reward information washes out as noise accumulates: the max of |drs|
    // over an x grid decays along t and ends near zero relative to its start
    let g = GmmSpec::symmetric_bimodal(2.0, 0.5);
    let s = VpSchedule::toy_default();
    let target = TiltedTarget::new(g, RewardSpec::hard(1.0).unwrap()).unwrap();
    let envelope = |t: f64| -> f64 {
        let mut m = 0.0f64;
        for i in 0..61 {
            let x = -3.0 + 0.1 * i as f64;
            m = m.max(target.drs(&s, t, x).unwrap().abs());
        }
        m
    };
    let ts: Vec<f64> = (1..=10).map(|i| 0.025 * i as f64).collect();
    let envs: Vec<f64> = ts.iter().map(|&t| envelope(t)).collect();
    for w in envs.windows(2) {
        assert!(w[1] < w[0] * 1.02, "envelope not decaying: {envs:?}");
    }
    assert!(envs[9] < 0.25 * envs[0], "horizon envelope too large: {envs:?}");
}

#[test]
fn euler_integration_of_velocity_reproduces_the_mixture() {
    use didr_core::diffusion::{euler_flow_chain_values, AnalyticVelocityField};
    use ndarray::Array2;
    let g = GmmSpec::symmetric_bimodal(2.0, 0.5);
    let vel = AnalyticVelocityField { gmm: &g };
    let n = 100_000;
    let steps = 128;
    let t_entry_val = 1.0 - 1e-9;
    let mut rng = RngStream::new(5, &[purpose::TEST, 43]);
    let x1 = Array2::from_shape_fn((n, 1), |_| rng.normal());
    let t_entry = Array2::from_elem((n, 1), t_entry_val);
    let mut times = Array2::zeros((n, steps));
    for row in 0..n {
        for j in 0..steps {
            times[[row, j]] =
                t_entry_val * (steps - j) as f64 / (steps + 1) as f64;
        }
    }
    let x0 = euler_flow_chain_values(&vel, &x1, &t_entry, &times).unwrap();
    let samples: Vec<f64> = x0.column(0).to_vec();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let direct: Vec<f64> = {
        let mut r2 = RngStream::new(6, &[purpose::TEST, 44]);
        g.sample_many(&mut r2, n)
    };
    let dmean = direct.iter().sum::<f64>() / n as f64;
    let dvar = direct.iter().map(|x| (x - dmean) * (x - dmean)).sum::<f64>() / n as f64;
    println!("euler endpoint mean {mean} var {var}; direct mean {dmean} var {dvar}");
    // two-sample comparison: approximate standard errors plus an O(1/S)
    // discretization allowance
    let se_mean = (2.0 * g.variance() / n as f64).sqrt();
    let allowance = 8.0 / steps as f64;
    assert!((mean - dmean).abs() < 3.0 * se_mean + allowance, "mean {mean} vs {dmean}");
    assert!((var - dvar).abs() < 0.02 * dvar + allowance, "var {var} vs {dvar}");
    // positive/negative split stays symmetric
    let pos = samples.iter().filter(|&&x| x > 0.0).count() as f64 / n as f64;
    assert!((pos - 0.5).abs() < 0.01, "split {pos}");
}

#[test]
fn velocity_flow_map_is_exact_for_single_gaussians() {
    // closed-form flow: the standardized deviation is invariant, so
    // x_e = mu_e + (x_s - mu_s) rho_e / rho_s
    let g = GmmSpec::single(0.7, 1.44);
    let (m0, v0) = (0.7, 1.44);
    let rho = |t: f64| ((1.0 - t) * (1.0 - t) * v0 + t * t).sqrt();
    let mu = |t: f64| (1.0 - t) * m0;
    let (t_s, x_s) = (0.95, 1.3);
    // integrate the ODE dx/dt = v(x, t) with a fine RK4 as the oracle
    let mut x = x_s;
    let mut t = t_s;
    let steps = 20_000;
    let dt = -t_s / steps as f64;
    for _ in 0..steps - 1 {
        let f = |tt: f64, xx: f64| analytic_velocity(&g, tt, xx).unwrap();
        let k1 = f(t, x);
        let k2 = f(t + 0.5 * dt, x + 0.5 * dt * k1);
        let k3 = f(t + 0.5 * dt, x + 0.5 * dt * k2);
        let k4 = f(t + dt, x + dt * k3);
        x += dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += dt;
    }
    // compare at the stopping time (one step above 0, where v is defined)
    let closed = mu(t) + (x_s - mu(t_s)) * rho(t) / rho(t_s);
    assert!((x - closed).abs() < 1e-6, "ode {x} vs closed {closed} at t={t}");
}

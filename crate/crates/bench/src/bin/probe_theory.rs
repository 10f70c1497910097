use didr_core::adam::{AdamConfig, AdamState};
use didr_core::diffusion::{ddim_chain, GmmScoreField, MlpScore, ScoreField};
use didr_core::net::{Head, MlpNet};
use didr_core::pipeline::*;
use didr_core::rng::{purpose, RngStream};
use ndarray::Array2;
use std::time::Instant;

fn score_mse(net: &MlpNet, cfg: &PipelineConfig) -> f64 {
    let gmm = cfg.gmm();
    let schedule = cfg.schedule();
    let trained = MlpScore { net, schedule };
    let exact = GmmScoreField { gmm: &gmm, schedule };
    let n = 40_000;
    let mut rng = RngStream::new(99, &[purpose::TEST, 80]);
    let mut x_t = Array2::zeros((n, 1));
    let mut t = Array2::zeros((n, 1));
    for row in 0..n {
        let x0 = gmm.sample(&mut rng);
        let ti = rng.uniform_in(cfg.t_floor, cfg.t_max);
        let eps = rng.normal();
        let ab = schedule.alpha_bar(ti);
        x_t[[row, 0]] = ab.sqrt() * x0 + (1.0 - ab).sqrt() * eps;
        t[[row, 0]] = ti;
    }
    let got = trained.eval(&x_t, &t);
    let want = exact.eval(&x_t, &t);
    got.iter().zip(want.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n as f64
}

fn main() {
    let cfg = PipelineConfig { seed: 7, ..PipelineConfig::default() };
    let t0 = Instant::now();
    let stage = train_reference(&cfg).unwrap();
    let mse = score_mse(&stage.net, &cfg);
    println!("paper-scale ref (10k, b2048, w128): mse {mse:.4} in {:.0}s", t0.elapsed().as_secs_f64());
    stage.net.save(std::path::Path::new("/tmp/ref_paper.mlp")).unwrap();

    // ddim 30 vs 1000 on this reference
    let schedule = cfg.schedule();
    let score = MlpScore { net: &stage.net, schedule };
    let n = 8_000;
    let mut rng = RngStream::new(101, &[purpose::TEST, 82]);
    let z = Array2::from_shape_fn((n, 1), |_| rng.normal());
    for steps in [30usize, 1000] {
        let out = ddim_chain(&score, &z, cfg.t_max, steps, &schedule).unwrap();
        let mean = out.sum() / n as f64;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        println!("paper ddim {steps}: mean {mean:.4} var {var:.4}");
    }

    // TA tracking at paper scale
    let c0 = 1.3;
    let mut constant_gen = MlpNet::zeros(1, 4, 1, Head::DirectOutput);
    constant_gen.biases[1][[0, 0]] = c0;
    let mut ta = stage.net.clone();
    let mut adam = AdamState::new(AdamConfig::with_lr(1e-3), &ta.params());
    let t1 = Instant::now();
    for outer in 0..3000 {
        ta_update(&mut ta, &mut adam, &constant_gen, &cfg, outer, 0).unwrap();
        if outer % 500 == 499 {
            let n2 = 8_000;
            let mut r2 = RngStream::new(102, &[purpose::TEST, 83]);
            let mut mse = 0.0;
            for _ in 0..n2 {
                let ti = r2.uniform_in(cfg.t_floor, cfg.t_max);
                let ab = schedule.alpha_bar(ti);
                let xt = ab.sqrt() * c0 + (1.0 - ab).sqrt() * r2.normal();
                let got = MlpScore { net: &ta, schedule }.eval(&Array2::from_elem((1,1), xt), &Array2::from_elem((1,1), ti))[[0,0]];
                let want = -(xt - ab.sqrt() * c0) / (1.0 - ab);
                mse += (got - want) * (got - want);
            }
            println!("paper ta after {} steps: mse {:.4} ({:.0}s)", outer + 1, mse / n2 as f64, t1.elapsed().as_secs_f64());
        }
    }
}

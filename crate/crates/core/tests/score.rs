use stic_core::data::{gen_gaussians_2d, synthetic::gaussian_centroids};
use stic_core::rng::stream;
use stic_core::score::{jacobian_trace, train_score_stic, ScoreHook, TraceEstimator};
use stic_core::trainer::{TrainConfig, Trainer};
use stic_core::{Architecture, Graph, Result, Tensor, Var};

fn small_config() -> TrainConfig {
    TrainConfig {
        passes: 2,
        iterations_per_pass: 60,
        batch_real: 16,
        batch_mixup: 16,
        batch_fake: 16,
        batch_fake_mixup: 16,
        buffer_size: Some(24),
        ..TrainConfig::desk()
    }
}

#[test]
fn stochastic_trace_within_five_percent_on_linear_fields() {
    let mut r = stream(11, "fields");
    for trial in 0..5 {
        // Diagonal shifted away from zero so the relative error is meaningful.
        let mut a = Tensor::randn(&[8, 8], 1.0, &mut r);
        for i in 0..8 {
            a.data_mut()[i * 8 + i] += 3.0;
        }
        let exact: f64 = (0..8).map(|i| a.data()[i * 8 + i]).sum();
        let field = |g: &mut Graph, x: Var| -> Result<Var> {
            let xr = g.reshape(x, &[1, 8])?;
            let at = g.constant(a.clone());
            let at = g.transpose(at)?;
            Ok(g.matmul(xr, at)?)
        };
        let x = Tensor::randn(&[8], 1.0, &mut r);
        let got = jacobian_trace(field, &x, &TraceEstimator::Exact, &mut r).unwrap();
        assert!((got - exact).abs() < 1e-10);
        let est = jacobian_trace(
            field,
            &x,
            &TraceEstimator::Stochastic { probes: 1000 },
            &mut stream(trial, "probes"),
        )
        .unwrap();
        assert!(
            ((est - exact) / exact).abs() < 0.05,
            "trial {trial}: {est} vs {exact}"
        );
    }
}

#[test]
fn zero_weight_reproduces_plain_trajectory() {
    let data = gen_gaussians_2d(3, 30, 0.4, 2).unwrap();
    let arch = Architecture::mlp(2, &[16, 16], 3).with_score_head();
    let config = small_config();

    let plain = Trainer::new(config.clone(), &data, 5).unwrap();
    let (plain_state, plain_log) = plain
        .train_with(arch.clone(), &mut stic_core::trainer::NoHook, |_, _| Ok(()))
        .unwrap();

    let scored = Trainer::new(config, &data, 5).unwrap();
    let mut hook = ScoreHook::new(0.0, 5).unwrap();
    let (scored_state, scored_log) = scored.train_with(arch, &mut hook, |_, _| Ok(())).unwrap();

    assert_eq!(plain_log.loss_history.len(), scored_log.loss_history.len());
    for (a, b) in plain_log.loss_history.iter().zip(&scored_log.loss_history) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    for (a, b) in plain_state
        .model
        .params()
        .iter()
        .zip(scored_state.model.params())
    {
        assert_eq!(a, b);
    }
}

#[test]
fn regularized_run_stays_finite() {
    let data = gen_gaussians_2d(3, 30, 0.4, 3).unwrap();
    let arch = Architecture::mlp(2, &[16, 16], 3).with_score_head();
    let (_, log) = train_score_stic(&small_config(), &data, arch, 0.1, 3, |_, _| Ok(())).unwrap();
    assert!(log.loss_history.iter().all(|v| v.is_finite()));
}

#[test]
fn learned_score_aligns_with_analytic_mixture_score() {
    let spread = 0.5;
    let data = gen_gaussians_2d(2, 100, spread, 21).unwrap();
    let held_out = gen_gaussians_2d(2, 50, spread, 22).unwrap();
    let arch = Architecture::mlp(2, &[64, 64], 2).with_score_head();
    let (model, _) =
        train_score_stic(&TrainConfig::desk(), &data, arch, 0.1, 21, |_, _| Ok(())).unwrap();

    let mu = gaussian_centroids(2);
    let true_score = |x: &[f64]| -> [f64; 2] {
        let logw: Vec<f64> = mu
            .iter()
            .map(|m| -((x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2)) / (2.0 * spread * spread))
            .collect();
        let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logw.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum();
        let mut s = [0.0; 2];
        for (wk, m) in w.iter().zip(&mu) {
            s[0] += wk / z * (m[0] - x[0]) / (spread * spread);
            s[1] += wk / z * (m[1] - x[1]) / (spread * spread);
        }
        s
    };
    let mut cos_sum = 0.0;
    for i in 0..held_out.len() {
        let x = held_out.raw(i);
        let s = model.score(&Tensor::vector(x.to_vec())).unwrap();
        let t = true_score(x);
        let dot = s.data()[0] * t[0] + s.data()[1] * t[1];
        let ns = (s.data()[0].powi(2) + s.data()[1].powi(2)).sqrt();
        let nt = (t[0] * t[0] + t[1] * t[1]).sqrt();
        cos_sum += dot / (ns * nt).max(1e-12);
    }
    let cos = cos_sum / held_out.len() as f64;
    println!("mean cosine to analytic score: {cos:.3}");
    assert!(cos > 0.5, "mean cosine {cos}");
}

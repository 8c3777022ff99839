use depthlab::harness::{
    one_step_update_stats, run_training, sphere_inputs, streaming_forward, synth_dataset, Teacher,
    TrainOptions,
};
use depthlab::numerics::{Activation, RngStream};
use depthlab::optim::OptimizerSpec;
use depthlab::param::{ParamConfig, Scheme};
use depthlab::resnet::WeightSource;
use depthlab::Error;

fn relu_cfg(n: usize, l: usize, scheme: Scheme) -> ParamConfig {
    let mut c = ParamConfig::new(n, l, 16, scheme);
    c.activation = Activation::Relu;
    c
}

fn ratio(a: f64, b: f64) -> f64 {
    a.max(b) / a.min(b)
}

#[test]
fn linear_stream_grows_by_one_plus_inverse_depth() {
    let (n, l, seeds) = (4096, 8, 3);
    let mut cfg = ParamConfig::new(n, l, 8, Scheme::MuPSqrtL);
    cfg.activation = Activation::Linear;
    let x = sphere_inputs(1, 8, &mut RngStream::new(0, 0));
    let mut mean = vec![0.0; l + 1];
    for s in 0..seeds {
        let src = WeightSource::new(&cfg, &RngStream::new(1, s), l).unwrap();
        let t = streaming_forward(&cfg, &src, &x).unwrap();
        let h1 = t.h[0].sum_squares();
        for (m, h) in mean.iter_mut().zip(&t.h) {
            *m += h.sum_squares() / h1 / seeds as f64;
        }
    }
    for (i, m) in mean.iter().enumerate() {
        let want = (1.0 + 1.0 / l as f64).powi(i as i32);
        assert!((m / want - 1.0).abs() < 0.1, "layer {i}: {m} vs {want}");
    }
}

#[test]
fn feature_and_output_updates_are_size_free() {
    let x = sphere_inputs(4, 16, &mut RngStream::new(2, 0));
    let y = [1.0, -0.5, 0.25, -1.0];
    let stats = |n, l| {
        one_step_update_stats(&relu_cfg(n, l, Scheme::MuPSqrtL), &x, &y, 1.0, 10, 3, 1).unwrap()
    };
    let widths: Vec<_> = [128, 256, 512, 1024].iter().map(|&n| stats(n, 8)).collect();
    let depths: Vec<_> = [8, 16, 32, 64].iter().map(|&l| stats(128, l)).collect();
    for series in [&widths, &depths] {
        for w in series.windows(2) {
            assert!(ratio(w[0].feature_change, w[1].feature_change) < 2.0);
            assert!(ratio(w[0].output_change, w[1].output_change) < 2.0);
        }
    }
}

#[test]
fn logit_change_is_width_free() {
    let x = sphere_inputs(4, 16, &mut RngStream::new(5, 0));
    let y = [1.0, -0.5, 0.25, -1.0];
    let out: Vec<f64> = [128, 512, 2048]
        .iter()
        .map(|&n| {
            one_step_update_stats(&relu_cfg(n, 4, Scheme::MuPSqrtL), &x, &y, 0.5, 6, 6, 1)
                .unwrap()
                .output_change
        })
        .collect();
    let (lo, hi) = (
        out.iter().cloned().fold(f64::MAX, f64::min),
        out.iter().cloned().fold(0.0, f64::max),
    );
    assert!(hi / lo < 2.0, "{out:?}");
}

#[test]
fn standard_parameterization_is_a_negative_control() {
    let x = sphere_inputs(4, 16, &mut RngStream::new(7, 0));
    let y = [1.0, -0.5, 0.25, -1.0];
    let change =
        |l| match one_step_update_stats(&relu_cfg(128, l, Scheme::Sp), &x, &y, 0.05, 6, 8, 1) {
            Ok(s) if s.feature_change.is_finite() => Some(s.feature_change),
            Ok(_) | Err(Error::Diverged(_)) => None,
            Err(e) => panic!("{e}"),
        };
    match (change(8), change(64)) {
        (Some(a), Some(b)) => assert!(b >= 2.0 * a, "L=8 {a}, L=64 {b}"),
        (Some(_), None) => {}
        (None, _) => panic!("shallow control diverged"),
    }
}

/// Ensemble-mean loss curves at depths `l` and `2l` agree through the first
/// quarter of training under a shared `gamma0` and momentum.
fn curves_agree(gamma0: f64, momentum: f64, eta0: f64) {
    let data = synth_dataset(16, 512, Teacher::ShallowRelu, 0.0, &RngStream::new(9, 0)).unwrap();
    let steps = 120;
    let curve = |l: usize| {
        let mut cfg = relu_cfg(128, l, Scheme::MuPSqrtL);
        cfg.gamma0 = gamma0;
        let mut opt = OptimizerSpec::sgd(eta0);
        opt.momentum = momentum;
        let mut o = TrainOptions::new(opt, steps, 32);
        o.record_every = 10;
        let seeds = 4;
        let mut mean = vec![0.0; (steps / 10 + 1) as usize];
        for s in 0..seeds {
            let r = run_training(&cfg, &data, &o, &RngStream::new(10, s)).unwrap();
            assert!(!r.diverged);
            for (m, rec) in mean.iter_mut().zip(&r.records) {
                *m += rec.train_loss / seeds as f64;
            }
        }
        mean
    };
    let (a, b) = (curve(8), curve(16));
    for i in 0..=(steps / 40) as usize {
        let rel = (a[i] - b[i]).abs() / a[i];
        assert!(
            rel < 0.2,
            "gamma0 {gamma0} momentum {momentum} record {i}: {} vs {}",
            a[i],
            b[i]
        );
    }
}

#[test]
fn gamma0_transfers_across_depth() {
    curves_agree(0.5, 0.0, 0.5);
    curves_agree(2.0, 0.0, 0.5);
}

#[test]
fn momentum_transfers_across_depth() {
    curves_agree(1.0, 0.9, 0.05);
}

mod common;

use afgm_core::afgssm::{
    adapt_frequency, omega_base, scan_channel, scan_step, AdapterParams, AfgssmParams, FreqSource, ScanParams,
    Spectral, TimeFreqState,
};
use afgm_core::model::{Model, ModelConfig};
use afgm_core::numerics::Tensor;
use afgm_core::oracles::{complex_scan, model_forward, RawParams};
use common::{randomize, rng, rows, uniform};

fn fixed_block(scan: ScanParams, delta: Tensor) -> AfgssmParams {
    AfgssmParams {
        freq: FreqSource::Fixed { delta_omega: delta },
        scan,
    }
}

#[test]
fn adapter_matches_loop() {
    let mut r = rng(13);
    let (m, v, vh) = (3, 4, 2);
    let adapter = AdapterParams {
        w1: uniform(&[v, vh], 1.0, &mut r),
        b1: uniform(&[vh], 1.0, &mut r),
        w2: uniform(&[vh, v], 1.0, &mut r),
        b2: uniform(&[v], 1.0, &mut r),
    };
    let u = uniform(&[m, v], 2.0, &mut r);
    let basis = adapt_frequency(&u, &adapter).unwrap();

    let (w1, b1, w2, b2) = (adapter.w1.data(), adapter.b1.data(), adapter.w2.data(), adapter.b2.data());
    let ud = u.data();
    let pooled: Vec<f64> = (0..v).map(|k| (0..m).map(|i| ud[i * v + k]).sum::<f64>() / m as f64).collect();
    let hidden: Vec<f64> = (0..vh)
        .map(|j| (b1[j] + (0..v).map(|k| pooled[k] * w1[k * vh + j]).sum::<f64>()).max(0.0))
        .collect();
    for k in 0..v {
        let delta = b2[k] + (0..vh).map(|j| hidden[j] * w2[j * v + k]).sum::<f64>();
        let want = 2.0 * std::f64::consts::PI * k as f64 / v as f64 + delta;
        assert!((basis.omega.data()[k] - want).abs() < 1e-12);
        assert!((basis.delta_omega.data()[k] - delta).abs() < 1e-12);
    }
}

#[test]
fn step_states_match_complex_recurrence() {
    let mut r = rng(21);
    let (m, s, v) = (4, 3, 3);
    let p = ScanParams::random(s, v, Spectral::AmpOnly, 0.5, &mut r);
    let u = uniform(&[m, v], 1.0, &mut r);
    let omega = uniform(&[v], 3.0, &mut r);
    let oracle = complex_scan(&rows(&u), &p, omega.data());

    let mut state = TimeFreqState::zeros(s, v);
    for step in 0..m {
        let ui = Tensor::vector(u.data()[step * v..(step + 1) * v].to_vec());
        let out = scan_step(&ui, step + 1, &omega, &state, &p).unwrap();
        for i in 0..s {
            for k in 0..v {
                let want = oracle.states[step][i][k];
                assert!((out.next.f_re.at2(i, k) - want.re).abs() < 1e-12);
                assert!((out.next.f_im.at2(i, k) - want.im).abs() < 1e-12);
            }
        }
        for k in 0..v {
            assert!((out.z.data()[k] - oracle.z[step][k]).abs() < 1e-12);
        }
        state = out.next;
    }
}

#[test]
fn channel_scan_matches_complex_recurrence() {
    let mut r = rng(5);
    let (m, s, v) = (17, 5, 6);
    let p = ScanParams::random(s, v, Spectral::AmpOnly, 0.4, &mut r);
    let u = uniform(&[m, v], 1.0, &mut r);
    let delta = uniform(&[v], 0.5, &mut r);
    let omega: Vec<f64> = omega_base(v).data().iter().zip(delta.data()).map(|(a, b)| a + b).collect();
    let oracle = complex_scan(&rows(&u), &p, &omega);
    let z = scan_channel(&u, &fixed_block(p, delta)).unwrap();
    let want = Tensor::from_rows(&oracle.z).unwrap();
    assert!(z.max_abs_diff(&want) < 1e-10);
}

#[test]
fn full_forward_matches_straight_line_model() {
    let cfg = ModelConfig::toy();
    let model = Model::new(cfg.clone()).unwrap();
    let mut r = rng(1);
    let mean = uniform(&[cfg.n_vars], 2.0, &mut r);
    let std = Tensor::from_fn(&[cfg.n_vars], |_| 0.5 + rand::Rng::random::<f64>(&mut r));
    let mut set = model.init_params(1, Some((mean, std)));
    randomize(&mut set, 0.3, 1);
    let x = uniform(&[cfg.input_len, cfg.n_vars], 3.0, &mut r);
    let got = model.forward(&set, &x).unwrap();
    let want = Tensor::from_rows(&model_forward(&RawParams::from_set(&set), &cfg, &rows(&x))).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-9, "{}", got.max_abs_diff(&want));
}

#[test]
fn two_block_forward_matches_straight_line_model() {
    let cfg = ModelConfig {
        blocks: 2,
        patch_lengths: vec![12, 8],
        ..ModelConfig::toy()
    };
    let model = Model::new(cfg.clone()).unwrap();
    let mut set = model.init_params(4, None);
    randomize(&mut set, 0.3, 4);
    let x = uniform(&[cfg.input_len, cfg.n_vars], 1.0, &mut rng(40));
    let got = model.forward(&set, &x).unwrap();
    let want = Tensor::from_rows(&model_forward(&RawParams::from_set(&set), &cfg, &rows(&x))).unwrap();
    assert!(got.max_abs_diff(&want) < 1e-9);
}

#[test]
fn loss_matches_loop() {
    let cfg = ModelConfig::toy();
    let model = Model::new(cfg.clone()).unwrap();
    let mut set = model.init_params(2, None);
    randomize(&mut set, 0.3, 2);
    let mut r = rng(2);
    let x = uniform(&[cfg.input_len, cfg.n_vars], 1.0, &mut r);
    let y = uniform(&[cfg.horizon, cfg.n_vars], 1.0, &mut r);
    let pred = model_forward(&RawParams::from_set(&set), &cfg, &rows(&x));
    let n = (cfg.horizon * cfg.n_vars) as f64;
    let want: f64 = pred
        .iter()
        .flatten()
        .zip(y.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n;
    let got = model.loss(&set.params, &x, &y).unwrap();
    assert!((got - want).abs() < 1e-10);
    let (graph_loss, _) = model.loss_and_grad(&set.params, &x, &y).unwrap();
    assert!((graph_loss - want).abs() < 1e-10);
}

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dacen::baselines::*;
use dacen::chansim::*;
use dacen::ctensor::ComplexTensor3;
use dacen::domainxform::{freq_to_time, nmse_db};

fn sample(cfg: &SystemConfig, h_f: &ComplexTensor3, pattern: &PilotPattern) -> PilotSample {
    let h = ChannelRealization { h_f: h_f.clone() };
    transmit_pilots(&h, cfg, pattern, f64::INFINITY, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
}

#[test]
fn flat_channel_is_exact_at_any_density() {
    let cfg = SystemConfig::desk();
    let c = Complex64::new(0.3, -1.1);
    let h_f = ComplexTensor3::from_fn([cfg.n_r, cfg.n_t, cfg.n_c], |r, t, _| c * (1.0 + r as f64 + 0.1 * t as f64));
    let label = freq_to_time(&h_f, &cfg.transform()).unwrap();
    for pattern in [PilotPattern::all(8), PilotPattern::comb(8, 1, 4, 2).unwrap(), PilotPattern::new(vec![5], 8).unwrap()] {
        let est = ls_estimate(&sample(&cfg, &h_f, &pattern), &cfg, &cfg.transform()).unwrap();
        let e = nmse_db(&[label.clone()], &[est]).unwrap();
        assert!(e <= -100.0, "{} pilots: {e} dB", pattern.len());
    }
}

#[test]
fn linear_frequency_response_is_recovered_in_the_interior() {
    let cfg = SystemConfig::paper();
    let pattern = PilotPattern::comb(52, 0, 2, 26).unwrap();
    let h_f = ComplexTensor3::from_fn([2, 2, cfg.n_c], |r, t, k| Complex64::new(0.5 + 0.01 * k as f64, r as f64 - 0.002 * (k * (t + 1)) as f64));
    let est = ls_interpolate(&sample(&cfg, &h_f, &pattern), &cfg).unwrap();
    let (lo, hi) = (cfg.rb_center(pattern.rbs()[0]), cfg.rb_center(*pattern.rbs().last().unwrap()));
    for r in 0..2 {
        for t in 0..2 {
            for k in lo..=hi {
                let (a, b) = (est.get(r, t, k), h_f.get(r, t, k));
                assert!((a - b).norm() <= 1e-6 * b.norm(), "({r},{t},{k}) {a} vs {b}");
            }
        }
    }
}

#[test]
fn second_moments_of_white_labels_are_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let draw = |rng: &mut ChaCha8Rng, n: usize| {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        ComplexTensor3::from_fn([1, 1, n], |_, _, _| {
            let (a, b): (f64, f64) = (rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal));
            Complex64::new(a * s, b * s)
        })
    };
    let rb: Vec<_> = (0..10_000).map(|_| draw(&mut rng, 6)).collect();
    let labels: Vec<_> = (0..10_000).map(|_| draw(&mut rng, 4)).collect();
    let stats = fit_stats(&rb, &labels, 10.0, 2.0).unwrap();
    for i in 0..6 {
        for j in 0..6 {
            let want = if i == j { 1.0 } else { 0.0 };
            assert!((stats.r_pp[(i, j)] - want).norm() < 0.05, "R_pp[{i},{j}] = {}", stats.r_pp[(i, j)]);
        }
    }

    let same: Vec<_> = (0..40).map(|_| rb[0].clone()).collect();
    let s = fit_stats(&same, &labels[..40], 10.0, 2.0).unwrap();
    let sv = s.r_pp.clone().singular_values();
    assert!(sv.iter().skip(1).all(|&v| v < 1e-9 * sv[0]), "{sv}");
}

fn desk(seed: u64, n_ue: usize) -> DatasetBundle {
    let req = DatasetRequest { n_ue, snapshots_per_ue: 10, val_ue: 2, test_ue: 2, snr_db: 10.0, seed };
    make_dataset(&SystemConfig::desk(), &req, &PilotPattern::all(8)).unwrap()
}

#[test]
fn lmmse_is_linear_in_the_observation() {
    let ds = desk(2, 8);
    let stats = fit_stats(&ds.rb_channels, &ds.labels, 10.0, 2.0).unwrap();
    let pattern = PilotPattern::comb(8, 1, 2, 4).unwrap();
    let f = LmmseFilter::new(&stats, &pattern).unwrap();
    let y = ds.reobserve(&[0], &pattern, 10.0, 3).unwrap().remove(0);
    let c = Complex64::new(-1.7, 0.4);
    let scaled = PilotSample { y: y.y.scaled(c), ..y.clone() };
    let (a, b) = (f.apply(&y).unwrap().scaled(c), f.apply(&scaled).unwrap());
    let err = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    assert!(err < 1e-12 * a.norm_sqr().sqrt(), "{err}");
}

#[test]
fn lmmse_is_no_worse_than_ls_on_its_own_statistics() {
    let ds = desk(4, 60);
    let cfg = &ds.cfg;
    let idx: Vec<usize> = (0..ds.len()).collect();
    assert!(idx.len() >= 500);
    let stats = fit_stats(&ds.rb_channels, &ds.labels, 10.0, 2.0).unwrap();
    for pattern in [PilotPattern::comb(8, 1, 2, 4).unwrap(), PilotPattern::comb(8, 1, 4, 2).unwrap()] {
        let ys = ds.reobserve(&idx, &pattern, 10.0, 5).unwrap();
        let f = LmmseFilter::new(&stats, &pattern).unwrap();
        let lm: Vec<_> = ys.iter().map(|y| f.apply(y).unwrap()).collect();
        let ls: Vec<_> = ys.iter().map(|y| ls_estimate(y, cfg, &cfg.transform()).unwrap()).collect();
        let (lm, ls) = (nmse_db(&ds.labels, &lm).unwrap(), nmse_db(&ds.labels, &ls).unwrap());
        assert!(lm <= ls + 0.1, "{} pilots: lmmse {lm} ls {ls}", pattern.len());
    }
}

#[test]
fn noise_variance_convention() {
    assert!((noise_variance(10.0, 2.0) - 0.05).abs() < 1e-15);
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dacen::chansim::*;
use dacen::domainxform::tap_energy_fraction;
use dacen::harness::save_dataset;

#[test]
fn mean_element_energy_is_unit() {
    let cfg = SystemConfig::desk();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 1000;
    let mut total = 0.0;
    for _ in 0..n {
        let h = gen_channel(&cfg, &mut rng).unwrap();
        total += h.h_f.norm_sqr() / h.h_f.data().len() as f64;
    }
    let mean = total / n as f64;
    assert!((mean - 1.0).abs() < 0.1, "mean element energy {mean}");
}

#[test]
fn noise_variance_matches_request() {
    let cfg = SystemConfig::desk();
    let pattern = PilotPattern::all(cfg.n_rb);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut noise, mut count) = (0.0, 0usize);
    while count < 10_000 {
        let h = gen_channel(&cfg, &mut rng).unwrap();
        let clean = transmit_pilots(&h, &cfg, &pattern, f64::INFINITY, &mut rng).unwrap();
        let noisy = transmit_pilots(&h, &cfg, &pattern, 0.0, &mut rng).unwrap();
        assert_eq!(clean.y, h.rb_centers(&cfg).unwrap());
        noise += noisy.y.data().iter().zip(clean.y.data()).map(|(a, b)| (a - b).norm_sqr()).sum::<f64>();
        count += clean.y.data().len();
    }
    let var = noise / count as f64;
    assert!((var - 0.5).abs() < 0.025, "noise variance {var}");
    // per-element SNR against unit channel energy, before despreading
    let snr = -10.0 * (var * pattern.despread_gain).log10();
    assert!(snr.abs() < 0.2, "empirical SNR {snr} dB");
}

#[test]
fn paper_channels_fit_in_retained_taps() {
    let cfg = SystemConfig::paper();
    let tc = cfg.transform();
    assert_eq!((tc.n_ifft, tc.n_p), (1024, 64));
    let mut worst = 1.0f64;
    let mut mean = 0.0;
    for seed in 0..100 {
        let h = gen_channel(&cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let f = tap_energy_fraction(&h.h_f, &tc).unwrap();
        worst = worst.min(f);
        mean += f / 100.0;
    }
    assert!(mean >= 0.9, "mean fraction {mean}, worst {worst}");
}

#[test]
fn single_zero_delay_path_is_flat_and_rank_one() {
    let cfg = SystemConfig { n_cl: 1, k_factor_db: 300.0, delay_spread_s: 0.0, timing_offset_taps: 0.0, ..SystemConfig::desk() };
    let h = gen_channel(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap().h_f;
    for f in h.fibers() {
        assert!(f.iter().all(|v| (v - f[0]).norm() < 1e-9));
    }
    // rank one: every 2x2 minor across antennas vanishes
    let [nr, nt, _] = h.dims();
    for r in 1..nr {
        for t in 1..nt {
            let m = h.get(0, 0, 0) * h.get(r, t, 0) - h.get(0, t, 0) * h.get(r, 0, 0);
            assert!(m.norm() < 1e-9);
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let cfg = SystemConfig::desk();
    let a = gen_channel(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let b = gen_channel(&cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert_eq!(a, b);

    let req = DatasetRequest { n_ue: 10, snapshots_per_ue: 3, val_ue: 2, test_ue: 2, snr_db: 10.0, seed: 5 };
    let dir = tempfile::tempdir().unwrap();
    let mut files = Vec::new();
    for name in ["a", "b"] {
        let ds = make_dataset(&cfg, &req, &PilotPattern::comb(8, 0, 2, 4).unwrap()).unwrap();
        save_dataset(dir.path().join(name), &ds).unwrap();
        files.push(std::fs::read(dir.path().join(name).join("pilots.dtns")).unwrap());
    }
    assert_eq!(files[0], files[1]);
}

#[test]
fn dataset_counts_shapes_and_splits() {
    let cfg = SystemConfig::paper();
    let pattern = PilotPattern::comb(52, 0, 2, 26).unwrap();
    assert_eq!(pilot_density(&pattern, &cfg), 0.5);
    assert!((pilot_density(&PilotPattern::new(vec![18, 34], 52).unwrap(), &cfg) - 1.0 / 26.0).abs() < 1e-15);
    let req = DatasetRequest { n_ue: 10, snapshots_per_ue: 10, val_ue: 2, test_ue: 2, snr_db: 10.0, seed: 6 };
    let ds = make_dataset(&cfg, &req, &pattern).unwrap();
    assert_eq!(ds.len(), 100);
    assert_eq!(ds.labels[0].dims(), [4, 32, 64]);
    assert_eq!(ds.pilots[0].dims(), [4, 32, 26]);
    for split in [Split::Train, Split::Val, Split::Test] {
        for i in ds.indices(split) {
            assert_eq!(ds.split_of_ue(ds.ue[i]), split);
        }
    }
    let n_test = ds.indices(Split::Test).len();
    assert_eq!(n_test, 20);
}

#[test]
fn out_of_range_pattern_is_rejected() {
    let cfg = SystemConfig::desk();
    let h = gen_channel(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let wide = PilotPattern::all(9);
    assert!(matches!(transmit_pilots(&h, &cfg, &wide, 10.0, &mut ChaCha8Rng::seed_from_u64(8)), Err(dacen::Error::Index { .. })));
}

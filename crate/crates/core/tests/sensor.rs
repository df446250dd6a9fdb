use ppgen::domain::PulseTensor;
use ppgen::error::PpgError;
use ppgen::sensor::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn pulse(r: usize, c: usize, t: usize, values: Vec<f64>) -> PulseTensor {
    PulseTensor::new(r, c, t, values, (0..c).map(|i| format!("c{i}")).collect()).unwrap()
}

fn constant(r: usize, c: usize, t: usize, v: f64) -> PulseTensor {
    pulse(r, c, t, vec![v; r * c * t])
}

fn random_pulse(rng: &mut impl Rng, r: usize, c: usize, t: usize) -> PulseTensor {
    pulse(r, c, t, (0..r * c * t).map(|_| rng.random_range(0.001..0.1)).collect())
}

#[test]
fn noise_table() {
    let expect = [(0.0, 0.0), (1e-6, 1e-7), (1e-5, 1e-6), (1e-4, 1e-5), (1e-3, 1e-4), (1e-2, 1e-3)];
    for (n, (s, k)) in NoiseName::ALL.iter().zip(expect) {
        assert_eq!(n.level(), NoiseLevel { sigma_w: s, k_shot: k });
        assert_eq!(n.as_str().parse::<NoiseName>().unwrap(), *n);
    }
    assert!("loud".parse::<NoiseName>().is_err());
}

#[test]
fn noise_moments_match_the_model() {
    let x_hat = 0.01;
    let x = constant(1, 1, 1_000_000, x_hat);
    for (i, name) in NoiseName::ALL.into_iter().enumerate() {
        let l = name.level();
        let y = add_noise(&x, l, &mut ChaCha8Rng::seed_from_u64(i as u64)).unwrap();
        if name == NoiseName::None {
            assert_eq!(y, x);
            continue;
        }
        let n = y.values.len() as f64;
        let mean = y.values.iter().sum::<f64>() / n;
        let var = y.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let expect = l.k_shot * x_hat + l.sigma_w * l.sigma_w;
        assert!((var / expect - 1.0).abs() < 0.05, "{name}: {var:e} vs {expect:e}");
        assert!((mean - x_hat).abs() < 3.0 * (expect / n).sqrt(), "{name}: mean {mean}");
    }
    let medium = NoiseName::Medium.level();
    assert_eq!(medium.k_shot * x_hat + medium.sigma_w.powi(2), 1.0e-8 + 1.0e-10);
}

#[test]
fn negative_signal_is_rejected() {
    let x = pulse(1, 1, 2, vec![0.1, -1e-9]);
    let err = add_noise(&x, NoiseName::Low.level(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
    assert!(matches!(err, PpgError::Invalid(_)));
}

#[test]
fn dc_variance_shrinks_with_pulse_length() {
    let (t, x_hat, draws) = (64, 0.01, 20_000);
    let l = NoiseName::High.level();
    let x = constant(1, 1, t, x_hat);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dcs: Vec<f64> =
        (0..draws).map(|_| extract_features(&add_noise(&x, l, &mut rng).unwrap()).unwrap().dc[0]).collect();
    let m = dcs.iter().sum::<f64>() / draws as f64;
    let var = dcs.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws - 1) as f64;
    let expect = (l.k_shot * x_hat + l.sigma_w * l.sigma_w) / t as f64;
    assert!((var / expect - 1.0).abs() < 0.1, "{var:e} vs {expect:e}");
}

fn single_channel(mode: SensorMode, grid: Vec<f64>, profile: Vec<f64>) -> SensorConfig {
    SensorConfig { mode, grid, profiles: vec![profile], labels: vec!["x".into()] }
}

#[test]
fn delta_and_uniform_profiles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (l, t) = (7, 16);
    let spectral = random_pulse(&mut rng, 2, l, t);
    let grid: Vec<f64> = (0..l).map(|i| 500.0 + 10.0 * i as f64).collect();

    let delta =
        single_channel(SensorMode::FourWavelength, grid.clone(), (0..l).map(|i| (i == 3) as u8 as f64).collect());
    let out = mix_leds(&spectral, &delta).unwrap();
    for r in 0..2 {
        assert_eq!(out.series(r, 0), spectral.series(r, 3));
    }

    let uniform = single_channel(SensorMode::FourWavelength, grid, vec![1.0 / l as f64; l]);
    let out = mix_leds(&spectral, &uniform).unwrap();
    for r in 0..2 {
        for k in 0..t {
            let mean = (0..l).map(|i| spectral.get(r, i, k)).sum::<f64>() / l as f64;
            assert!((out.get(r, 0, k) - mean).abs() <= 1e-15 * mean);
        }
    }
}

#[test]
fn led_mixing_matches_a_plain_weighted_sum() {
    let config = SensorConfig::four_wavelength(1.0).unwrap();
    let l = config.grid.len();
    let spectral = random_pulse(&mut ChaCha8Rng::seed_from_u64(2), 4, l, 8);
    let out = mix_leds(&spectral, &config).unwrap();
    assert_eq!((out.receivers, out.channels, out.timesteps), (4, 4, 8));
    for r in 0..4 {
        for (c, p) in config.profiles.iter().enumerate() {
            for k in 0..8 {
                let mut s = 0.0;
                for i in 0..l {
                    if p[i] != 0.0 {
                        s += p[i] * spectral.get(r, i, k);
                    }
                }
                assert_eq!(out.get(r, c, k).to_bits(), s.to_bits());
            }
        }
    }
}

#[test]
fn sensor_configurations() {
    let wide = SensorConfig::wide_spectrum(1.0).unwrap();
    assert_eq!(wide.grid.len(), 531);
    assert_eq!((wide.grid[0], wide.grid[530]), (470.0, 1000.0));
    let x = random_pulse(&mut ChaCha8Rng::seed_from_u64(4), 1, 531, 3);
    assert_eq!(mix_leds(&x, &wide).unwrap().values, x.values);

    let four = SensorConfig::four_wavelength(1.0).unwrap();
    assert_eq!(four.n_channels(), 4);
    for (p, c) in four.profiles.iter().zip(LED_CENTERS) {
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let peak = p.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(four.grid[peak], c);
    }
    assert!(mix_leds(&random_pulse(&mut ChaCha8Rng::seed_from_u64(0), 1, 3, 2), &four).is_err());
    assert!(SensorConfig::four_wavelength(0.0).is_err());
}

#[test]
fn led_profiles_from_files() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("green.csv");
    std::fs::write(&p, "lambda,weight\n515,0\n525,1\n535,0\n").unwrap();
    let c = SensorConfig::from_led_files(&[p.as_path()], 1.0).unwrap();
    assert_eq!(c.labels, vec!["green"]);
    assert_eq!(c.grid.len(), 19);
    let s: f64 = c.profiles[0].iter().sum();
    assert!((s - 1.0).abs() < 1e-12);
    assert!((c.profiles[0][9] - 0.1).abs() < 1e-12);

    std::fs::write(&p, "515,0\n525,x\n").unwrap();
    let err = SensorConfig::from_led_files(&[p.as_path()], 1.0).unwrap_err();
    assert!(matches!(err, PpgError::Row { row: 2, .. }), "{err}");
}

#[test]
fn feature_identities() {
    let c = constant(2, 3, 10, 0.4);
    let f = extract_features(&c).unwrap();
    assert!(f.dc.iter().all(|d| (d - 0.4).abs() < 1e-15));
    assert!(f.ac.iter().chain(&f.nac).all(|v| v.abs() < 1e-15));

    let x = random_pulse(&mut ChaCha8Rng::seed_from_u64(5), 2, 3, 10);
    let f = extract_features(&x).unwrap();
    for s in f.ac.chunks(10) {
        assert!(s.iter().sum::<f64>().abs() < 1e-15);
    }
    let doubled = pulse(2, 3, 10, x.values.iter().map(|v| 2.0 * v).collect());
    let g = extract_features(&doubled).unwrap();
    for (a, b) in f.dc.iter().zip(&g.dc).chain(f.ac.iter().zip(&g.ac)) {
        assert!((2.0 * a - b).abs() <= 1e-15);
    }
    for (a, b) in f.nac.iter().zip(&g.nac) {
        assert!((a - b).abs() <= 1e-14);
    }

    assert!(extract_features(&constant(1, 1, 1, 1.0)).is_err());
    assert!(extract_features(&pulse(1, 1, 2, vec![1.0, -1.0])).is_err());
}

#[test]
fn misspecification_plans() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let clean = random_pulse(&mut rng, 4, 4, 64);

    let none = MisspecPlan::new(MisspecKind::None, NoiseName::None);
    assert_eq!(none.observe(&clean, &mut rng).unwrap(), clean);

    let sensor = MisspecPlan::new(MisspecKind::Sensor, NoiseName::None);
    let out = sensor.observe(&clean, &mut rng).unwrap();
    assert!(out.values.iter().zip(&clean.values).all(|(o, c)| (o - c - 0.1).abs() < 1e-15));
    assert!(!sensor.obs_skin);

    let noise = MisspecPlan::new(MisspecKind::Noise, NoiseName::High);
    assert_eq!((noise.sim_noise, noise.obs_noise, noise.offset), (NoiseName::None, NoiseName::Medium, 0.0));

    let skin = MisspecPlan::new(MisspecKind::Skin, NoiseName::Low);
    assert!(skin.obs_skin && skin.offset == 0.0 && skin.sim_noise == NoiseName::Low);

    // combined is the offset applied after the high-noise draw on the perturbed-skin pulse
    let combined = MisspecPlan::new(MisspecKind::Combined, NoiseName::None);
    assert!(combined.obs_skin);
    assert_eq!((combined.sim_noise, combined.obs_noise), (NoiseName::Medium, NoiseName::High));
    let got = combined.observe(&clean, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let noisy = add_noise(&clean, NoiseName::High.level(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(got, add_offset(&noisy, SENSOR_OFFSET));

    for k in MisspecKind::ALL {
        assert_eq!(k.as_str().parse::<MisspecKind>().unwrap(), k);
    }
}

proptest! {
    #[test]
    fn mixing_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let config = SensorConfig::four_wavelength(5.0).unwrap();
        let l = config.grid.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_pulse(&mut rng, 2, l, 4);
        let y = random_pulse(&mut rng, 2, l, 4);
        let combo = pulse(2, l, 4, x.values.iter().zip(&y.values).map(|(u, v)| a * u + b * v).collect());
        let (mx, my, mc) = (mix_leds(&x, &config).unwrap(), mix_leds(&y, &config).unwrap(), mix_leds(&combo, &config).unwrap());
        for ((u, v), w) in mx.values.iter().zip(&my.values).zip(&mc.values) {
            prop_assert!((a * u + b * v - w).abs() <= 1e-14);
        }
    }
}

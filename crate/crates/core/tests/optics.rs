use ppgen::domain::{ParamSpace, N_PARAMS};
use ppgen::error::PpgError;
use ppgen::optics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Piecewise-linear lookup written independently of `Curve::at`.
fn interp(c: &Curve, l: f64) -> f64 {
    for k in 0..c.lambda.len() - 1 {
        let (a, b) = (c.lambda[k], c.lambda[k + 1]);
        if l >= a && l <= b {
            return c.eps[k] + (c.eps[k + 1] - c.eps[k]) * (l - a) / (b - a);
        }
    }
    panic!("{l} outside grid")
}

/// Straight transcription of the tissue model: returns (mu_a per layer, mu_s).
fn brute_force(th: &[f64; N_PARAMS], l: f64, s: &Spectra) -> ([f64; 3], f64) {
    let e = |k: Chromophore| interp(s.curve(k), l);
    let (a, sp, mel, bv2, bv3, vd2, vd3, sa, dsv, dbv2, dbv3) =
        (th[0], th[1], th[2], th[3], th[4], th[5], th[6], th[7], th[8], th[9], th[10]);
    let fixed = |w: f64, li: f64, co: f64| {
        w * e(Chromophore::Water) + li * e(Chromophore::Lipid) + co * e(Chromophore::Collagen)
    };
    let blood = |bv_pct: f64, dbv: f64, vd: f64| {
        let bv = bv_pct / 100.0;
        let sv = sa - dsv;
        let c_oxy = 0.25 * (sa / 100.0) * bv * dbv + 0.75 * (sv / 100.0) * bv;
        let c_deoxy = 0.25 * (1.0 - sa / 100.0) * bv * dbv + 0.75 * (1.0 - sv / 100.0) * bv;
        let mu = c_oxy * e(Chromophore::HbO2) + c_deoxy * e(Chromophore::Hb);
        let v = bv * dbv;
        v * (1.0 - (-(mu / v) * vd).exp()) / vd
    };
    let mu_a = [
        fixed(0.60, 0.35, 0.0) + mel / 100.0 * e(Chromophore::Melanin),
        fixed(0.70, 0.05, 0.25) + blood(bv2, dbv2, vd2),
        fixed(0.10, 0.90, 0.0) + blood(bv3, dbv3, vd3),
    ];
    let mu_s = a * (l / 1000.0).powf(-sp) / (1.0 - 0.9);
    (mu_a, mu_s)
}

fn draw(rng: &mut impl Rng, space: &ParamSpace) -> [f64; N_PARAMS] {
    let mut th = [0.0; N_PARAMS];
    th[..9].copy_from_slice(space.sample_static_prior(rng).as_slice());
    th[9] = rng.random_range(1.0..=1.02);
    th[10] = rng.random_range(1.0..=1.02);
    th
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs()
}

#[test]
fn matches_brute_force_on_random_draws() {
    let space = ParamSpace::default();
    let spectra = Spectra::synthetic();
    let model = SkinModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for i in 0..1000 {
        let th = draw(&mut rng, &space);
        // one draw pinned at 525 nm, the rest spread over the window
        let l = if i == 0 { 525.0 } else { rng.random_range(470.0..=1000.0) };
        let got = f_b(&th, l, &spectra, &model).unwrap();
        let (mu_a, mu_s) = brute_force(&th, l, &spectra);
        for k in 0..3 {
            worst = worst.max(rel(got.mu_a[k], mu_a[k]));
        }
        worst = worst.max(rel(got.mu_s, mu_s));
        assert_eq!((got.g, got.n), (0.9, 1.4));
    }
    assert!(worst < 1e-12, "worst relative error {worst:e}");
}

#[test]
fn vanishing_vessel_diameter_recovers_uncorrected_blood() {
    let spectra = Spectra::synthetic();
    let model = SkinModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let space = ParamSpace::default();
    for _ in 0..100 {
        let mut th = draw(&mut rng, &space);
        th[5] = 1e-9;
        th[6] = 1e-9;
        let l = rng.random_range(470.0..=1000.0);
        let got = f_b(&th, l, &spectra, &model).unwrap();
        let eps = spectra.at(l).unwrap();
        for (layer, (bv, dbv)) in [(1, (th[3], th[9])), (2, (th[4], th[10]))] {
            let (o, d) = blood_concentrations(th[7], th[8], bv / 100.0, dbv).unwrap();
            let lay = &model.layers[layer];
            let fixed = lay.water * eps[Chromophore::Water as usize]
                + lay.lipid * eps[Chromophore::Lipid as usize]
                + lay.collagen * eps[Chromophore::Collagen as usize];
            let expect = fixed + o * eps[Chromophore::HbO2 as usize] + d * eps[Chromophore::Hb as usize];
            assert!(rel(got.mu_a[layer], expect) < 1e-6);
        }
    }
}

#[test]
fn worked_examples() {
    let (o, _) = blood_concentrations(80.0, 20.0, 0.02, 1.01).unwrap();
    assert!(rel(o, 0.25 * 0.8 * 0.0202 + 0.75 * 0.6 * 0.02) < 1e-14);

    let v = vessel_correction(1.0, 0.02, 0.03).unwrap();
    assert!(rel(v, 0.02 * (1.0 - (-(1.0f64 / 0.02) * 0.03).exp()) / 0.03) < 1e-14);

    assert!(rel(scattering(1.0, 1.3, 525.0, 0.9), 0.525f64.powf(-1.3) / 0.1) < 1e-14);
}

#[test]
fn zero_concentrations_give_zero_absorption() {
    let mut model = SkinModel::default();
    for l in &mut model.layers {
        l.water = 0.0;
        l.lipid = 0.0;
        l.collagen = 0.0;
        l.blood = false;
    }
    let mut th = [1.0; N_PARAMS];
    th[2] = 0.0;
    let mu = absorption(&th, &Spectra::synthetic().at(600.0).unwrap(), &model).unwrap();
    assert_eq!(mu, [0.0; 3]);
}

#[test]
fn wavelength_outside_spectra_is_rejected() {
    let th = draw(&mut ChaCha8Rng::seed_from_u64(0), &ParamSpace::default());
    let err = f_b(&th, 1200.0, &Spectra::synthetic(), &SkinModel::default()).unwrap_err();
    assert!(matches!(err, PpgError::WavelengthOutOfRange(..)));
}

#[test]
fn evaluation_is_bit_deterministic() {
    let th = draw(&mut ChaCha8Rng::seed_from_u64(8), &ParamSpace::default());
    let s = Spectra::synthetic();
    let m = SkinModel::default();
    let a = f_b(&th, 660.0, &s, &m).unwrap();
    let b = f_b(&th, 660.0, &s, &m).unwrap();
    for k in 0..3 {
        assert_eq!(a.mu_a[k].to_bits(), b.mu_a[k].to_bits());
    }
    assert_eq!(a.mu_s.to_bits(), b.mu_s.to_bits());
}

#[test]
fn jacobian_matches_central_differences() {
    let space = ParamSpace::default();
    let s = Spectra::synthetic();
    let m = SkinModel::default();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..20 {
        let th = draw(&mut rng, &space);
        let l = rng.random_range(470.0..=1000.0);
        let (p, jac) = f_b_jacobian(&th, l, &s, &m).unwrap();
        let plain = f_b(&th, l, &s, &m).unwrap();
        for k in 0..3 {
            assert!(rel(p.mu_a[k], plain.mu_a[k]) < 1e-13);
        }
        let rows = |o: &OpticalProps| [o.mu_a[0], o.mu_a[1], o.mu_a[2], o.mu_s];
        for j in 0..N_PARAMS {
            let h = 1e-6 * th[j].abs().max(1e-3);
            let (mut up, mut dn) = (th, th);
            up[j] += h;
            dn[j] -= h;
            let (fu, fd) = (rows(&f_b(&up, l, &s, &m).unwrap()), rows(&f_b(&dn, l, &s, &m).unwrap()));
            for r in 0..4 {
                let fd_grad = (fu[r] - fd[r]) / (2.0 * h);
                let scale = jac[r][j].abs().max(1e-8 * rows(&plain)[r].abs() / th[j].abs().max(1e-3));
                assert!(
                    (jac[r][j] - fd_grad).abs() <= 1e-5 * scale.max(1e-12),
                    "row {r} param {j}: {} vs {fd_grad}",
                    jac[r][j]
                );
            }
        }
    }
}

#[test]
fn spectra_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let s = Spectra::synthetic();
    s.write_csv_dir(dir.path()).unwrap();
    assert_eq!(Spectra::from_csv_dir(dir.path()).unwrap(), s);

    std::fs::write(dir.path().join("lipid.csv"), "lambda_nm,epsilon\n470,0.1\n480,oops\n").unwrap();
    let err = Spectra::from_csv_dir(dir.path()).unwrap_err();
    assert!(matches!(err, PpgError::Row { row: 3, .. }), "{err}");
}

proptest! {
    #[test]
    fn melanin_raises_epidermal_absorption(seed in 0u64..10_000, dm in 0.01f64..5.0, l in 470.0f64..1000.0) {
        let mut th = draw(&mut ChaCha8Rng::seed_from_u64(seed), &ParamSpace::default());
        let s = Spectra::synthetic();
        let m = SkinModel::default();
        let a = f_b(&th, l, &s, &m).unwrap();
        th[2] += dm;
        let b = f_b(&th, l, &s, &m).unwrap();
        prop_assert!(b.mu_a[0] > a.mu_a[0]);
    }

    #[test]
    fn blood_pulsation_never_lowers_absorption(seed in 0u64..10_000, d in 0.0f64..0.02, l in 470.0f64..1000.0) {
        let mut th = draw(&mut ChaCha8Rng::seed_from_u64(seed), &ParamSpace::default());
        th[9] = 1.0;
        th[10] = 1.0;
        let s = Spectra::synthetic();
        let m = SkinModel::default();
        let a = f_b(&th, l, &s, &m).unwrap();
        th[9] += d;
        th[10] += d;
        let b = f_b(&th, l, &s, &m).unwrap();
        prop_assert!(b.mu_a[1] >= a.mu_a[1] && b.mu_a[2] >= a.mu_a[2]);
        prop_assert_eq!(b.mu_a[0], a.mu_a[0]);
    }

    #[test]
    fn vessel_correction_is_bounded_and_decreasing(mu in 1e-3f64..50.0, v in 1e-4f64..0.1, d in 1e-3f64..0.1) {
        let a = vessel_correction(mu, v, d).unwrap();
        let b = vessel_correction(mu, v, d * 1.5).unwrap();
        prop_assert!(a > 0.0 && a < mu);
        prop_assert!(b < a);
    }
}

use ppgen::domain::*;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn table_names_and_ranges() {
    let s = ParamSpace::default();
    let names: Vec<&str> = s.statics.iter().chain(&s.dynamics).map(|r| r.name.as_str()).collect();
    assert_eq!(names, ["A", "SP", "Mel", "BV2", "BV3", "VD2", "VD3", "SA", "dSV", "dBV2", "dBV3"]);
    for (i, r) in s.statics.iter().chain(&s.dynamics).enumerate() {
        assert!(r.lo < r.hi);
        assert_eq!(s.by_index(i), r);
    }
    assert_eq!((s.range("dBV2").unwrap().lo, s.range("dBV2").unwrap().hi), (1.0, 1.02));
    assert_eq!(StaticParam::from_name("dSV").unwrap(), StaticParam::Dsv);
}

#[test]
fn prior_draws_stay_inside_their_ranges() {
    let s = ParamSpace::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10_000 {
        let d = s.sample_static_prior(&mut rng);
        for (v, r) in d.0.iter().zip(&s.statics) {
            assert!(*v >= r.lo && *v < r.hi, "{} = {v}", r.name);
        }
    }
    let a = s.sample_static_prior(&mut ChaCha8Rng::seed_from_u64(42));
    assert_eq!(a, s.sample_static_prior(&mut ChaCha8Rng::seed_from_u64(42)));
}

#[test]
fn validation_of_bio_params() {
    let s = ParamSpace::default();
    let statics = s.sample_static_prior(&mut ChaCha8Rng::seed_from_u64(1));
    assert!(BioParams::constant(statics, 64, 1.01).validate(&s).is_ok());
    assert!(BioParams::constant(statics, 64, 1.03).validate(&s).is_err());
    let mut hot = statics;
    hot.set(StaticParam::Sa, 101.0);
    assert!(BioParams::constant(hot, 64, 1.0).validate(&s).is_err());
    assert!(BioParams::new(statics, vec![1.0; 3], vec![1.0; 4]).is_err());
    assert!(BioParams::new(statics, vec![], vec![]).is_err());
}

#[test]
fn pulse_layout() {
    let p =
        PulseTensor::new(2, 3, 4, (0..24).map(f64::from).collect(), vec!["a".into(), "b".into(), "c".into()]).unwrap();
    assert_eq!(p.get(1, 2, 3), 23.0);
    assert_eq!(p.series(1, 0), &[12.0, 13.0, 14.0, 15.0]);
    assert!(PulseTensor::new(2, 3, 4, vec![0.0; 23], vec!["a".into(); 3]).is_err());
    assert!(PulseTensor::new(1, 2, 1, vec![0.0; 2], vec!["a".into()]).is_err());
}

#[test]
fn table_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("params.toml");
    std::fs::write(&p, DEFAULT_PARAMS_TOML.replace("timesteps = 64", "timesteps = 32")).unwrap();
    let s = ParamSpace::load(&p).unwrap();
    assert_eq!(s.timesteps, 32);
    assert_eq!(s.statics, ParamSpace::default().statics);
    assert!(ParamSpace::from_toml_str(&DEFAULT_PARAMS_TOML.replace("timesteps = 64", "timesteps = 1")).is_err());
}

proptest! {
    #[test]
    fn bio_params_survive_serialization(seed in 0u64..10_000, t in 1usize..80) {
        let s = ParamSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let statics = s.sample_static_prior(&mut rng);
        let w: Vec<f64> = (0..t).map(|k| 1.0 + 0.02 * ((k as f64 * 0.37 + seed as f64).sin().abs())).collect();
        let b = BioParams::new(statics, w.clone(), w.iter().rev().copied().collect()).unwrap();
        let text = serde_json::to_string(&b).unwrap();
        prop_assert_eq!(serde_json::from_str::<BioParams>(&text).unwrap(), b);
    }
}

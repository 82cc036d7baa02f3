use gd4::bench::{parse_plotdata, plotdata_csv, run_benchmark, BenchConfig, Method};
use gd4::inference::{CalibrationTable, Denoiser, SampleMode, StepSchedule};
use gd4::instance::{regularize, sample_instance, Constellation, ProblemInstance};
use gd4::lattice::{babai_detect, brute_force_ils};
use gd4::rng::stream;
use gd4::train::{train, TrainConfig, TrainState};
use proptest::prelude::*;

fn tiny_config() -> TrainConfig {
    TrainConfig {
        iterations: 6,
        batch_size: 4,
        hidden: 8,
        layers: 2,
        checkpoint_interval: 3,
        ..TrainConfig::desk()
    }
}

#[test]
fn train_checkpoint_calibrate_bench() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("net.ckpt");
    let log = dir.path().join("loss.csv");
    let mut state = TrainState::new(tiny_config()).unwrap();
    let metrics = train(&mut state, Some(&log), Some(&ckpt), |_| {}).unwrap();
    assert_eq!(metrics.len(), 6);
    assert_eq!(std::fs::read_to_string(&log).unwrap().lines().count(), 7);

    let denoiser = Denoiser::from_checkpoint(&ckpt).unwrap();
    assert_eq!(denoiser.params(), &state.params);

    let table = CalibrationTable::calibrate(denoiser.transitions(), 4, 4, &[15.0, 25.0], 1000, 1).unwrap();
    let cal = dir.path().join("cal.csv");
    table.save(&cal).unwrap();
    assert_eq!(CalibrationTable::load(&cal).unwrap(), table);

    let cfg = BenchConfig {
        snr_list_db: vec![15.0, 25.0],
        n_instances: 20,
        methods: vec![Method::Babai, Method::Cold(2), Method::Warm],
        checkpoint: Some(ckpt),
        calibration: Some(cal),
        output: dir.path().join("out.csv"),
        ..BenchConfig::default()
    };
    let records = run_benchmark(&cfg).unwrap();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| (0.0..=1.0).contains(&r.ser)));
    let wide = parse_plotdata(&plotdata_csv(&records).unwrap()).unwrap();
    assert_eq!(wide.len(), 6);
}

#[test]
fn cold_start_counts_evaluations() {
    let state = TrainState::new(tiny_config()).unwrap();
    let ts = state.config.transitions().unwrap();
    let denoiser = Denoiser::new(state.params, ts).unwrap();
    let mut rng = stream(2, &[]);
    let inst = sample_instance(&mut rng, 4, 4, Constellation::new(2).unwrap(), 20.0).unwrap();
    for m in [1, 3, 10, 100] {
        let schedule = StepSchedule::linear(m, 100).unwrap();
        for mode in [SampleMode::Sample, SampleMode::Argmax] {
            let det = denoiser.cold_start(&inst, &schedule, mode, &mut rng).unwrap();
            assert_eq!(det.evaluations, m);
            assert!(det.x_hat.check_alphabet(Constellation::new(2).unwrap()).is_ok());
        }
    }
}

#[test]
fn instance_json_round_trip() {
    let inst = sample_instance(&mut stream(3, &[]), 3, 2, Constellation::new(3).unwrap(), 12.5).unwrap();
    let back: ProblemInstance = serde_json::from_str(&serde_json::to_string(&inst).unwrap()).unwrap();
    assert_eq!(back, inst);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn babai_never_beats_brute_force(seed in any::<u64>(), snr in 0.0f64..35.0, k in 1u32..=2) {
        let inst = sample_instance(&mut stream(seed, &[]), 3, 3, Constellation::new(k).unwrap(), snr).unwrap();
        let b = babai_detect(&inst).unwrap();
        let f = brute_force_ils(&inst).unwrap();
        prop_assert!(inst.residual(&b.x_hat.0) >= inst.residual(&f.x_hat.0) - 1e-9);
    }

    #[test]
    fn regularized_system_is_square_or_tall(seed in any::<u64>(), n_r in 1usize..4) {
        let inst = sample_instance(&mut stream(seed, &[]), 4, n_r, Constellation::new(2).unwrap(), 20.0).unwrap();
        let reg = regularize(&inst).unwrap();
        prop_assert!(reg.h.nrows() >= reg.h.ncols());
        prop_assert!(reg.regularized);
        prop_assert_eq!(reg.x_star, inst.x_star);
    }
}

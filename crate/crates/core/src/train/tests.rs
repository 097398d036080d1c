use super::*;
use crate::cascade::SingleScaleConfig;
use crate::locnet::LocNetConfig;
use crate::phantom::{generate_sample, plan_dataset, PhantomSpec};

fn tiny() -> (CascadeConfig, PhantomSpec) {
    let net = LocNetConfig {
        depth: 1,
        base_channels: 2,
        kernel: 3,
        temperature: 1.0,
    };
    let cascade = CascadeConfig {
        scales: vec![4.0, 2.0, 1.0],
        patch_dims: [8; 3],
        noise_amplitude: 1.5,
        locnet: vec![net; 3],
        single_scale: SingleScaleConfig {
            spacing: 2.0,
            locnet: net,
            heatmap_sigma: 4.0,
        },
        ..CascadeConfig::default()
    };
    let spec = PhantomSpec {
        extent_mm: [32.0; 3],
        base_spacing: 1.0,
        jitter_mm: 2.0,
        junction_offset_mm: 4.0,
        ..PhantomSpec::default()
    };
    (cascade, spec)
}

fn samples(n: usize, seed: u64) -> Vec<LandmarkSample> {
    let (cascade, spec) = tiny();
    plan_dataset(n, [n, 0, 0], seed)
        .unwrap()
        .iter()
        .map(|p| generate_sample(&spec, &cascade.scales, p).unwrap())
        .collect()
}

fn trainer(mode: Mode, epochs: usize, lr: f64) -> Trainer {
    let (cascade, _) = tiny();
    let train = TrainConfig {
        epochs,
        lr,
        mode,
        seed: 5,
        ..TrainConfig::default()
    };
    let schedule = ScheduleConfig {
        total_epochs: epochs,
        ..ScheduleConfig::default()
    };
    Trainer::new(train, cascade, schedule).unwrap()
}

#[test]
fn mode_names_round_trip() {
    for m in Mode::ALL {
        assert_eq!(m.name().parse::<Mode>().unwrap(), m);
    }
    assert!("e2e".parse::<Mode>().is_err());
}

#[test]
fn counts_one_step_per_sample() {
    let data = samples(2, 1);
    let mut t = trainer(Mode::MultiscaleE2e, 3, 5e-4);
    let mut steps = 0;
    while !t.finished() {
        steps += t.run_epoch(&data).unwrap().steps;
    }
    assert_eq!(steps, 6);
    assert!(t.adam.iter().all(|a| a.t == 6));
}

#[test]
fn empty_split_is_an_error() {
    let mut t = trainer(Mode::SingleScaleCom, 3, 5e-4);
    assert_eq!(t.run_epoch(&[]).unwrap_err(), Error::EmptySplit("train"));
    assert!(mean_error(&t.model, &t.cascade, &[]).is_err());
}

#[test]
fn all_modes_are_deterministic() {
    let data = samples(2, 2);
    for mode in Mode::ALL {
        let run = || {
            let mut t = trainer(mode, 2, 1e-3);
            let logs: Vec<_> = (0..2).map(|_| t.run_epoch(&data).unwrap()).collect();
            (logs, t.model)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b, "{mode}");
        assert_eq!(ma, mb, "{mode}");
        assert!(a.iter().all(|l| l.train_loss.is_finite()));
    }
}

#[test]
fn multistep_trains_one_scale_per_stage() {
    let data = samples(1, 3);
    let mut t = trainer(Mode::MultiscaleMultistep, 6, 1e-3);
    assert_eq!((0..6).map(|e| t.stage(e)).collect::<Vec<_>>(), vec![0, 0, 1, 1, 2, 2]);
    assert_eq!(t.weights(3), vec![0.0, 1.0, 0.0]);
    let before = t.model.clone();
    t.run_epoch(&data).unwrap();
    assert_ne!(t.model.nets[0], before.nets[0]);
    assert_eq!(t.model.nets[1], before.nets[1]);
    assert_eq!(t.model.nets[2], before.nets[2]);
    assert_eq!(t.adam.iter().map(|a| a.t).collect::<Vec<_>>(), vec![1, 0, 0]);
}

#[test]
fn resuming_equals_uninterrupted() {
    let data = samples(2, 4);
    let mut full = trainer(Mode::MultiscaleE2eNoise, 4, 1e-3);
    for _ in 0..4 {
        full.run_epoch(&data).unwrap();
    }
    let mut part = trainer(Mode::MultiscaleE2eNoise, 4, 1e-3);
    part.run_epoch(&data).unwrap();
    part.run_epoch(&data).unwrap();
    let mut resumed = part.clone();
    for _ in 0..2 {
        resumed.run_epoch(&data).unwrap();
    }
    assert_eq!(resumed, full);
}

#[test]
fn single_scale_com_loss_is_monotone_until_sub_millimetre() {
    let data = samples(1, 6);
    let mut t = trainer(Mode::SingleScaleCom, 150, 5e-4);
    let losses: Vec<f64> = (0..150).map(|_| t.run_epoch(&data).unwrap().train_loss).collect();
    let settled = losses.iter().position(|&l| l < 1.0).expect("reaches 1 mm^2");
    assert!(settled > 10);
    let bumps = losses[10..=settled].windows(2).filter(|w| w[1] > w[0]).count();
    assert_eq!(bumps, 0, "{losses:?}");
    assert!(losses[149] < 0.05, "{losses:?}");
}

#[test]
fn cascade_overfits_one_phantom() {
    let data = samples(1, 7);
    let mut t = trainer(Mode::MultiscaleE2e, 200, 2e-3);
    let start = mean_error(&t.model, &t.cascade, &data).unwrap();
    while !t.finished() {
        t.run_epoch(&data).unwrap();
    }
    let end = mean_error(&t.model, &t.cascade, &data).unwrap();
    assert!(end < 4.0 && end < start, "{start} -> {end}");
}

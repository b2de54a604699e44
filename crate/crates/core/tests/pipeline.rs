// SPDX-License-Identifier: Apache-2.0

//! Trainer -> bundle -> programmed arrays -> evaluation, on the synthetic
//! task (and on MNIST when the files are present).

use ctmsim::data::{load_bundle, save_bundle, Dataset};
use ctmsim::device::{DeviceParams, NoiseKind, NoiseSpec};
use ctmsim::harness::{
    self, AdcSweep, Context, DriftSweep, ExperimentConfig, NamedModel, NoiseSweep, Task,
};
use ctmsim::net::{
    calibrate_ranges, ActivationBound, DigitalNetwork, NetworkSpec, ProgrammedNetwork, ReadConfig,
    Topology,
};
use ctmsim::par::Execution;
use ctmsim::train::{evaluate, train, Model, TrainConfig};
use ctmsim::xbar::{clip_range, ClipSpec};
use ctmsim::RngStream;

fn toy() -> (Dataset, Dataset) {
    let s = Task::Toy.load(std::path::Path::new("")).unwrap();
    (s.train, s.test)
}

fn trained(sigma_neu: f64, seed: u64) -> NetworkSpec {
    let (tr, te) = toy();
    let topology = Topology::reference(tr.shape, tr.classes, ActivationBound::Bounded);
    let cfg = TrainConfig {
        sigma_neu,
        batch_size: 32,
        seed,
        ..TrainConfig::new(2, ActivationBound::Bounded)
    };
    train::<f32>(&topology, &cfg, &tr, Some(&te), |_| {})
        .unwrap()
        .0
}

fn toy_context(extra: &str) -> Context {
    let cfg = ExperimentConfig::parse(
        &format!("task = \"toy\"\nseeds = [0, 1, 2, 3, 4]\n{extra}"),
        "",
    )
    .unwrap();
    Context::from_config(&cfg, Execution::Parallel).unwrap()
}

#[test]
fn trained_bundle_programs_without_conversion() {
    let net = trained(0.0, 1);
    let dir = tempfile::tempdir().unwrap();
    save_bundle(dir.path(), &net).unwrap();
    let loaded = load_bundle(dir.path()).unwrap();
    assert_eq!(loaded, net);
    let programmed =
        ProgrammedNetwork::build(&loaded, &DeviceParams::default(), &RngStream::new(0, 0)).unwrap();
    assert_eq!(programmed.arrays().len(), loaded.weighted_layers());
}

#[test]
fn ideal_hardware_reproduces_the_digital_pass() {
    let mut net = trained(0.0, 2);
    // The full band maps every weight without clipping.
    net.clip = ClipSpec::full();
    let (_, te) = toy();
    let root = RngStream::new(9, 0);
    let engine = ProgrammedNetwork::build(&net, &DeviceParams::default(), &root)
        .unwrap()
        .engine(&ctmsim::net::Converters::disabled(net.weighted_layers()))
        .unwrap();
    let analog = engine
        .logits(
            &te.images,
            &ReadConfig::noiseless(),
            &root,
            0,
            Execution::Parallel,
        )
        .unwrap();
    let digital = DigitalNetwork::new(&net)
        .unwrap()
        .logits(&te.images, te.len(), Execution::Sequential)
        .unwrap();
    let worst = analog
        .iter()
        .zip(&digital)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-10, "{worst}");
}

#[test]
fn training_is_bitwise_reproducible_and_evaluation_deterministic() {
    assert_eq!(trained(0.0, 5), trained(0.0, 5));
    assert_eq!(trained(0.3, 5), trained(0.3, 5));
    assert_ne!(trained(0.0, 5), trained(0.0, 6));
    let net = trained(0.3, 5);
    let (_, te) = toy();
    let m = Model::<f32>::from_spec(&net).unwrap();
    assert_eq!(evaluate(&m, &te).unwrap(), evaluate(&m, &te).unwrap());
}

#[test]
fn unperturbed_sweep_points_equal_the_clean_baseline() {
    let models = vec![NamedModel {
        name: "toy".into(),
        net: trained(0.0, 3),
    }];
    let ctx = toy_context("[device]\npreset = \"measured\"\n");
    let noise = harness::sweep_noise(
        &models,
        &ctx,
        &NoiseSweep {
            kind: NoiseKind::Additive,
            sigma: vec![0.0, 0.3],
        },
    )
    .unwrap();
    let drift = harness::sweep_drift(
        &models,
        &ctx,
        &DriftSweep {
            times: vec![10.0],
            grid: None,
            include_zero: true,
            noise_kind: NoiseKind::Additive,
            sigma_syn: 0.0,
        },
    )
    .unwrap();
    let adc = harness::sweep_adc(
        &models,
        &ctx,
        &AdcSweep {
            bits: vec![3],
            full_precision: true,
            noise_kind: NoiseKind::Additive,
            sigma_syn: 0.0,
        },
    )
    .unwrap();
    // Zero noise, t = 0 and no converters are all the same evaluation.
    let clean: Vec<f64> = noise
        .rows
        .iter()
        .filter(|r| r.sigma_syn_frac_of_range == 0.0)
        .map(|r| r.accuracy)
        .collect();
    let fresh: Vec<f64> = drift
        .rows
        .iter()
        .filter(|r| r.t_hours == 0.0)
        .map(|r| r.accuracy)
        .collect();
    let full: Vec<f64> = adc
        .rows
        .iter()
        .filter(|r| r.bits.is_none())
        .map(|r| r.accuracy)
        .collect();
    assert_eq!(clean.len(), 5);
    assert_eq!(clean, fresh);
    assert_eq!(clean, full);
    for s in [&noise.summary, &drift.summary, &adc.summary] {
        assert!(s.iter().all(|(_, st)| st.n == 5 && st.std.is_finite()));
    }
}

#[test]
fn noisy_predictions_are_reproducible_from_the_seed() {
    let models = vec![NamedModel {
        name: "toy".into(),
        net: trained(0.0, 4),
    }];
    let ctx = toy_context("");
    let section = ctmsim::harness::InferSection {
        time_hours: 0.0,
        noise_kind: NoiseKind::Proportional,
        sigma_syn: 0.4,
    };
    let a = harness::infer(&models, &ctx, &section).unwrap();
    let b = harness::infer(&models, &ctx, &section).unwrap();
    let labels = |t: &ctmsim::harness::Table<ctmsim::harness::PredictionRow>| {
        t.rows.iter().map(|r| r.predicted).collect::<Vec<_>>()
    };
    assert_eq!(labels(&a), labels(&b));
}

#[test]
fn accuracy_does_not_improve_with_read_noise() {
    let models = vec![NamedModel {
        name: "toy".into(),
        net: trained(0.0, 7),
    }];
    let ctx = toy_context("");
    for kind in [NoiseKind::Additive, NoiseKind::Proportional] {
        let sigma = vec![0.0, 0.5, 1.0, 2.0];
        let t = harness::sweep_noise(&models, &ctx, &NoiseSweep { kind, sigma }).unwrap();
        let means: Vec<f64> = t.summary.iter().map(|(_, s)| s.mean).collect();
        for w in means.windows(2) {
            assert!(w[1] <= w[0] + 0.01, "{kind}: {means:?}");
        }
        assert!(means[3] < means[0], "{kind}: {means:?}");
    }
}

#[test]
fn fine_converters_approach_full_precision() {
    let net = trained(0.0, 8);
    let (tr, te) = toy();
    let conv = calibrate_ranges(&net, &tr.images, tr.len()).unwrap();
    let root = RngStream::new(0, 0);
    let programmed = ProgrammedNetwork::build(&net, &DeviceParams::default(), &root).unwrap();
    let read = ReadConfig::noiseless();
    let acc = |bits| {
        let e = programmed.engine(&conv.with_bits(bits).unwrap()).unwrap();
        e.accuracy(&te.images, &te.labels, &read, &root, Execution::Parallel)
            .unwrap()
    };
    assert_eq!(acc(Some(16)), acc(None));
}

#[test]
fn mnist_eight_bit_converters_track_digital_accuracy() {
    let root = std::env::var_os(ctmsim::data::DATA_DIR_ENV)
        .map(std::path::PathBuf::from)
        .unwrap_or_else(|| std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    let Ok(splits) = Task::Mnist.load(&root) else {
        eprintln!("skipped: no MNIST files under {}", root.display());
        return;
    };
    let train_set = splits.train.take(Some(10_000));
    let test = splits.test.take(Some(2000));
    let cfg = TrainConfig {
        seed: 1,
        ..TrainConfig::new(1, ActivationBound::Bounded)
    };
    let topology = Topology::reference_mnist(ActivationBound::Bounded);
    let (net, _) = train::<f32>(&topology, &cfg, &train_set, None, |_| {}).unwrap();
    // The digital reference sees the same clipped weights as the arrays.
    let mut clipped = net.clone();
    for (k, p) in clipped.params.iter_mut().enumerate() {
        let (lo, hi) = clip_range(&net.weights_f64(k), &net.clip).unwrap();
        for w in p.weight.data_mut() {
            *w = (*w as f64).clamp(lo, hi) as f32;
        }
    }
    let digital = DigitalNetwork::new(&clipped)
        .unwrap()
        .logits(&test.images, test.len(), Execution::Parallel)
        .unwrap();
    let hits = digital
        .chunks_exact(10)
        .zip(&test.labels)
        .filter(|(s, &l)| ctmsim::net::argmax(s) == l)
        .count();
    let digital_acc = hits as f64 / test.len() as f64;
    let conv = calibrate_ranges(&net, &train_set.images[..1000 * 784], 1000)
        .unwrap()
        .with_bits(Some(8))
        .unwrap();
    let rng = RngStream::new(0, 0);
    let analog = ProgrammedNetwork::build(&net, &DeviceParams::default(), &rng)
        .unwrap()
        .engine(&conv)
        .unwrap()
        .accuracy(
            &test.images,
            &test.labels,
            &ReadConfig::new(NoiseSpec::none()),
            &rng,
            Execution::Parallel,
        )
        .unwrap();
    assert!(digital_acc > 0.8, "{digital_acc}");
    assert!(
        (analog - digital_acc).abs() <= 0.005,
        "8-bit {analog} vs digital {digital_acc}"
    );
}

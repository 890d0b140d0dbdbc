mod common;

use common::{grid41, known, known_grid, known_range, known_sample};
use nested_covar::linalg::Matrix;
use nested_covar::rng::RngSeed;
use nested_covar::smoothers::{
    evaluate, fit_candidate, fit_kernel_smoother, fit_krr, fit_linear, fit_mlp, load_model, save_model, sup_error,
    sup_error_on, tune, Bandwidth, BasisSpec, Candidate, Family, KernelSpec, MlpArch, ModelMeta, ModelParams,
    Standardization, SurfaceModel, TrainConfig, TrainingSet,
};
use proptest::prelude::*;
use rand::Rng;
use sha2::{Digest, Sha256};

fn line_sample(m: usize, f: impl Fn(f64) -> f64, seed: u64) -> TrainingSet {
    let mut rng = RngSeed(seed).stream(0, 0);
    let x: Vec<f64> = (0..m).map(|_| -2.0 + 4.0 * rng.random::<f64>()).collect();
    let y = x.iter().map(|&v| f(v)).collect();
    TrainingSet::new(Matrix::from_vec(m, 1, x).unwrap(), y).unwrap()
}

fn noisy_sin(m: usize, seed: u64) -> TrainingSet {
    let mut rng = RngSeed(seed).stream(1, 0);
    let x: Vec<f64> = (0..m).map(|_| -2.5 + 5.0 * rng.random::<f64>()).collect();
    let y = x
        .iter()
        .map(|&v| v.sin() + 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    TrainingSet::new(Matrix::from_vec(m, 1, x).unwrap(), y).unwrap()
}

fn line_grid() -> Matrix {
    Matrix::from_fn(401, 1, |i, _| -2.0 + 0.01 * i as f64)
}

#[test]
fn kernel_smoother_improves_with_sample_size() {
    let small = fit_kernel_smoother(&noisy_sin(1_000, 3), &Bandwidth::Auto).unwrap();
    let large = fit_kernel_smoother(&noisy_sin(10_000, 3), &Bandwidth::Auto).unwrap();
    let oracle = |z: &[f64]| z[0].sin();
    let e_small = sup_error_on(&small, oracle, &line_grid()).unwrap().sup;
    let e_large = sup_error_on(&large, oracle, &line_grid()).unwrap().sup;
    assert!(e_large < e_small, "{e_large} !< {e_small}");
}

#[test]
fn tuned_krr_recovers_known_function() {
    let data = known_sample(2_000, 2.0, 0.05, 21);
    let out = tune(&data, &known_grid(Family::Krr)).unwrap();
    let model = fit_candidate(&data, &out.best).unwrap();
    let err = sup_error_on(&model, known, &grid41()).unwrap();
    assert!(err.sup < 0.05 * known_range(), "sup error {} with {:?}", err.sup, out.best);
}

#[test]
fn mlp_recovers_known_function() {
    let data = known_sample(5_000, 2.0, 0.05, 22);
    let model = fit_mlp(&data, &MlpArch::default(), &TrainConfig::default()).unwrap();
    let err = sup_error_on(&model, known, &grid41()).unwrap();
    assert!(err.sup < 0.08 * known_range(), "sup error {}", err.sup);
}

#[test]
fn krr_sup_error_decreases_with_sample_size() {
    let kernel = KernelSpec::Gaussian { length_scale: 1.0 };
    let errs: Vec<f64> = [500, 2_000, 8_000]
        .iter()
        .map(|&m| {
            let data = known_sample(m, 2.0, 0.05, 23);
            let model = fit_krr(&data, &kernel, 1e-5).unwrap();
            sup_error_on(&model, known, &grid41()).unwrap().sup
        })
        .collect();
    assert!(errs[0] > errs[1] && errs[1] > errs[2], "{errs:?}");
}

#[test]
fn krr_training_error_shrinks_on_nested_samples() {
    let kernel = KernelSpec::Gaussian { length_scale: 0.7 };
    let mut wins = 0;
    for seed in 0..10 {
        let full = known_sample(400, 2.0, 0.3, 100 + seed);
        let mses: Vec<f64> = [100, 200, 400]
            .iter()
            .map(|&m| {
                let idx: Vec<usize> = (0..m).collect();
                let part = full.subset(&idx);
                let model = fit_krr(&part, &kernel, 1e-3).unwrap();
                let fitted = evaluate(&model, part.inputs()).unwrap();
                fitted
                    .iter()
                    .zip(part.inputs().iter_rows())
                    .map(|(f, x)| (f - known(x)).powi(2))
                    .sum::<f64>()
                    / m as f64
            })
            .collect();
        if mses[0] >= mses[1] && mses[1] >= mses[2] {
            wins += 1;
        }
    }
    assert!(wins > 5, "non-increasing in {wins} of 10 seeds");
}

#[test]
fn sup_error_of_exact_and_shifted_models() {
    let data = line_sample(50, |x| 1.0 + 3.0 * x, 4);
    let model = fit_linear(&data, &BasisSpec::polynomial(1).build(1)).unwrap();
    let probe = |i: usize| vec![-2.0 + 0.01 * i as f64];
    let exact = sup_error(&model, |z: &[f64]| 1.0 + 3.0 * z[0], probe, 401).unwrap();
    assert!(exact.sup < 1e-10 && exact.l2 < 1e-10);
    let shifted = sup_error(&model, |z: &[f64]| 0.5 + 3.0 * z[0], probe, 401).unwrap();
    assert!((shifted.sup - 0.5).abs() < 1e-10 && (shifted.l2 - 0.5).abs() < 1e-10);
}

#[test]
fn linear_reproduces_training_targets() {
    let data = line_sample(200, |x| 2.0 - x + 0.5 * x * x, 5);
    let model = fit_linear(&data, &BasisSpec::polynomial(2).build(1)).unwrap();
    let fitted = evaluate(&model, data.inputs()).unwrap();
    for (f, y) in fitted.iter().zip(data.targets()) {
        assert!((f - y).abs() < 1e-8);
    }
    assert!(evaluate(&model, &Matrix::zeros(0, 1)).unwrap().is_empty());
}

#[test]
fn mlp_weights_respect_the_bound() {
    let data = known_sample(500, 2.0, 0.05, 6);
    let arch = MlpArch {
        layers: 2,
        width: 16,
        weight_bound: 0.3,
    };
    let train = TrainConfig {
        steps: 400,
        ..TrainConfig::default()
    };
    let model = fit_mlp(&data, &arch, &train).unwrap();
    let ModelParams::Mlp { layers, .. } = &model.params else {
        panic!("not an MLP")
    };
    let max_w = layers
        .iter()
        .flat_map(|l| l.w.iter())
        .fold(0.0f64, |a, w| a.max(w.abs()));
    assert!(max_w <= 0.3);
}

#[test]
fn every_family_is_reproducible() {
    let data = known_sample(400, 2.0, 0.05, 8);
    let cands = [
        Candidate::Linear {
            basis: BasisSpec::polynomial(4),
        },
        Candidate::Kernel { constant: 0.45 },
        Candidate::Krr {
            kernel: KernelSpec::Matern {
                nu: 2.5,
                length_scale: 1.0,
            },
            lambda: 1e-4,
        },
        Candidate::Mlp {
            arch: MlpArch {
                width: 16,
                ..MlpArch::default()
            },
            train: TrainConfig {
                steps: 300,
                ..TrainConfig::default()
            },
        },
    ];
    let g = grid41();
    for c in &cands {
        let a = evaluate(&fit_candidate(&data, c).unwrap(), &g).unwrap();
        let b = evaluate(&fit_candidate(&data, c).unwrap(), &g).unwrap();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b, "{c:?}");
    }
}

/// Random dual weights on 10⁴ stored rows; fitting is not needed to
/// exercise the artifact format.
#[test]
fn large_krr_model_round_trips() {
    let m = 10_000;
    let mut rng = RngSeed(9).stream(0, 0);
    let inputs = Matrix::from_fn(m, 3, |_, _| rng.random::<f64>() * 4.0 - 2.0);
    let weights: Vec<f64> = (0..m).map(|_| rng.random::<f64>() - 0.5).collect();
    let kernel = KernelSpec::Matern {
        nu: 1.5,
        length_scale: 0.8,
    };
    let model = SurfaceModel {
        family: Family::Krr,
        params: ModelParams::Krr {
            inputs,
            weights,
            kernel,
            lambda: 1e-4,
            target_shift: 0.25,
            target_scale: 3.0,
        },
        standardization: Standardization::identity(3),
        meta: ModelMeta {
            fit_seconds: 0.0,
            sample_size: m,
            hyperparameters: serde_json::json!({ "lambda": 1e-4, "kernel": kernel }),
        },
    };
    let digest = |m: &SurfaceModel| Sha256::digest(serde_json::to_vec(&m.params).unwrap()).to_vec();
    let back = load_model(&save_model(&model).unwrap()).unwrap();
    assert_eq!(digest(&back), digest(&model));
    assert_eq!(back, model);
    let probe = Matrix::from_fn(100, 3, |i, j| ((i * 7 + j * 3) % 17) as f64 / 5.0 - 1.6);
    let a = evaluate(&model, &probe).unwrap();
    let b = evaluate(&back, &probe).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn truncated_artifact_is_rejected() {
    let data = line_sample(30, |x| x * x, 10);
    let bytes = save_model(&fit_kernel_smoother(&data, &Bandwidth::Fixed(0.3)).unwrap()).unwrap();
    assert!(matches!(
        load_model(&bytes[..bytes.len() / 2]),
        Err(nested_covar::Error::CorruptArtifact(_))
    ));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn kernel_predictions_stay_in_target_hull(
        seed in 0u64..1000,
        h in 0.05f64..2.0,
        px in -3.0f64..3.0,
        py in -3.0f64..3.0,
    ) {
        let data = known_sample(60, 2.0, 0.5, seed);
        let model = fit_kernel_smoother(&data, &Bandwidth::Fixed(h)).unwrap();
        let v = model.evaluate_one(&[px, py]).unwrap();
        let lo = data.targets().iter().cloned().fold(f64::MAX, f64::min);
        let hi = data.targets().iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn affine_inputs_do_not_change_linear_fits(
        seed in 0u64..1000,
        scale in prop::array::uniform2(0.1f64..20.0),
        shift in prop::array::uniform2(-50.0f64..50.0),
    ) {
        let raw = known_sample(120, 2.0, 0.1, seed);
        let moved = Matrix::from_fn(raw.len(), 2, |i, j| shift[j] + scale[j] * raw.inputs()[(i, j)]);
        let moved_set = TrainingSet::new(moved, raw.targets().to_vec()).unwrap();
        let basis = BasisSpec::polynomial(3).build(2);
        let a = fit_linear(&raw, &basis).unwrap();
        let b = fit_linear(&moved_set, &basis).unwrap();
        let probe = grid41();
        let probe_moved = Matrix::from_fn(probe.rows(), 2, |i, j| shift[j] + scale[j] * probe[(i, j)]);
        let ea = evaluate(&a, &probe).unwrap();
        let eb = evaluate(&b, &probe_moved).unwrap();
        for (x, y) in ea.iter().zip(&eb) {
            prop_assert!((x - y).abs() < 1e-8, "{} vs {}", x, y);
        }
    }

    #[test]
    fn evaluation_is_partition_invariant(seed in 0u64..100, cut in 0usize..1681) {
        let data = known_sample(200, 2.0, 0.1, seed);
        let model = fit_krr(&data, &KernelSpec::Gaussian { length_scale: 0.8 }, 1e-3).unwrap();
        let g = grid41();
        let whole = evaluate(&model, &g).unwrap();
        let first = g.select_rows(&(0..cut).collect::<Vec<_>>());
        let second = g.select_rows(&(cut..g.rows()).collect::<Vec<_>>());
        let mut parts = evaluate(&model, &first).unwrap();
        parts.extend(evaluate(&model, &second).unwrap());
        prop_assert_eq!(whole, parts);
    }
}

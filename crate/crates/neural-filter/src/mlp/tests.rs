use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn nn1_layers() -> Vec<LayerSpec> {
    vec![LayerSpec::relu(10), LayerSpec::linear(2)]
}

/// Central finite differences of the forward map; the independent check for
/// the analytic Jacobian.
fn fd_jacobian(model: &MlpModel, x: &DVector<f64>, h: f64) -> DMatrix<f64> {
    let mut jac = DMatrix::zeros(model.output_dim(), model.input_dim());
    for j in 0..model.input_dim() {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fp = model.forward(&xp).unwrap();
        let fm = model.forward(&xm).unwrap();
        for i in 0..model.output_dim() {
            jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Smallest hidden preactivation magnitude at `x`; large values mean `x` is
/// far from every ReLU kink.
fn kink_margin(model: &MlpModel, x: &DVector<f64>) -> f64 {
    let mut margin = f64::INFINITY;
    let mut a = x.clone();
    for (layer, (w, b)) in model
        .layers()
        .iter()
        .zip(model.weights().iter().zip(model.biases()))
    {
        let z = w * &a + b;
        if layer.activation == Activation::Relu {
            margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
            a = z.map(|v| v.max(0.0));
        } else {
            a = z;
        }
    }
    margin
}

fn max_mixed_rel_error(analytic: &DMatrix<f64>, reference: &DMatrix<f64>) -> f64 {
    analytic
        .iter()
        .zip(reference.iter())
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[test]
fn init_produces_preset_shapes() {
    let model = MlpModel::init(2, &nn1_layers(), 1).unwrap();
    assert_eq!(model.weights()[0].shape(), (10, 2));
    assert_eq!(model.weights()[1].shape(), (2, 10));
    assert_eq!(model.biases()[0].len(), 10);
    assert_eq!(model.output_dim(), 2);

    let nn2 = MlpModel::init(2, &[LayerSpec::relu(2), LayerSpec::linear(2)], 1).unwrap();
    assert_eq!(nn2.weights()[0].shape(), (2, 2));
    assert_eq!(nn2.weights()[1].shape(), (2, 2));
}

#[test]
fn init_is_deterministic_per_seed() {
    let a = MlpModel::init(2, &nn1_layers(), 7).unwrap();
    let b = MlpModel::init(2, &nn1_layers(), 7).unwrap();
    assert_eq!(a, b);
    let c = MlpModel::init(2, &nn1_layers(), 8).unwrap();
    assert_ne!(a, c);
}

#[test]
fn init_rejects_bad_architectures() {
    assert!(MlpModel::init(2, &[], 0).is_err());
    assert!(MlpModel::init(2, &[LayerSpec::relu(0), LayerSpec::linear(2)], 0).is_err());
    assert!(MlpModel::init(0, &nn1_layers(), 0).is_err());
    // Output layer must be linear.
    assert!(MlpModel::init(2, &[LayerSpec::relu(4), LayerSpec::relu(2)], 0).is_err());
}

#[test]
fn forward_zero_parameters_gives_zero() {
    let layers = nn1_layers();
    let model = MlpModel::from_parts(
        2,
        layers,
        vec![DMatrix::zeros(10, 2), DMatrix::zeros(2, 10)],
        vec![DVector::zeros(10), DVector::zeros(2)],
    )
    .unwrap();
    let out = model.forward(&DVector::from_vec(vec![3.0, -4.0])).unwrap();
    assert_eq!(out.as_slice(), &[0.0, 0.0]);
}

#[test]
fn forward_identity_linear_layer() {
    let model = MlpModel::from_parts(
        3,
        vec![LayerSpec::linear(3)],
        vec![DMatrix::identity(3, 3)],
        vec![DVector::zeros(3)],
    )
    .unwrap();
    let x = DVector::from_vec(vec![1.0, -2.5, 0.125]);
    assert_eq!(model.forward(&x).unwrap(), x);
}

#[test]
fn forward_hand_computed_composition() {
    // 1 -> 1 relu (w = 2, b = -1) -> 1 linear (w = 3, b = 0)
    let model = MlpModel::from_parts(
        1,
        vec![LayerSpec::relu(1), LayerSpec::linear(1)],
        vec![
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DMatrix::from_row_slice(1, 1, &[3.0]),
        ],
        vec![DVector::from_vec(vec![-1.0]), DVector::zeros(1)],
    )
    .unwrap();
    assert_eq!(model.forward(&DVector::from_vec(vec![1.0])).unwrap()[0], 3.0);
    assert_eq!(model.forward(&DVector::from_vec(vec![0.0])).unwrap()[0], 0.0);
}

#[test]
fn forward_rejects_wrong_input_length() {
    let model = MlpModel::init(2, &nn1_layers(), 0).unwrap();
    assert!(matches!(
        model.forward(&DVector::zeros(3)),
        Err(MlpError::DimensionMismatch { .. })
    ));
}

#[test]
fn jacobian_of_all_linear_network_is_weight_product() {
    let w1 = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -0.5, 0.25, 4.0, -1.0]);
    let w2 = DMatrix::from_row_slice(2, 3, &[0.5, 1.0, -2.0, 3.0, -0.25, 0.75]);
    let model = MlpModel::from_parts(
        2,
        vec![LayerSpec::linear(3), LayerSpec::linear(2)],
        vec![w1.clone(), w2.clone()],
        vec![DVector::from_vec(vec![1.0, 2.0, 3.0]), DVector::zeros(2)],
    )
    .unwrap();
    let expected = &w2 * &w1;
    for x in [
        DVector::from_vec(vec![0.0, 0.0]),
        DVector::from_vec(vec![10.0, -3.0]),
    ] {
        assert_eq!(model.input_jacobian(&x).unwrap(), expected);
    }
}

#[test]
fn jacobian_is_zero_when_all_units_dead() {
    // Negative weights and biases keep every hidden preactivation below zero
    // for positive inputs.
    let model = MlpModel::from_parts(
        2,
        vec![LayerSpec::relu(3), LayerSpec::linear(2)],
        vec![
            DMatrix::from_element(3, 2, -1.0),
            DMatrix::from_element(2, 3, 5.0),
        ],
        vec![DVector::from_element(3, -0.5), DVector::zeros(2)],
    )
    .unwrap();
    let jac = model
        .input_jacobian(&DVector::from_vec(vec![1.0, 2.0]))
        .unwrap();
    assert!(jac.iter().all(|v| *v == 0.0));
}

#[test]
fn jacobian_uses_zero_subgradient_at_kink() {
    // Preactivation is exactly zero at x = 0.5; the convention is row zeroed.
    let model = MlpModel::from_parts(
        1,
        vec![LayerSpec::relu(1), LayerSpec::linear(1)],
        vec![
            DMatrix::from_row_slice(1, 1, &[2.0]),
            DMatrix::from_row_slice(1, 1, &[1.0]),
        ],
        vec![DVector::from_vec(vec![-1.0]), DVector::zeros(1)],
    )
    .unwrap();
    let jac = model
        .input_jacobian(&DVector::from_vec(vec![0.5]))
        .unwrap();
    assert_eq!(jac[(0, 0)], 0.0);
}

#[test]
fn jacobian_matches_finite_differences_away_from_kinks() {
    let model = MlpModel::init(2, &nn1_layers(), 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    while checked < 20 {
        let x = DVector::from_fn(2, |_, _| rng.random_range(-2.0..2.0));
        if kink_margin(&model, &x) <= 1e-3 {
            continue;
        }
        let analytic = model.input_jacobian(&x).unwrap();
        let numeric = fd_jacobian(&model, &x, 1e-6);
        let err = max_mixed_rel_error(&analytic, &numeric);
        assert!(err < 1e-5, "relative error {err:e} at x = {x:?}");
        checked += 1;
    }
}

#[test]
fn save_load_roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let model = MlpModel::init(
        3,
        &[LayerSpec::relu(10), LayerSpec::relu(10), LayerSpec::linear(3)],
        21,
    )
    .unwrap();
    model.save(&path).unwrap();
    let loaded = MlpModel::load(&path).unwrap();
    assert_eq!(model, loaded);

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let x = DVector::from_fn(3, |_, _| rng.random_range(-5.0..5.0));
        assert_eq!(model.forward(&x).unwrap(), loaded.forward(&x).unwrap());
    }
}

#[test]
fn load_rejects_truncated_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let model = MlpModel::init(2, &nn1_layers(), 3).unwrap();
    model.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
    assert!(matches!(
        MlpModel::load(&path),
        Err(ModelIoError::Truncated)
    ));
}

#[test]
fn load_rejects_bad_magic_version_and_trailing_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let model = MlpModel::init(2, &nn1_layers(), 3).unwrap();

    model.save(&path).unwrap();
    let good = std::fs::read(&path).unwrap();

    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    std::fs::write(&path, &bad_magic).unwrap();
    assert!(matches!(MlpModel::load(&path), Err(ModelIoError::BadMagic)));

    let mut bad_version = good.clone();
    bad_version[8] = 99;
    std::fs::write(&path, &bad_version).unwrap();
    assert!(matches!(
        MlpModel::load(&path),
        Err(ModelIoError::UnsupportedVersion(99))
    ));

    let mut trailing = good.clone();
    trailing.push(0);
    std::fs::write(&path, &trailing).unwrap();
    assert!(matches!(
        MlpModel::load(&path),
        Err(ModelIoError::TrailingData)
    ));
}

#[test]
fn bias_free_models_roundtrip_their_flag() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let model = MlpModel::init_bias_free(2, &nn1_layers(), 9).unwrap();
    assert!(!model.bias_enabled());
    model.save(&path).unwrap();
    assert!(!MlpModel::load(&path).unwrap().bias_enabled());
}

/// Architectures used by the shipped experiments.
fn experiment_architectures() -> Vec<(usize, Vec<LayerSpec>)> {
    vec![
        (2, vec![LayerSpec::relu(10), LayerSpec::linear(2)]),
        (2, vec![LayerSpec::relu(2), LayerSpec::linear(2)]),
        (
            2,
            vec![LayerSpec::relu(10), LayerSpec::relu(10), LayerSpec::linear(2)],
        ),
        (
            3,
            vec![
                LayerSpec::relu(10),
                LayerSpec::relu(10),
                LayerSpec::relu(10),
                LayerSpec::linear(3),
            ],
        ),
        (
            4,
            vec![
                LayerSpec::relu(10),
                LayerSpec::relu(10),
                LayerSpec::relu(10),
                LayerSpec::relu(10),
                LayerSpec::linear(4),
            ],
        ),
    ]
}

proptest! {
    // Serialization round-trip identity over every shipped architecture.
    #[test]
    fn roundtrip_identity_over_architectures(arch_idx in 0usize..5, seed in 0u64..1000) {
        let (input_dim, layers) = experiment_architectures().swap_remove(arch_idx);
        let model = MlpModel::init(input_dim, &layers, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        model.save(&path).unwrap();
        prop_assert_eq!(MlpModel::load(&path).unwrap(), model);
    }

    // First-order exactness on a kink-free segment: the map is affine there.
    #[test]
    fn piecewise_linearity(seed in 0u64..500, x0 in -2.0..2.0f64, x1 in -2.0..2.0f64) {
        let model = MlpModel::init(2, &nn1_layers(), seed).unwrap();
        let x = DVector::from_vec(vec![x0, x1]);
        prop_assume!(kink_margin(&model, &x) > 1e-3);
        let eps = 1e-6;
        let dir = DVector::from_vec(vec![0.6, -0.8]);
        let x_eps = &x + &dir * eps;
        prop_assume!(kink_margin(&model, &x_eps) > 1e-4);

        let predicted = model.forward(&x).unwrap() + model.input_jacobian(&x).unwrap() * &dir * eps;
        let actual = model.forward(&x_eps).unwrap();
        for i in 0..2 {
            prop_assert!((predicted[i] - actual[i]).abs() < 1e-12 * (1.0 + actual[i].abs()));
        }
    }

    // Bias-free ReLU nets are positively homogeneous.
    #[test]
    fn positive_homogeneity_without_biases(
        seed in 0u64..500,
        x0 in -2.0..2.0f64,
        x1 in -2.0..2.0f64,
        alpha in 1e-3..10.0f64,
    ) {
        let model = MlpModel::init_bias_free(2, &nn1_layers(), seed).unwrap();
        let x = DVector::from_vec(vec![x0, x1]);
        let lhs = model.forward(&(&x * alpha)).unwrap();
        let rhs = model.forward(&x).unwrap() * alpha;
        for i in 0..2 {
            prop_assert!((lhs[i] - rhs[i]).abs() <= 1e-9 * (1.0 + rhs[i].abs()));
        }
    }
}

use ibit::linalg::{finite_diff_grad, max_relative_error, Matrix};
use ibit::model::{Model, TrainConfig, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> TrainConfig {
    // 4x4 images, 2x2 patches: a 2x2 grid plus CLS gives 5 tokens.
    TrainConfig {
        layers: 2,
        heads: 2,
        d_model: 4,
        patch_size: 2,
        image_size: 4,
        num_classes: 3,
        mlp_ratio: 2,
        filter_size: 2,
        mask_fidelity: Some(3),
        mask_pretrain_epochs: 30,
        init_std: 0.5,
        ..TrainConfig::default()
    }
}

fn check_all_parameters(variant: Variant) {
    let model = Model::new(&tiny_config(), variant).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let images: Vec<Matrix> = (0..3).map(|_| Matrix::random_uniform(4, 4, 1.0, &mut rng).map(f64::abs)).collect();
    let refs: Vec<&Matrix> = images.iter().collect();
    let labels = [0, 2, 1];
    let (_, grads) = model.loss_and_gradients(&refs, &labels).unwrap();
    for (i, p) in model.params().iter().enumerate() {
        let fd = finite_diff_grad(
            |v| {
                let mut m = model.clone();
                m.params_mut()[i].value = v.clone();
                m.loss(&refs, &labels)
            },
            &p.value,
            1e-5,
        )
        .unwrap();
        let err = max_relative_error(&fd, &grads[i]);
        assert!(err <= 1e-4, "{variant} {}: relative error {err:.3e}", p.name);
    }
}

#[test]
fn ibit_gradients_match_finite_differences() {
    check_all_parameters(Variant::Ibit);
}

#[test]
fn baseline_gradients_match_finite_differences() {
    check_all_parameters(Variant::Baseline);
}

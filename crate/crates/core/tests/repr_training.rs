use buds_core::data::{DemoSet, Modality, ModalityKind, Trajectory};
use buds_core::repr::{dataset_batch, train_repr, ReprConfig, ReprModel};
use nalgebra::DMatrix;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn modality(name: &str, dim: usize) -> Modality {
    Modality {
        name: name.into(),
        dim,
        kind: ModalityKind::Observation,
    }
}

/// One trajectory per entry of `trajs`; each entry holds one `len × dim`
/// matrix per modality.
fn demo_set(mods: Vec<Modality>, trajs: Vec<Vec<Vec<f32>>>) -> DemoSet {
    let trajectories = trajs
        .into_iter()
        .enumerate()
        .map(|(i, observations)| {
            let len = observations[0].len() / mods[0].dim;
            Trajectory {
                id: format!("t{i}"),
                task_id: "toy".into(),
                variant: 0,
                len,
                observations,
                actions: vec![0.0; len],
                gt_stage_labels: None,
            }
        })
        .collect();
    DemoSet {
        modalities: mods,
        action_dim: 1,
        trajectories,
        tasks: vec!["toy".into()],
    }
}

/// Observations `x = A z + b` with `z ∈ R^k`, so a rank-`k` affine
/// autoencoder reconstructs them exactly.
fn affine_subspace(dim: usize, k: usize, n: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Array2::from_shape_fn((k, dim), |_| rng.gen_range(-1.0..1.0));
    let b: Vec<f64> = (0..dim).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let z = Array2::from_shape_fn((n, k), |_| rng.gen_range(-1.0..1.0));
    let mut x = z.dot(&a);
    for mut row in x.rows_mut() {
        row.iter_mut().zip(&b).for_each(|(v, c)| *v += c);
    }
    x
}

/// Least-squares oracle: mean squared residual of the best rank-`k` affine
/// reconstruction (centred SVD truncation).
fn rank_k_residual(x: &Array2<f64>, k: usize) -> f64 {
    let (n, d) = x.dim();
    let mean = x.mean_axis(ndarray::Axis(0)).unwrap();
    let m = DMatrix::from_fn(n, d, |i, j| x[[i, j]] - mean[j]);
    let svd = m.svd(false, false);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s.iter().skip(k).map(|v| v * v).sum::<f64>() / (n * d) as f64
}

#[test]
fn affine_subspace_is_reconstructed_without_kl() {
    let (dim, k) = (6, 2);
    let x = affine_subspace(dim, k, 400, 7);
    assert!(rank_k_residual(&x, k) < 1e-20, "fixture is not rank {k}");
    let flat: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let set = demo_set(vec![modality("obs", dim)], vec![vec![flat]]);
    let cfg = ReprConfig {
        latent_dim: k,
        epochs: 400,
        learning_rate: 1e-2,
        batch_size: 0,
        kl_weight: 0.0,
        seed: 3,
        tie_init: false,
    };
    let (model, _) = train_repr(&set, &cfg).unwrap();
    let batch = dataset_batch(&set);
    // Zero noise decodes the posterior mean.
    let noise = Array2::zeros((400, k));
    let parts = model.loss_and_grad(&batch, noise.view(), 0.0, false).0;
    assert!(parts.reconstruction[0] < 1e-3, "mse {}", parts.reconstruction[0]);
}

#[test]
fn zero_epochs_keeps_initial_loss() {
    let x = affine_subspace(4, 2, 50, 1);
    let flat: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let set = demo_set(vec![modality("obs", 4)], vec![vec![flat]]);
    let cfg = ReprConfig {
        epochs: 0,
        ..ReprConfig::default()
    };
    let (model, report) = train_repr(&set, &cfg).unwrap();
    assert_eq!(report.losses.len(), 1);
    assert_eq!(model, ReprModel::init(&set.modalities, &cfg));
}

#[test]
fn identical_modalities_stay_symmetric() {
    let x = affine_subspace(5, 3, 120, 11);
    let flat: Vec<f32> = x.iter().map(|&v| v as f32).collect();
    let set = demo_set(
        vec![modality("left", 5), modality("right", 5)],
        vec![vec![flat.clone(), flat]],
    );
    let cfg = ReprConfig {
        latent_dim: 3,
        epochs: 30,
        tie_init: true,
        seed: 5,
        ..ReprConfig::default()
    };
    let (model, _) = train_repr(&set, &cfg).unwrap();
    let batch = dataset_batch(&set);
    let noise = Array2::zeros((120, 3));
    let parts = model.loss_and_grad(&batch, noise.view(), cfg.kl_weight, false).0;
    let (a, b) = (parts.reconstruction[0], parts.reconstruction[1]);
    assert!((a - b).abs() < 1e-6, "{a} vs {b}");
}

#[test]
fn training_is_deterministic_and_monotone() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let trajs: Vec<Vec<Vec<f32>>> = (0..3)
        .map(|_| {
            vec![
                (0..40 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                (0..40 * 2).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ]
        })
        .collect();
    let set = demo_set(vec![modality("a", 3), modality("b", 2)], trajs);
    let cfg = ReprConfig {
        latent_dim: 2,
        epochs: 25,
        batch_size: 16,
        learning_rate: 0.05,
        ..ReprConfig::default()
    };
    let (m1, r1) = train_repr(&set, &cfg).unwrap();
    let (m2, r2) = train_repr(&set, &cfg).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(r1, r2);
    for w in r1.losses.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "loss rose: {:?}", w);
    }
    assert!(r1.last() <= r1.initial());
}

use lance_core::autograd::{backward, forward, LayerSpec, Network, StoragePolicy};
use lance_core::calibrate::{CovarianceAccumulator, LayerSubspace, SubspaceBank};
use lance_core::data::random_orthonormal;
use lance_core::linalg::orth_merge;
use lance_core::{DenseMatrix, DenseTensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(dims: Vec<usize>, rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(dims, |_| rng.random_range(-1.0..1.0)).unwrap()
}

fn random_subspace(dims: &[usize], rng: &mut ChaCha8Rng) -> LayerSubspace {
    let factors = dims
        .iter()
        .map(|&n| random_orthonormal(n, rng.random_range(1..=n), rng))
        .collect();
    LayerSubspace::new(dims.to_vec(), factors).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reconstruction_is_a_projection(
        dims in prop::collection::vec(1usize..6, 2..=4),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub = random_subspace(&dims, &mut rng);
        let x = rand_tensor(dims.clone(), &mut rng);
        let once = sub.reconstruct(&sub.compress(&x).unwrap()).unwrap();
        let twice = sub.reconstruct(&sub.compress(&once).unwrap()).unwrap();
        prop_assert!(twice.max_abs_diff(&once) <= 1e-12);
        prop_assert!(once.frobenius_norm() <= x.frobenius_norm() * (1.0 + 1e-12));
        prop_assert_eq!(sub.compress(&x).unwrap().len(), sub.core_elements());
    }

    #[test]
    fn last_mode_gradient_is_a_descent_direction(
        b in 2usize..12, f in 2usize..12, h in 1usize..6, seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![LayerSpec::dense(f, h).with_trainable(true), LayerSpec::relu(), LayerSpec::dense(h, 3)];
        let net = Network::new(vec![f], layers, seed).unwrap();
        let x = rand_tensor(vec![b, f], &mut rng);
        let y: Vec<usize> = (0..b).map(|_| rng.random_range(0..3)).collect();
        let factors = vec![random_orthonormal(b, b, &mut rng), random_orthonormal(f, rng.random_range(1..=f), &mut rng)];
        let mut bank = SubspaceBank::new(b, 0.5);
        bank.insert(0, LayerSubspace::new(vec![b, f], factors).unwrap());
        let (lf, sf) = forward(&net, &x, StoragePolicy::Full).unwrap();
        let (_, gf) = backward(&net, &sf, &lf, &y).unwrap();
        let (ll, sl) = forward(&net, &x, StoragePolicy::LowRank(&bank)).unwrap();
        let (_, gl) = backward(&net, &sl, &ll, &y).unwrap();
        let (wl, wf) = (&gl.layer(0).unwrap().weight, &gf.layer(0).unwrap().weight);
        let ip = wl.frobenius_dot(wf);
        let sq = wl.frobenius_dot(wl);
        prop_assert!(ip >= -1e-12);
        prop_assert!((ip - sq).abs() <= 1e-10 * sq.max(1e-300) + 1e-300);
    }

    #[test]
    fn shard_merge_matches_sequential(
        dims in prop::collection::vec(1usize..5, 2..=4),
        splits in prop::collection::vec(0usize..3, 1..8),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut seq = CovarianceAccumulator::new(&dims);
        let mut shards: Vec<CovarianceAccumulator> = (0..3).map(|_| CovarianceAccumulator::new(&dims)).collect();
        for &s in &splits {
            let x = rand_tensor(dims.clone(), &mut rng);
            seq.update(&x).unwrap();
            shards[s].update(&x).unwrap();
        }
        shards.retain(|a| a.count() > 0);
        let merged = CovarianceAccumulator::merge(&shards).unwrap();
        prop_assert_eq!(merged.count(), splits.len());
        for m in 0..dims.len() {
            prop_assert!(merged.covariance(m).unwrap().max_abs_diff(seq.covariance(m).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn merge_keeps_prefix_and_orthonormality(n in 2usize..10, k in 0usize..5, extra in 1usize..5, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prev = random_orthonormal(n, k.min(n), &mut rng);
        let new = DenseMatrix::from_fn(n, extra, |_, _| rng.random_range(-1.0..1.0));
        let merged = orth_merge(&prev, &new).unwrap();
        prop_assert!(merged.cols() <= n);
        prop_assert_eq!(merged.leading_columns(prev.cols()), prev);
        let g = merged.matmul_tn(&merged).unwrap();
        prop_assert!(g.max_abs_diff(&DenseMatrix::identity(merged.cols())) <= 1e-10);
    }
}

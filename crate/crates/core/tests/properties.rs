use hyperphm::algebra::{build_phm_sign_matrices, hamilton_product, kron, permute_tau, Quaternion};
use hyperphm::autodiff::Graph;
use hyperphm::layers::{
    phm_linear, quaternion_conv2d, vectormap_conv2d, InitSpec, PhmLinearParams, QuaternionConv2dParams,
    VectormapConv2dParams,
};
use hyperphm::oracle::{naive_conv2d, naive_kron, naive_matmul};
use hyperphm::tensor::{conv2d, global_avg_pool, matmul, ConvSpec, Tensor};
use hyperphm::training::{lr_at, Schedule, TrainConfig};
use hyperphm::verify::bridge_max_error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn conv_spec() -> impl Strategy<Value = ConvSpec> {
    (prop_oneof![Just(1usize), Just(3)], 1usize..=2)
        .prop_flat_map(|(k, s)| (Just(k), Just(s), 0..=k / 2))
        .prop_map(|(k, s, p)| ConvSpec::new(k, s, p).unwrap())
}

fn quaternion() -> impl Strategy<Value = Quaternion<f64>> {
    prop::array::uniform4(-3.0f64..3.0).prop_map(Quaternion::from_array)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_is_linear(
        spec in conv_spec(),
        c in 1usize..4,
        o in 1usize..4,
        hw in 3usize..7,
        a in -2.0f64..2.0,
        b in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let x = uniform(&[2, c, hw, hw], seed);
        let y = uniform(&[2, c, hw, hw], seed ^ 1);
        let k = uniform(&[o, c, spec.kernel, spec.kernel], seed ^ 2);
        let mixed = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d(&mixed, &k, spec).unwrap();
        let rhs = conv2d(&x, &k, spec).unwrap().scale(a).add(&conv2d(&y, &k, spec).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn conv_matches_direct_loops(
        spec in conv_spec(),
        c in 1usize..5,
        o in 1usize..5,
        hw in 3usize..8,
        seed in any::<u64>(),
    ) {
        let x = uniform(&[2, c, hw, hw], seed);
        let k = uniform(&[o, c, spec.kernel, spec.kernel], seed ^ 3);
        let fast = conv2d(&x, &k, spec).unwrap();
        prop_assert!(fast.rel_err(&naive_conv2d(&x, &k, spec).unwrap()) < 1e-12);
    }

    #[test]
    fn matmul_is_associative(m in 1usize..6, n in 1usize..6, p in 1usize..6, q in 1usize..6, seed in any::<u64>()) {
        let a = uniform(&[m, n], seed);
        let b = uniform(&[n, p], seed ^ 1);
        let c = uniform(&[p, q], seed ^ 2);
        let lhs = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let rhs = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        prop_assert!(matmul(&a, &b).unwrap().rel_err(&naive_matmul(&a, &b).unwrap()) < 1e-12);
    }

    #[test]
    fn avg_pool_ignores_spatial_order(c in 1usize..4, hw in 1usize..6, seed in any::<u64>()) {
        let x = uniform(&[2, c, hw, hw], seed);
        let mut order: Vec<usize> = (0..hw * hw).collect();
        order.shuffle(&mut rng(seed ^ 5));
        let mut shuffled = x.clone();
        for plane in 0..2 * c {
            let base = plane * hw * hw;
            for (dst, &src) in order.iter().enumerate() {
                shuffled.data_mut()[base + dst] = x.data()[base + src];
            }
        }
        let a = global_avg_pool(&x).unwrap();
        let b = global_avg_pool(&shuffled).unwrap();
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn tau_is_a_bijection_of_order_d(d in 1usize..10, power in 0usize..20) {
        let v: Vec<usize> = (0..d).collect();
        let mut shifted = permute_tau(&v, power);
        prop_assert_eq!(permute_tau(&shifted, d), shifted.clone());
        prop_assert_eq!(permute_tau(&shifted, d - power % d), v.clone());
        shifted.sort_unstable();
        prop_assert_eq!(shifted, v);
    }

    #[test]
    fn quaternion_norm_is_multiplicative(p in quaternion(), q in quaternion()) {
        let lhs = hamilton_product(p, q).norm_sqr();
        let rhs = p.norm_sqr() * q.norm_sqr();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0));
    }

    #[test]
    fn phm4_reproduces_hamilton_product(seed in any::<u64>()) {
        prop_assert!(bridge_max_error(20, seed).unwrap() < 1e-12);
    }

    #[test]
    fn kron_mixed_product(
        m in 1usize..4, n in 1usize..4, p in 1usize..4, q in 1usize..4, s in 1usize..4, t in 1usize..4,
        seed in any::<u64>(),
    ) {
        let a = uniform(&[m, n], seed);
        let b = uniform(&[p, q], seed ^ 1);
        let c = uniform(&[n, s], seed ^ 2);
        let d = uniform(&[q, t], seed ^ 3);
        let lhs = matmul(&kron(&a, &b).unwrap(), &kron(&c, &d).unwrap()).unwrap();
        let rhs = kron(&matmul(&a, &c).unwrap(), &matmul(&b, &d).unwrap()).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        prop_assert_eq!(kron(&a, &b).unwrap(), naive_kron(&a, &b).unwrap());
    }

    #[test]
    fn sign_matrices_tile_the_grid(n in 1usize..=12) {
        let set = build_phm_sign_matrices(n).unwrap();
        prop_assert!(set.tiles_grid());
        for t in 0..n {
            prop_assert!(set.is_signed_permutation(t));
        }
    }

    #[test]
    fn quaternion_conv_uses_a_quarter_of_the_weights(
        cin in 1usize..5, cout in 1usize..5, spec in conv_spec(), hw in 3usize..6, seed in any::<u64>(),
    ) {
        let (cin, cout) = (4 * cin, 4 * cout);
        let p = QuaternionConv2dParams::<f64>::new(cin, cout, spec, &InitSpec::new(seed)).unwrap();
        let stored: usize = p.components().iter().map(|t| t.len()).sum();
        prop_assert_eq!(4 * stored, cin * cout * spec.kernel * spec.kernel);
        let x = uniform(&[1, cin, hw, hw], seed);
        let full = p.full_kernel().unwrap();
        prop_assert!(quaternion_conv2d(&x, &p).unwrap().rel_err(&conv2d(&x, &full, spec).unwrap()) < 1e-12);
    }

    #[test]
    fn vectormap3_conv_uses_a_third_of_the_weights(
        cin in 1usize..5, cout in 1usize..5, spec in conv_spec(), hw in 3usize..6, seed in any::<u64>(),
    ) {
        let (cin, cout) = (3 * cin, 3 * cout);
        let p = VectormapConv2dParams::<f64>::new(3, cin, cout, spec, &InitSpec::new(seed)).unwrap();
        let stored: usize = p.kernels.iter().map(|t| t.len()).sum();
        prop_assert_eq!(3 * stored, cin * cout * spec.kernel * spec.kernel);
        let x = uniform(&[1, cin, hw, hw], seed);
        let full = p.full_kernel().unwrap();
        prop_assert!(vectormap_conv2d(&x, &p).unwrap().rel_err(&conv2d(&x, &full, spec).unwrap()) < 1e-12);
    }

    #[test]
    fn phm_weights_shrink_by_n(n in 1usize..=6, a in 1usize..4, b in 1usize..4, seed in any::<u64>()) {
        let (d, k) = (n * a, n * b);
        let p = PhmLinearParams::<f64>::new(n, d, k, &InitSpec::new(seed)).unwrap();
        let stored: usize = p.s_blocks.iter().map(|t| t.len()).sum();
        prop_assert_eq!(n * stored, d * k);
        let x = uniform(&[3, d], seed);
        let y = matmul(&x, &p.h().unwrap().transpose().unwrap()).unwrap();
        let out = phm_linear(&x, &p).unwrap();
        let bias_free = out.sub(&Tensor::new(&[3, k], p.bias.data().repeat(3)).unwrap()).unwrap();
        prop_assert!(bias_free.max_abs_diff(&y) < 1e-12);
    }

    #[test]
    fn lr_schedule_has_no_jumps(
        epochs in 12usize..200,
        warmup in 0usize..10,
        lr in 0.001f64..1.0,
        cosine in any::<bool>(),
    ) {
        let cfg = TrainConfig {
            epochs,
            warmup_epochs: warmup,
            lr,
            schedule: if cosine { Schedule::Cosine } else { Schedule::Linear },
            ..TrainConfig::default()
        };
        let mut prev = lr_at(1, &cfg);
        prop_assert!(prev > 0.0 && prev <= lr);
        let decay_steps = (epochs - warmup) as f64;
        let warm_step = if warmup > 1 { 0.9 * lr / (warmup - 1) as f64 } else { 0.0 };
        let max_step = warm_step.max(std::f64::consts::PI / 2.0 * lr / decay_steps) * (1.0 + 1e-9);
        for e in 2..=epochs {
            let cur = lr_at(e, &cfg);
            prop_assert!((cur - prev).abs() <= max_step, "jump at epoch {e}: {prev} -> {cur}");
            prop_assert!(cur <= lr * (1.0 + 1e-12));
            prev = cur;
        }
        prop_assert!(lr_at(epochs, &cfg).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(
        k in 2usize..8, shift in -50.0f64..50.0, seed in any::<u64>(),
    ) {
        let z = uniform(&[3, k], seed).scale(4.0);
        let labels: Vec<usize> = (0..3).map(|i| (i * 7 + seed as usize) % k).collect();
        let eval = |z: Tensor<f64>| {
            let mut g = Graph::new();
            let v = g.variable(z);
            let loss = g.softmax_cross_entropy(v, &labels).unwrap();
            let grad = g.backward(loss).unwrap().get(v).unwrap().clone();
            (g.value(loss).item(), grad)
        };
        let (l0, g0) = eval(z.clone());
        let (l1, g1) = eval(z.map(|v| v + shift));
        prop_assert!((l0 - l1).abs() < 1e-10);
        prop_assert!(g0.max_abs_diff(&g1) < 1e-10);
    }
}

/// The sign pattern of `sum_i A_i` follows the L-matrix rule for odd
/// dimensions; at `n = 4` the Hamilton structure takes precedence.
#[test]
fn sign_pattern_matches_l_for_three_and_five() {
    for n in [3, 5] {
        let set = build_phm_sign_matrices(n).unwrap();
        let l = hyperphm::algebra::build_l_matrix(n).unwrap();
        let expected: Vec<i8> = l.rows().into_iter().flatten().map(|v| v as i8).collect();
        assert_eq!(set.sign_pattern(), expected, "n = {n}");
    }
}

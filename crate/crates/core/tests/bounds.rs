use proptest::prelude::*;
use psilon::architectures::{Body, EffectiveWeights};
use psilon::linalg::{op_inf_one_norm, standard_normal};
use psilon::pathnorm::{
    empirical_lipschitz, equivalent_mlp, improved_bound_crelu, naive_crelu_path_norm,
    network_closed_form, path_norm_enumerate, path_norm_mlp, product_bound,
};
use psilon::{init_network, seeded_rng, Lengths, Matrix, NetSpec, Network, NormMode, Rng};

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

fn random_mlp(dims: &[usize], rng: &mut Rng) -> Vec<Matrix> {
    dims.windows(2)
        .map(|w| random_matrix(w[1], w[0], rng))
        .collect()
}

fn randomized(spec: &NetSpec, seed: u64) -> Network {
    let mut rng = seeded_rng(seed);
    let mut net = init_network(spec, &mut rng).unwrap();
    let p: Vec<f64> = net
        .params()
        .iter()
        .map(|_| standard_normal(&mut rng))
        .collect();
    net.set_params(&p).unwrap();
    net
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}

fn dims_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=6, 2..=5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn path_norm_equals_enumeration(dims in dims_strategy(), seed in any::<u64>()) {
        let w = random_mlp(&dims, &mut seeded_rng(seed));
        prop_assert!(rel(path_norm_mlp(&w).unwrap(), path_norm_enumerate(&w).unwrap()) <= 1e-10);
    }

    #[test]
    fn path_norm_is_homogeneous_in_each_layer(
        dims in dims_strategy(),
        seed in any::<u64>(),
        c in 0.01f64..100.0,
        pick in any::<prop::sample::Index>(),
    ) {
        let w = random_mlp(&dims, &mut seeded_rng(seed));
        let k = pick.index(w.len());
        let mut scaled = w.clone();
        scaled[k] = scaled[k].scale(c);
        let base = path_norm_mlp(&w).unwrap();
        prop_assert!(rel(path_norm_mlp(&scaled).unwrap(), c * base) <= 1e-12);
        let pb = product_bound(&w, 16).unwrap().value;
        prop_assert!(rel(product_bound(&scaled, 16).unwrap().value, c * pb) <= 1e-12);
    }

    #[test]
    fn crelu_bounds_are_homogeneous_in_outer_layers(
        width in 1usize..=5,
        blocks in 0usize..=3,
        seed in any::<u64>(),
        c in 0.01f64..100.0,
    ) {
        let mut rng = seeded_rng(seed);
        let first = random_matrix(width, 3, &mut rng);
        let inner: Vec<_> = (0..blocks)
            .map(|_| (random_matrix(width, width, &mut rng), random_matrix(width, width, &mut rng)))
            .collect();
        let last = (random_matrix(2, width, &mut rng), random_matrix(2, width, &mut rng));
        for bound in [improved_bound_crelu, naive_crelu_path_norm] {
            let base = bound(&first, &inner, &last).unwrap();
            let by_first = bound(&first.scale(c), &inner, &last).unwrap();
            let by_last = bound(&first, &inner, &(last.0.scale(c), last.1.scale(c))).unwrap();
            prop_assert!(rel(by_first, c * base) <= 1e-12);
            prop_assert!(rel(by_last, c * base) <= 1e-12);
        }
    }

    #[test]
    fn closed_form_is_homogeneous_in_each_length(seed in any::<u64>(), c in 0.01f64..100.0, depth in 1usize..=3) {
        let mut net = randomized(&NetSpec::psilon_mlp(3, 4, depth, 2), seed);
        let base = network_closed_form(&net).unwrap();
        match &mut net.first.lengths {
            Lengths::Shared(g) => *g *= c,
            Lengths::PerRow(g) => g.iter_mut().for_each(|x| *x *= c),
        }
        prop_assert!(rel(network_closed_form(&net).unwrap(), c * base) <= 1e-12);
    }

    #[test]
    fn inf_one_norm_is_sandwiched(rows in 1usize..=6, cols in 1usize..=6, seed in any::<u64>()) {
        let mut rng = seeded_rng(seed);
        let w = random_matrix(rows, cols, &mut rng);
        let exact = op_inf_one_norm(&w, 16);
        prop_assert!(exact.exact);
        prop_assert!(exact.value <= w.abs_sum() * (1.0 + 1e-12));
        for _ in 0..200 {
            let t: Vec<f64> = (0..cols).map(|_| 2.0 * rand::Rng::random::<f64>(&mut rng) - 1.0).collect();
            let wt: f64 = w.matvec(&t).unwrap().iter().map(|x| x.abs()).sum();
            prop_assert!(wt <= exact.value * (1.0 + 1e-12));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn single_output_mlp_bound_chain(d_in in 1usize..=6, width in 1usize..=6, depth in 0usize..=3, seed in any::<u64>()) {
        let net = randomized(&NetSpec::plain_mlp(d_in, width, depth, 1), seed);
        let w = equivalent_mlp(&net).unwrap();
        let p1 = path_norm_mlp(&w).unwrap();
        let pb = product_bound(&w, 16).unwrap();
        let lip = empirical_lipschitz(&net, 2000, 1.0, &mut seeded_rng(seed ^ 1)).unwrap();
        prop_assert!(pb.exact);
        prop_assert!(lip <= p1 * (1.0 + 1e-9));
        prop_assert!(p1 <= pb.value * (1.0 + 1e-9));
    }

    #[test]
    fn residual_bound_chain(width in 1usize..=5, blocks in 0usize..=3, d_out in 1usize..=3, seed in any::<u64>()) {
        let mut spec = NetSpec::psilon_resnet(3, width, blocks, d_out);
        spec.mode = NormMode::None;
        let net = randomized(&spec, seed);
        let EffectiveWeights::Residual { first, blocks, last } = net.effective_weights().unwrap() else {
            unreachable!()
        };
        let improved = improved_bound_crelu(&first, &blocks, &last).unwrap();
        let naive = naive_crelu_path_norm(&first, &blocks, &last).unwrap();
        let lip = empirical_lipschitz(&net, 2000, 1.0, &mut seeded_rng(seed ^ 1)).unwrap();
        prop_assert!(lip <= improved * (1.0 + 1e-9));
        prop_assert!(improved <= naive * (1.0 + 1e-12));
    }

    #[test]
    fn psilon_closed_forms_match_general_bounds(seed in any::<u64>(), depth in 0usize..=3) {
        let mlp = randomized(&NetSpec::psilon_mlp(4, 5, depth, 2), seed);
        let general = path_norm_mlp(&equivalent_mlp(&mlp).unwrap()).unwrap();
        prop_assert!(rel(network_closed_form(&mlp).unwrap(), general) <= 1e-10);

        let res = randomized(&NetSpec::psilon_resnet(4, 5, depth, 2), seed);
        let Body::Residual { .. } = &res.body else { unreachable!() };
        let EffectiveWeights::Residual { first, blocks, last } = res.effective_weights().unwrap() else {
            unreachable!()
        };
        let general = improved_bound_crelu(&first, &blocks, &last).unwrap();
        prop_assert!(rel(network_closed_form(&res).unwrap(), general) <= 1e-10);
    }
}

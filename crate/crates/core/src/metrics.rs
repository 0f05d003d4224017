//! Near-sparsity and exact sparsity of weight vectors.

use serde::{Deserialize, Serialize};

use crate::architectures::Network;
use crate::error::Result;
use crate::linalg::l1_norm;

/// `1 − exp(H(|v| / ‖v‖₁)) / d`, with `0 ln 0 = 0` and the value 1 for `v = 0`.
pub fn near_sparsity(v: &[f64]) -> f64 {
    let s = l1_norm(v);
    if s == 0.0 || v.is_empty() {
        return 1.0;
    }
    let entropy: f64 = v
        .iter()
        .map(|x| x.abs() / s)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    (1.0 - entropy.exp() / v.len() as f64).clamp(0.0, 1.0)
}

/// Sparsity of every effective weight row of a network. Both matrices of a
/// CReLU pair and the first and last layers are included; biases are not.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub per_vector: Vec<f64>,
    pub network_nsparsity: f64,
    /// Fraction of effective weights that are exactly zero.
    pub exact_sparsity: f64,
}

pub fn network_sparsity(net: &Network) -> Result<SparsityReport> {
    let eff = net.effective_weights()?;
    let mut per_vector = Vec::new();
    let (mut zeros, mut total) = (0usize, 0usize);
    for w in eff.matrices() {
        for row in w.row_iter() {
            per_vector.push(near_sparsity(row));
            zeros += row.iter().filter(|&&x| x == 0.0).count();
            total += row.len();
        }
    }
    let network_nsparsity = if per_vector.is_empty() {
        0.0
    } else {
        per_vector.iter().sum::<f64>() / per_vector.len() as f64
    };
    Ok(SparsityReport {
        per_vector,
        network_nsparsity,
        exact_sparsity: if total == 0 {
            0.0
        } else {
            zeros as f64 / total as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::architectures::{init_network, NetSpec};
    use crate::linalg::{seeded_rng, Matrix};
    use crate::normalization::NormMode;
    use proptest::prelude::*;

    #[test]
    fn defined_cases() {
        assert_eq!(near_sparsity(&[0.0; 5]), 1.0);
        assert_eq!(near_sparsity(&[1.0, 1.0, 0.0, 0.0]), 0.5);
        assert_eq!(near_sparsity(&[3.0, 3.0, 3.0, 3.0]), 0.0);
        assert_eq!(near_sparsity(&[0.0, -2.0, 0.0, 0.0]), 0.75);
    }

    #[test]
    fn bit_vectors_match_bit_sparsity() {
        for mask in 1u32..(1 << 8) {
            let v: Vec<f64> = (0..8).map(|i| f64::from((mask >> i) & 1)).collect();
            let ones = v.iter().sum::<f64>();
            let expected = 1.0 - ones / 8.0;
            assert!(
                (near_sparsity(&v) - expected).abs() < 1e-14,
                "mask {mask:b}"
            );
        }
    }

    #[test]
    fn one_hot_network() {
        let spec = NetSpec::plain_mlp(3, 3, 1, 3);
        let mut net = init_network(&spec, &mut seeded_rng(0)).unwrap();
        net.first.raw = Matrix::identity(3);
        if let crate::architectures::Body::Mlp(rest) = &mut net.body {
            rest[0].raw = Matrix::identity(3);
        }
        let r = network_sparsity(&net).unwrap();
        assert!((r.network_nsparsity - (1.0 - 1.0 / 3.0)).abs() < 1e-12);
        assert!((r.exact_sparsity - 2.0 / 3.0).abs() < 1e-12);

        net.first.raw = Matrix::filled(3, 3, 0.5);
        if let crate::architectures::Body::Mlp(rest) = &mut net.body {
            rest[0].raw = Matrix::filled(3, 3, -2.0);
        }
        let r = network_sparsity(&net).unwrap();
        assert!(r.network_nsparsity.abs() < 1e-12);
    }

    #[test]
    fn fully_pruned_rows_keep_their_length() {
        let mut spec = NetSpec::psilon_mlp(6, 8, 2, 2);
        spec.mode = NormMode::Blend { alpha: 1.0 };
        let net = init_network(&spec, &mut seeded_rng(3)).unwrap();
        let r = network_sparsity(&net).unwrap();
        assert!(r.exact_sparsity > 0.0);
        for w in net.effective_weights().unwrap().matrices() {
            for row in w.row_iter() {
                assert!((l1_norm(row) - 1.0).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn invariances(v in prop::collection::vec(-5.0f64..5.0, 1..10), c in 0.1f64..10.0, seed in 0u64..1000) {
            let base = near_sparsity(&v);
            prop_assert!((0.0..=1.0).contains(&base));
            let scaled: Vec<f64> = v.iter().map(|x| -c * x).collect();
            prop_assert!((near_sparsity(&scaled) - base).abs() < 1e-12);
            let mut permuted = v.clone();
            let k = (seed as usize) % v.len();
            permuted.rotate_left(k);
            prop_assert!((near_sparsity(&permuted) - base).abs() < 1e-12);
            if l1_norm(&v) > 0.0 {
                let d = v.len() as f64;
                prop_assert!(base <= 1.0 - 1.0 / d + 1e-12);
            }
        }
    }
}

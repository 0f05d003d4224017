//! Fast invariant checks runnable from the command line.

use rand::Rng as _;
use serde::Serialize;

use crate::architectures::{init_network, Activation, Body, NetSpec, Network, OutNonlinearity};
use crate::data::{Dataset, Targets, Task};
use crate::error::Result;
use crate::linalg::{l1_norm, op_inf_one_norm, seeded_rng, standard_normal, Matrix, Rng};
use crate::metrics::near_sparsity;
use crate::normalization::{proj_l1_sphere, NormMode};
use crate::pathnorm::{
    empirical_lipschitz, equivalent_mlp, improved_bound_crelu, naive_crelu_path_norm,
    network_closed_form, network_improved_grad, network_naive, path_norm_enumerate, path_norm_mlp,
    product_bound,
};
use crate::training::{regularized_loss, LossKind, Regularizer};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult {
            name,
            passed,
            detail,
        },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn random_matrix(rows: usize, cols: usize, rng: &mut Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| standard_normal(rng)).collect();
    Matrix::from_vec(rows, cols, data).expect("sizes agree")
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Randomizes every parameter of a freshly initialized network.
pub fn randomize(net: &mut Network, scale: f64, rng: &mut Rng) -> Result<()> {
    let p: Vec<f64> = net
        .params()
        .iter()
        .map(|_| scale * standard_normal(rng))
        .collect();
    net.set_params(&p)
}

/// Projection onto the unit L1 sphere by bisection on the threshold.
fn bisection_projection(w: &[f64]) -> Vec<f64> {
    let excess = |t: f64| w.iter().map(|x| (x.abs() - t).max(0.0)).sum::<f64>() - 1.0;
    let max = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let (mut lo, mut hi) = (-1.0, max);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    w.iter()
        .map(|&x| {
            let s = if x + crate::normalization::PROJ_EPS >= 0.0 {
                1.0
            } else {
                -1.0
            };
            s * (x.abs() - t).max(0.0)
        })
        .collect()
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let mut rng = seeded_rng(seed);
    let mut out = Vec::new();

    out.push(check("path norm equals path enumeration", || {
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let depth = rng.random_range(1..=4);
            let mut fan = rng.random_range(1..=6);
            let mut ws = Vec::new();
            for _ in 0..depth {
                let o = rng.random_range(1..=6);
                ws.push(random_matrix(o, fan, &mut rng));
                fan = o;
            }
            worst = worst.max(rel(path_norm_mlp(&ws)?, path_norm_enumerate(&ws)?));
        }
        Ok((worst < 1e-10, format!("max relative gap {worst:.2e}")))
    }));

    out.push(check(
        "lipschitz estimate <= path norm <= product bound",
        || {
            let mut violations = 0;
            for i in 0..20 {
                let mut spec =
                    NetSpec::plain_mlp(rng.random_range(1..=4), rng.random_range(1..=6), 2, 1);
                spec.out_nonlinearity = if i % 2 == 0 {
                    OutNonlinearity::Identity
                } else {
                    OutNonlinearity::Sigmoid
                };
                let mut net = init_network(&spec, &mut rng)?;
                randomize(&mut net, 1.0, &mut rng)?;
                let p1 = network_naive(&net)?;
                let pb = product_bound(&equivalent_mlp(&net)?, 16)?;
                let lip = empirical_lipschitz(&net, 2000, 1.0, &mut rng)?;
                if lip > p1 * (1.0 + 1e-9) || p1 > pb.value * (1.0 + 1e-9) {
                    violations += 1;
                }
            }
            Ok((
                violations == 0,
                format!("{violations} violations in 20 networks"),
            ))
        },
    ));

    out.push(check(
        "lipschitz estimate <= improved bound <= naive CReLU bound",
        || {
            let mut violations = 0;
            for _ in 0..20 {
                let d = rng.random_range(1..=5);
                let first = random_matrix(d, 3, &mut rng);
                let blocks: Vec<_> = (0..rng.random_range(0..=3))
                    .map(|_| (random_matrix(d, d, &mut rng), random_matrix(d, d, &mut rng)))
                    .collect();
                let last = (random_matrix(1, d, &mut rng), random_matrix(1, d, &mut rng));
                let improved = improved_bound_crelu(&first, &blocks, &last)?;
                let naive = naive_crelu_path_norm(&first, &blocks, &last)?;
                let mut spec = NetSpec::psilon_resnet(3, d, blocks.len(), 1);
                spec.mode = NormMode::None;
                let mut net = init_network(&spec, &mut rng)?;
                net.first.raw = first;
                if let Body::Residual {
                    blocks: bs,
                    last: l,
                } = &mut net.body
                {
                    for (b, (p, m)) in bs.iter_mut().zip(blocks) {
                        b.plus = p;
                        b.minus = m;
                    }
                    l.plus = last.0;
                    l.minus = last.1;
                }
                let lip = empirical_lipschitz(&net, 2000, 1.0, &mut rng)?;
                if lip > improved * (1.0 + 1e-9) || improved > naive * (1.0 + 1e-12) {
                    violations += 1;
                }
            }
            Ok((
                violations == 0,
                format!("{violations} violations in 20 networks"),
            ))
        },
    ));

    out.push(check(
        "closed form equals general bound for PSiLON networks",
        || {
            let mut worst: f64 = 0.0;
            for _ in 0..20 {
                let mut net = init_network(&NetSpec::psilon_mlp(3, 5, 2, 2), &mut rng)?;
                randomize(&mut net, 1.0, &mut rng)?;
                worst = worst.max(rel(network_closed_form(&net)?, network_naive(&net)?));
                let mut net = init_network(&NetSpec::psilon_resnet(3, 4, 2, 2), &mut rng)?;
                randomize(&mut net, 1.0, &mut rng)?;
                worst = worst.max(rel(
                    network_closed_form(&net)?,
                    network_improved_grad(&net)?.0,
                ));
            }
            Ok((worst < 1e-10, format!("max relative gap {worst:.2e}")))
        },
    ));

    out.push(check("L1 sphere projection matches bisection", || {
        let mut worst: f64 = 0.0;
        for _ in 0..200 {
            let d = rng.random_range(1..=8);
            let w: Vec<f64> = (0..d).map(|_| 2.0 * standard_normal(&mut rng)).collect();
            let p = proj_l1_sphere(&w);
            let q = bisection_projection(&w);
            let gap = p
                .iter()
                .zip(&q)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(gap).max((l1_norm(&p) - 1.0).abs());
        }
        Ok((worst < 1e-8, format!("max deviation {worst:.2e}")))
    }));

    out.push(check("near-sparsity reference cases", || {
        let ok = near_sparsity(&[0.0; 4]) == 1.0
            && near_sparsity(&[1.0, 1.0, 0.0, 0.0]) == 0.5
            && near_sparsity(&[2.0; 4]) == 0.0;
        Ok((ok, "zero, bit and uniform vectors".into()))
    }));

    out.push(check("backward matches finite differences", || {
        let mut spec = NetSpec::psilon_resnet(3, 4, 2, 1);
        spec.activation = Activation::Crelu;
        let mut net = init_network(&spec, &mut rng)?;
        randomize(&mut net, 0.5, &mut rng)?;
        let x = random_matrix(6, 3, &mut rng);
        let y: Vec<f64> = (0..6).map(|_| standard_normal(&mut rng)).collect();
        let batch = Dataset::new(x, Targets::Regression(y), Task::Regression)?;
        let reg = Regularizer::PathNormImproved { lambda: 0.05 };
        let worst = gradient_check(&mut net, &batch, LossKind::Mse, &reg, 1e-6)?;
        Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
    }));

    out.push(check(
        "empirical estimate reaches the exact norm of a linear map",
        || {
            let w = random_matrix(3, 4, &mut rng);
            let mut net = init_network(&NetSpec::plain_mlp(4, 1, 0, 3), &mut rng)?;
            net.first.raw = w.clone();
            let exact = op_inf_one_norm(&w, 16).value;
            let est = empirical_lipschitz(&net, 5000, 1.0, &mut rng)?;
            Ok((
                est <= exact * (1.0 + 1e-9) && est >= 0.95 * exact,
                format!("estimate {est:.6} vs exact {exact:.6}"),
            ))
        },
    ));

    out
}

/// Largest relative error between the analytic gradient of the regularized
/// loss and central differences with step `h`, over every parameter.
pub fn gradient_check(
    net: &mut Network,
    batch: &Dataset,
    loss: LossKind,
    reg: &Regularizer,
    h: f64,
) -> Result<f64> {
    let lambda = reg.lambda();
    let base = net.params();
    let analytic = regularized_loss(net, batch, loss, reg)?.grad;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + h;
        net.set_params(&p)?;
        let up = regularized_loss(net, batch, loss, reg)?.total(lambda);
        p[i] = base[i] - h;
        net.set_params(&p)?;
        let down = regularized_loss(net, batch, loss, reg)?.total(lambda);
        let fd = (up - down) / (2.0 * h);
        let err = (fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-3);
        worst = worst.max(err);
    }
    net.set_params(&base)?;
    Ok(worst)
}

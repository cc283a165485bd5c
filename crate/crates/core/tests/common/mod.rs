//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use declip::losses::{
    clip_loss, infonce, mlm_loss, mvs_loss, nns_loss, simsiam_loss, LossTerms, LossWeights,
};
use declip::tensor::gradcheck::grad_check_many;
use declip::tensor::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

pub fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Literal two-direction InfoNCE: for every i, `-log(exp(s_ii/τ) / Σ_j exp(s_ij/τ))`
/// averaged over rows and over columns, then the two averaged.
pub fn infonce_loops(zi: &[Vec<f64>], zt: &[Vec<f64>], tau: f64) -> f64 {
    let n = zi.len();
    let mut l_img = 0.0;
    let mut l_txt = 0.0;
    for i in 0..n {
        let num = (dot(&zi[i], &zt[i]) / tau).exp();
        let mut den_i = 0.0;
        let mut den_t = 0.0;
        for j in 0..n {
            den_i += (dot(&zi[i], &zt[j]) / tau).exp();
            den_t += (dot(&zi[j], &zt[i]) / tau).exp();
        }
        l_img -= (num / den_i).ln();
        l_txt -= (num / den_t).ln();
    }
    (l_img / n as f64 + l_txt / n as f64) / 2.0
}

/// Cross-entropy averaged over the listed `(sample, position, target)` triples.
pub fn mlm_loops(logits: &[f64], l: usize, v: usize, targets: &[(usize, usize, usize)]) -> f64 {
    let mut total = 0.0;
    for &(s, p, t) in targets {
        let row = &logits[(s * l + p) * v..(s * l + p + 1) * v];
        let mut den = 0.0;
        for &x in row {
            den += x.exp();
        }
        total -= (row[t].exp() / den).ln();
    }
    total / targets.len() as f64
}

/// Index of the most similar row, earliest index on ties, and its similarity.
pub fn nearest_loops(bank: &[Vec<f32>], q: &[f32]) -> (usize, f32) {
    let mut best = (0, f32::NEG_INFINITY);
    for (j, b) in bank.iter().enumerate() {
        let mut s = 0.0f32;
        for k in 0..q.len() {
            s += q[k] * b[k];
        }
        if s > best.1 {
            best = (j, s);
        }
    }
    best
}

fn norm4<'g>(v: &[Var<'g, f64>]) -> declip::Result<Vec<Var<'g, f64>>> {
    (0..4).map(|k| v[k].l2_normalize_rows()).collect()
}

type LossFn = Box<dyn for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> declip::Result<Var<'g, f64>>>;

/// Finite-difference checks of every loss at one seed. Inputs are four raw
/// feature blocks and a log-scale; stop-gradient targets are held fixed so
/// the numeric side differentiates the same frozen function.
pub fn loss_grad_checks(seed: u64) -> Vec<(&'static str, f64)> {
    let mut r = rng(seed);
    let (n, d) = (3, 4);
    let mut inputs: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&[n, d], &mut r)).collect();
    inputs.push(Tensor::scalar(r.gen_range(0.0..2.0)));
    let z_t = uniform(&[n, d], &mut r);
    let z_aug_t = uniform(&[n, d], &mut r);
    let mut nn = uniform(&[n, d], &mut r);
    for i in 0..n {
        let norm = nn.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        for x in &mut nn.data_mut()[i * d..(i + 1) * d] {
            *x /= norm;
        }
    }
    let logits = uniform(&[2, 3, 5], &mut r);

    let (z1, za1) = (z_t.clone(), z_aug_t.clone());
    let (z2, za2, nn2) = (z_t, z_aug_t, nn.clone());
    let checks: Vec<(&'static str, LossFn)> = vec![
        (
            "infonce",
            Box::new(|_, v| {
                let z = norm4(v)?;
                infonce(z[0], z[1], v[4].exp())
            }),
        ),
        (
            "clip",
            Box::new(|_, v| {
                let z = norm4(v)?;
                clip_loss(z[2], z[3], v[4].exp())
            }),
        ),
        (
            "simsiam",
            Box::new(move |g, v| simsiam_loss(g.constant(z1.clone()), g.constant(za1.clone()), v[0], v[1])),
        ),
        (
            "mvs",
            Box::new(|_, v| {
                let z = norm4(v)?;
                mvs_loss(z[0], z[1], z[2], z[3], v[4].exp(), false)
            }),
        ),
        (
            "nns",
            Box::new(move |g, v| {
                let z = norm4(v)?;
                nns_loss(z[1], g.constant(nn.clone()), v[4].exp())
            }),
        ),
        (
            "declip",
            Box::new(move |g, v| {
                let z = norm4(v)?;
                let inv = v[4].exp();
                let terms = LossTerms {
                    clip: infonce(z[0], z[2], inv)?,
                    iss: Some(simsiam_loss(g.constant(z2.clone()), g.constant(za2.clone()), v[0], v[1])?),
                    tss: Some(v[2].mul(v[3])?.mean()),
                    mvs: Some(mvs_loss(z[0], z[1], z[2], z[3], inv, false)?),
                    nns: Some(nns_loss(z[1], g.constant(nn2.clone()), inv)?),
                };
                Ok(terms.combine(&LossWeights::default())?.0)
            }),
        ),
    ];
    let mut out: Vec<(&'static str, f64)> = checks
        .iter()
        .map(|(name, f)| (*name, grad_check_many(f, &inputs, 1e-5).expect("grad check runs")))
        .collect();
    let mlm = grad_check_many(
        |_, v| Ok(mlm_loss(v[0], &[vec![0, 2], vec![1]], &[vec![4, 0], vec![3]])?.loss),
        &[logits],
        1e-5,
    )
    .expect("grad check runs");
    out.push(("mlm", mlm));
    out
}

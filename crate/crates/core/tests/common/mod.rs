//! Shared test helpers: seeded tensors and nested-loop reference kernels.
#![allow(dead_code)]

use hmnas_core::numcore::{OpSpec, Tensor, BN_EPS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

pub fn op_params(spec: &OpSpec, seed: u64) -> Vec<Tensor> {
    spec.param_shapes()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = rand_tensor(&p.shape, seed * 100 + i as u64);
            if p.name.ends_with("gamma") {
                t.map(|v| 1.0 + 0.3 * v)
            } else {
                t
            }
        })
        .collect()
}

pub fn oracle_conv(x: &[f64], dims: (usize, usize, usize, usize), w: &[f64], cout: usize, k: usize, dil: usize, groups: usize) -> Vec<f64> {
    let (b, c, h, wd) = dims;
    let pad = dil * (k - 1) / 2;
    let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
    let cin_g = c / groups;
    let cout_g = cout / groups;
    let mut out = vec![0.0; b * cout * h * wd];
    for bi in 0..b {
        let mut padded = vec![0.0; c * ph * pw];
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..wd {
                    padded[(ci * ph + y + pad) * pw + xx + pad] = x[((bi * c + ci) * h + y) * wd + xx];
                }
            }
        }
        for co in 0..cout {
            let g = co / cout_g;
            for y in 0..h {
                for xx in 0..wd {
                    let mut s = 0.0;
                    for cl in 0..cin_g {
                        let ci = g * cin_g + cl;
                        for ky in 0..k {
                            for kx in 0..k {
                                s += w[((co * cin_g + cl) * k + ky) * k + kx] * padded[(ci * ph + y + ky * dil) * pw + xx + kx * dil];
                            }
                        }
                    }
                    out[((bi * cout + co) * h + y) * wd + xx] = s;
                }
            }
        }
    }
    out
}

pub fn oracle_bn(x: &[f64], dims: (usize, usize, usize, usize), gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let (b, c, h, w) = dims;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let vals: Vec<f64> = (0..b).flat_map(|bi| (0..h * w).map(move |i| (bi, i))).map(|(bi, i)| x[(bi * c + ch) * h * w + i]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        for bi in 0..b {
            for i in 0..h * w {
                let idx = (bi * c + ch) * h * w + i;
                out[idx] = gamma[ch] * (x[idx] - mean) / (var + BN_EPS).sqrt() + beta[ch];
            }
        }
    }
    out
}


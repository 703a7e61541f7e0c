//! Shared numeric oracles for the integration suites: quadrature, a
//! chi-square tail probability, finite-difference harnesses, and the
//! criterion checks reused by the acceptance gate.
#![allow(dead_code)]

use cebm_core::autodiff::{NodeId, Tape, TensorValue};
use cebm_core::expfam::{
    dual_b_star, exp_family_log_density, log_normalizer_b, mean_to_natural, natural_to_mean,
    DensityRoute, ExpFamily, GaussianNaturalParams,
};
use cebm_core::model::{
    efh_energy, joint_energy_from_parts, Activation, CebmModel, EncoderConfig, LayerSpec, Model,
};
use cebm_core::rng::Stream;
use cebm_core::trainer::pcd_gradient;
use rand::Rng;

// ---------------------------------------------------------------- quadrature

/// Composite Simpson rule with `n` (even) intervals.
pub fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    assert!(n >= 2 && n % 2 == 0);
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Simpson quadrature with interval doubling until two refinements agree.
pub fn quad(f: &dyn Fn(f64) -> f64, a: f64, b: f64) -> f64 {
    let mut n = 64;
    let mut prev = simpson(f, a, b, n);
    loop {
        n *= 2;
        let cur = simpson(f, a, b, n);
        if (cur - prev).abs() <= 1e-13 * (1.0 + cur.abs()) || n >= (1 << 20) {
            return cur;
        }
        prev = cur;
    }
}

/// Simpson weights over pre-sampled uniform-grid values (even interval count).
pub fn simpson_samples(values: &[f64], step: f64) -> f64 {
    let n = values.len() - 1;
    assert!(n >= 2 && n % 2 == 0);
    let mut acc = values[0] + values[n];
    for (i, &v) in values.iter().enumerate().take(n).skip(1) {
        acc += if i % 2 == 1 { 4.0 * v } else { 2.0 * v };
    }
    acc * step / 3.0
}

// ---------------------------------------------------------- chi-square tail

fn ln_gamma(x: f64) -> f64 {
    // Lanczos approximation, g = 7, 9 coefficients.
    const C: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        // Reflection for small arguments.
        return std::f64::consts::PI.ln()
            - (std::f64::consts::PI * x).sin().ln()
            - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    let t = x + 7.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

fn gamma_p_series(a: f64, x: f64) -> f64 {
    let mut term = 1.0 / a;
    let mut sum = term;
    for n in 1..500 {
        term *= x / (a + n as f64);
        sum += term;
        if term.abs() < sum.abs() * 3e-16 {
            break;
        }
    }
    sum * (-x + a * x.ln() - ln_gamma(a)).exp()
}

fn gamma_q_cf(a: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let mut b = x + 1.0 - a;
    let mut c = 1.0 / FPMIN;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..500 {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = b + an / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 3e-16 {
            break;
        }
    }
    (-x + a * x.ln() - ln_gamma(a)).exp() * h
}

/// P(X > x) for X ~ chi-square with `dof` degrees of freedom.
pub fn chi_square_tail(x: f64, dof: usize) -> f64 {
    assert!(dof >= 1 && x >= 0.0);
    if x == 0.0 {
        return 1.0;
    }
    let a = dof as f64 / 2.0;
    let half = x / 2.0;
    if half < a + 1.0 {
        1.0 - gamma_p_series(a, half)
    } else {
        gamma_q_cf(a, half)
    }
}

// ----------------------------------------------------- finite differences

pub type BuildFn = dyn Fn(&mut Tape, &[NodeId]) -> cebm_core::Result<NodeId>;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

fn graph_value(inputs: &[TensorValue], build: &BuildFn) -> f64 {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|v| tape.leaf(v.clone(), false).unwrap())
        .collect();
    let out = build(&mut tape, &ids).unwrap();
    tape.value(out).as_scalar().unwrap()
}

fn graph_grads(inputs: &[TensorValue], build: &BuildFn) -> Vec<TensorValue> {
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs
        .iter()
        .map(|v| tape.leaf(v.clone(), true).unwrap())
        .collect();
    let out = build(&mut tape, &ids).unwrap();
    let mut grads = tape.backward(out).unwrap();
    ids.iter().map(|&id| grads.take(id).unwrap()).collect()
}

/// Max relative error between tape gradients and central differences over
/// every element of every input.
pub fn graph_fd_max_rel(inputs: &[TensorValue], build: &BuildFn) -> f64 {
    let grads = graph_grads(inputs, build);
    let mut xs = inputs.to_vec();
    let mut worst = 0.0f64;
    for i in 0..xs.len() {
        for j in 0..xs[i].numel() {
            let orig = xs[i].data()[j];
            let h = 1e-5 * (1.0 + orig.abs());
            xs[i].data_mut()[j] = orig + h;
            let fp = graph_value(&xs, build);
            xs[i].data_mut()[j] = orig - h;
            let fm = graph_value(&xs, build);
            xs[i].data_mut()[j] = orig;
            worst = worst.max(rel_err(grads[i].data()[j], (fp - fm) / (2.0 * h)));
        }
    }
    worst
}

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<TensorValue>,
    pub build: Box<BuildFn>,
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut Stream) -> TensorValue {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    TensorValue::new(shape.to_vec(), data).unwrap()
}

/// Random values bounded away from zero, for kinked activations.
fn rand_tensor_off_kink(shape: &[usize], rng: &mut Stream) -> TensorValue {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = rng.gen_range(0.05..2.0);
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    TensorValue::new(shape.to_vec(), data).unwrap()
}

fn scalarized(w: TensorValue, inner: impl Fn(&mut Tape, &[NodeId]) -> cebm_core::Result<NodeId> + 'static) -> Box<BuildFn> {
    Box::new(move |tape, ids| {
        let out = inner(tape, ids)?;
        let wc = tape.constant(w.clone())?;
        let m = tape.mul(out, wc)?;
        tape.sum(m)
    })
}

/// One randomized instance of every differentiable primitive, each reduced
/// to a scalar through a fixed random linear functional.
pub fn op_cases(rng: &mut Stream) -> Vec<OpCase> {
    let mut cases = Vec::new();
    cases.push(OpCase {
        name: "matmul",
        inputs: vec![rand_tensor(&[3, 4], -1.5, 1.5, rng), rand_tensor(&[4, 2], -1.5, 1.5, rng)],
        build: scalarized(rand_tensor(&[3, 2], -1.0, 1.0, rng), |t, ids| {
            t.matmul(ids[0], ids[1])
        }),
    });
    cases.push(OpCase {
        name: "conv2d_s1p1",
        inputs: vec![
            rand_tensor(&[2, 2, 5, 5], -1.0, 1.0, rng),
            rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, rng),
        ],
        build: scalarized(rand_tensor(&[2, 3, 5, 5], -1.0, 1.0, rng), |t, ids| {
            t.conv2d(ids[0], ids[1], 1, 1)
        }),
    });
    cases.push(OpCase {
        name: "conv2d_s2p0",
        inputs: vec![
            rand_tensor(&[1, 2, 6, 6], -1.0, 1.0, rng),
            rand_tensor(&[2, 2, 3, 3], -1.0, 1.0, rng),
        ],
        build: scalarized(rand_tensor(&[1, 2, 2, 2], -1.0, 1.0, rng), |t, ids| {
            t.conv2d(ids[0], ids[1], 2, 0)
        }),
    });
    cases.push(OpCase {
        name: "add_same",
        inputs: vec![rand_tensor(&[2, 3], -1.0, 1.0, rng), rand_tensor(&[2, 3], -1.0, 1.0, rng)],
        build: scalarized(rand_tensor(&[2, 3], -1.0, 1.0, rng), |t, ids| {
            t.add(ids[0], ids[1])
        }),
    });
    cases.push(OpCase {
        name: "add_scalar",
        inputs: vec![rand_tensor(&[2, 3], -1.0, 1.0, rng), rand_tensor(&[1], -1.0, 1.0, rng)],
        build: scalarized(rand_tensor(&[2, 3], -1.0, 1.0, rng), |t, ids| {
            t.add(ids[0], ids[1])
        }),
    });
    cases.push(OpCase {
        name: "add_bias_feat",
        inputs: vec![rand_tensor(&[4, 3], -1.0, 1.0, rng), rand_tensor(&[3], -1.0, 1.0, rng)],
        build: scalarized(rand_tensor(&[4, 3], -1.0, 1.0, rng), |t, ids| {
            t.add(ids[0], ids[1])
        }),
    });
    cases.push(OpCase {
        name: "add_bias_chan",
        inputs: vec![
            rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, rng),
            rand_tensor(&[3], -1.0, 1.0, rng),
        ],
        build: scalarized(rand_tensor(&[2, 3, 4, 4], -1.0, 1.0, rng), |t, ids| {
            t.add(ids[0], ids[1])
        }),
    });
    cases.push(OpCase {
        name: "mul",
        inputs: vec![rand_tensor(&[2, 3], -1.0, 1.0, rng), rand_tensor(&[2, 3], -1.0, 1.0, rng)],
        build: scalarized(rand_tensor(&[2, 3], -1.0, 1.0, rng), |t, ids| {
            t.mul(ids[0], ids[1])
        }),
    });
    let c = rng.gen_range(-2.0..2.0);
    cases.push(OpCase {
        name: "scale",
        inputs: vec![rand_tensor(&[5], -1.0, 1.0, rng)],
        build: scalarized(rand_tensor(&[5], -1.0, 1.0, rng), move |t, ids| {
            t.scale(ids[0], c)
        }),
    });
    cases.push(OpCase {
        name: "negate",
        inputs: vec![rand_tensor(&[4], -1.0, 1.0, rng)],
        build: scalarized(rand_tensor(&[4], -1.0, 1.0, rng), |t, ids| t.negate(ids[0])),
    });
    cases.push(OpCase {
        name: "swish",
        inputs: vec![rand_tensor(&[6], -2.0, 2.0, rng)],
        build: scalarized(rand_tensor(&[6], -1.0, 1.0, rng), |t, ids| t.swish(ids[0])),
    });
    cases.push(OpCase {
        name: "relu",
        inputs: vec![rand_tensor_off_kink(&[6], rng)],
        build: scalarized(rand_tensor(&[6], -1.0, 1.0, rng), |t, ids| t.relu(ids[0])),
    });
    cases.push(OpCase {
        name: "leaky_relu",
        inputs: vec![rand_tensor_off_kink(&[6], rng)],
        build: scalarized(rand_tensor(&[6], -1.0, 1.0, rng), |t, ids| {
            t.leaky_relu(ids[0], 0.01)
        }),
    });
    cases.push(OpCase {
        name: "softplus",
        inputs: vec![rand_tensor(&[6], -3.0, 3.0, rng)],
        build: scalarized(rand_tensor(&[6], -1.0, 1.0, rng), |t, ids| t.softplus(ids[0])),
    });
    cases.push(OpCase {
        name: "reshape",
        inputs: vec![rand_tensor(&[2, 6], -1.0, 1.0, rng)],
        build: scalarized(rand_tensor(&[3, 4], -1.0, 1.0, rng), |t, ids| {
            t.reshape(ids[0], vec![3, 4])
        }),
    });
    cases.push(OpCase {
        name: "sum",
        inputs: vec![rand_tensor(&[7], -1.0, 1.0, rng)],
        build: Box::new(|t, ids| t.sum(ids[0])),
    });
    cases.push(OpCase {
        name: "logsumexp",
        inputs: vec![rand_tensor(&[4, 3], -2.0, 2.0, rng)],
        build: scalarized(rand_tensor(&[4], -1.0, 1.0, rng), |t, ids| {
            t.logsumexp(ids[0])
        }),
    });
    cases.push(OpCase {
        name: "gauss_log_normalizer_vec",
        inputs: vec![rand_tensor(&[3], -2.0, 2.0, rng), rand_tensor(&[3], -3.0, -0.2, rng)],
        build: Box::new(|t, ids| t.gauss_log_normalizer(ids[0], ids[1])),
    });
    cases.push(OpCase {
        name: "gauss_log_normalizer_batch",
        inputs: vec![
            rand_tensor(&[4, 3], -2.0, 2.0, rng),
            rand_tensor(&[4, 3], -3.0, -0.2, rng),
        ],
        build: scalarized(rand_tensor(&[4], -1.0, 1.0, rng), |t, ids| {
            t.gauss_log_normalizer(ids[0], ids[1])
        }),
    });
    cases.push(OpCase {
        name: "stack_last",
        inputs: vec![
            rand_tensor(&[4], -1.0, 1.0, rng),
            rand_tensor(&[4], -1.0, 1.0, rng),
            rand_tensor(&[4], -1.0, 1.0, rng),
        ],
        build: scalarized(rand_tensor(&[4, 3], -1.0, 1.0, rng), |t, ids| {
            let stacked = t.stack_last(ids)?;
            Ok(stacked)
        }),
    });
    cases
}

// ----------------------------------------------------------- model helpers

pub fn dense_enc(h: usize, w: usize, hidden: usize, latent: usize) -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        in_height: h,
        in_width: w,
        layers: vec![LayerSpec::Dense {
            out: hidden,
            act: Activation::Swish,
        }],
        latent_dim: latent,
    }
}

/// Conv + dense trunk over 6x6 inputs, small enough for dense FD sweeps.
pub fn conv_enc() -> EncoderConfig {
    EncoderConfig {
        in_channels: 1,
        in_height: 6,
        in_width: 6,
        layers: vec![
            LayerSpec::Conv {
                out_channels: 2,
                kernel: 3,
                stride: 1,
                padding: 0,
                act: Activation::Swish,
            },
            LayerSpec::Dense {
                out: 8,
                act: Activation::Swish,
            },
        ],
        latent_dim: 3,
    }
}

/// The PCD loss recomputed from plain energy evaluations, for differencing.
pub fn pcd_loss(model: &Model, data: &TensorValue, neg: &TensorValue, coef: f64) -> f64 {
    let ed = model.batch_energy(data).unwrap();
    let en = model.batch_energy(neg).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mean_sq = |v: &[f64]| v.iter().map(|&e| e * e).sum::<f64>() / v.len() as f64;
    mean(&ed) - mean(&en) + coef * (mean_sq(&ed) + mean_sq(&en))
}

/// Max relative error of PCD parameter gradients against central differences
/// at `probes` random parameter coordinates.
pub fn pcd_param_fd_max_rel(
    model: &mut Model,
    data: &TensorValue,
    neg: &TensorValue,
    coef: f64,
    probes: usize,
    rng: &mut Stream,
) -> f64 {
    let (grads, _) = pcd_gradient(model, data, neg, coef).unwrap();
    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let sizes: Vec<usize> = model.params().iter().map(|(_, v)| v.numel()).collect();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let pi = rng.gen_range(0..names.len());
        let j = rng.gen_range(0..sizes[pi]);
        fn slot<'m>(m: &'m mut Model, name: &str) -> &'m mut TensorValue {
            m.params_mut().get_mut(name).unwrap()
        }
        let orig = slot(model, &names[pi]).data()[j];
        let h = 1e-5 * (1.0 + orig.abs());
        slot(model, &names[pi]).data_mut()[j] = orig + h;
        let fp = pcd_loss(model, data, neg, coef);
        slot(model, &names[pi]).data_mut()[j] = orig - h;
        let fm = pcd_loss(model, data, neg, coef);
        slot(model, &names[pi]).data_mut()[j] = orig;
        worst = worst.max(rel_err(grads[pi].data()[j], (fp - fm) / (2.0 * h)));
    }
    worst
}

/// Max relative error of the summed-energy input gradient against central
/// differences at `probes` random input coordinates.
pub fn input_grad_fd_max_rel(
    model: &Model,
    x: &TensorValue,
    probes: usize,
    rng: &mut Stream,
) -> f64 {
    let (_, grad) = model.batch_energy_input_grad(x).unwrap();
    let sum_e = |x: &TensorValue| model.batch_energy(x).unwrap().iter().sum::<f64>();
    let mut xs = x.clone();
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let j = rng.gen_range(0..xs.numel());
        let orig = xs.data()[j];
        let h = 1e-5 * (1.0 + orig.abs());
        xs.data_mut()[j] = orig + h;
        let fp = sum_e(&xs);
        xs.data_mut()[j] = orig - h;
        let fm = sum_e(&xs);
        xs.data_mut()[j] = orig;
        worst = worst.max(rel_err(grad.data()[j], (fp - fm) / (2.0 * h)));
    }
    worst
}

// ------------------------------------------------- criterion oracle bodies

/// Max |log_normalizer_b - quadrature| over random natural parameters.
pub fn check_gauss_normalizer_quadrature(cases: usize, rng: &mut Stream) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dim = rng.gen_range(1..4usize);
        let lam1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let lam2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..-0.1)).collect();
        let p = GaussianNaturalParams::new(lam1.clone(), lam2.clone()).unwrap();
        let b = log_normalizer_b(&p);
        // Per-dimension: B_k = ln Int (2pi)^(-1/2) exp(l1 z + l2 z^2) dz.
        let mut b_quad = 0.0;
        for k in 0..dim {
            let (l1, l2) = (lam1[k], lam2[k]);
            let mean = -l1 / (2.0 * l2);
            let sigma = (-1.0 / (2.0 * l2)).sqrt();
            let f = move |z: f64| {
                (l1 * z + l2 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
            };
            b_quad += quad(&f, mean - 12.0 * sigma, mean + 12.0 * sigma).ln();
        }
        worst = worst.max((b - b_quad).abs());
    }
    worst
}

/// Max round-trip error of the Legendre maps in both directions.
pub fn check_legendre_round_trip(cases: usize, rng: &mut Stream) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dim = rng.gen_range(1..5usize);
        let lam1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let lam2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..-0.1)).collect();
        let p = GaussianNaturalParams::new(lam1, lam2).unwrap();
        let back = mean_to_natural(&natural_to_mean(&p));
        for (a, b) in p
            .lam1()
            .iter()
            .chain(p.lam2())
            .zip(back.lam1().iter().chain(back.lam2()))
        {
            worst = worst.max((a - b).abs() / a.abs().max(1.0));
        }
    }
    worst
}

/// Max |B(lam) + B*(mu) - <lam, mu>| at dual pairs.
pub fn check_fenchel_young(cases: usize, rng: &mut Stream) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dim = rng.gen_range(1..5usize);
        let lam1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let lam2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-5.0..-0.1)).collect();
        let p = GaussianNaturalParams::new(lam1, lam2).unwrap();
        let m = natural_to_mean(&p);
        let inner: f64 = p
            .lam1()
            .iter()
            .zip(m.m1())
            .chain(p.lam2().iter().zip(m.m2()))
            .map(|(&a, &b)| a * b)
            .sum();
        worst = worst.max((log_normalizer_b(&p) + dual_b_star(&m) - inner).abs());
    }
    worst
}

/// Max |canonical - Bregman| log density disagreement across families.
pub fn check_bregman_two_path(cases: usize, rng: &mut Stream) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dim = rng.gen_range(1..4usize);
        let lam1: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let lam2: Vec<f64> = (0..dim).map(|_| rng.gen_range(-4.0..-0.2)).collect();
        let z: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let fam = ExpFamily::Gaussian(GaussianNaturalParams::new(lam1, lam2).unwrap());
        let a = exp_family_log_density(&fam, &z, DensityRoute::Canonical).unwrap();
        let b = exp_family_log_density(&fam, &z, DensityRoute::Bregman).unwrap();
        worst = worst.max((a - b).abs());

        let natural: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let fam = ExpFamily::GaussianFixedVariance {
            natural,
            variance: rng.gen_range(0.2..3.0),
        };
        let a = exp_family_log_density(&fam, &x, DensityRoute::Canonical).unwrap();
        let b = exp_family_log_density(&fam, &x, DensityRoute::Bregman).unwrap();
        worst = worst.max((a - b).abs());

        let natural: Vec<f64> = (0..dim).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let x: Vec<f64> = (0..dim).map(|_| f64::from(rng.gen::<bool>())).collect();
        let fam = ExpFamily::Bernoulli { natural };
        let a = exp_family_log_density(&fam, &x, DensityRoute::Canonical).unwrap();
        let b = exp_family_log_density(&fam, &x, DensityRoute::Bregman).unwrap();
        worst = worst.max((a - b).abs());
    }
    worst
}

/// Grid conjugacy check on a K=1 single-pixel model: returns the max
/// absolute posterior-density error and the joint/marginal ratio spread.
pub fn grid_conjugacy_errors(seed: u64) -> (f64, f64) {
    let enc = EncoderConfig {
        in_channels: 1,
        in_height: 1,
        in_width: 1,
        layers: vec![
            LayerSpec::Dense {
                out: 6,
                act: Activation::Swish,
            },
            LayerSpec::Dense {
                out: 4,
                act: Activation::Swish,
            },
        ],
        latent_dim: 1,
    };
    let model = CebmModel::new(enc, 1.0, seed).unwrap();
    let wrapped = Model::Cebm(model.clone());
    let n_grid = 1600usize;
    let mut max_density_err = 0.0f64;
    let mut ratios = Vec::new();
    for ix in 0..21 {
        let xv = ix as f64 / 20.0;
        let x = TensorValue::new(vec![1, 1, 1, 1], vec![xv]).unwrap();
        let post = model.posteriors(&x).unwrap().remove(0);
        let mean = -post.lam1()[0] / (2.0 * post.lam2()[0]);
        let sigma = (-1.0 / (2.0 * post.lam2()[0])).sqrt();
        let (lo, hi) = (mean - 10.0 * sigma, mean + 10.0 * sigma);
        let step = (hi - lo) / n_grid as f64;
        let weights: Vec<f64> = (0..=n_grid)
            .map(|i| {
                let z = lo + i as f64 * step;
                (-model.energy_joint(&x, &[z]).unwrap()).exp()
            })
            .collect();
        let norm = simpson_samples(&weights, step);
        let fam = ExpFamily::Gaussian(post);
        for (i, &w) in weights.iter().enumerate() {
            let z = lo + i as f64 * step;
            let analytic =
                exp_family_log_density(&fam, &[z], DensityRoute::Canonical).unwrap().exp();
            max_density_err = max_density_err.max((w / norm - analytic).abs());
        }
        let marginal = wrapped.batch_energy(&x).unwrap()[0];
        ratios.push(norm / (-marginal).exp());
    }
    let mean_r: f64 = ratios.iter().sum::<f64>() / ratios.len() as f64;
    let spread = ratios.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    (max_density_err, spread / mean_r)
}

/// Max |generalized joint energy - efh_energy| over random linear-statistics
/// instances t(x) = [x^T Theta || <theta_x, x>], eta(z) = [z || 1].
pub fn check_efh_reduction(cases: usize, rng: &mut Stream) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let dx = rng.gen_range(1..6usize);
        let dz = rng.gen_range(1..6usize);
        let x: Vec<f64> = (0..dx).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let z: Vec<f64> = (0..dz).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tx: Vec<f64> = (0..dx).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let tz: Vec<f64> = (0..dz).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let theta = rand_tensor(&[dx, dz], -2.0, 2.0, rng);
        let direct = efh_energy(&x, &z, &tx, &tz, &theta).unwrap();

        let mut t: Vec<f64> = (0..dz)
            .map(|j| (0..dx).map(|i| x[i] * theta.data()[i * dz + j]).sum())
            .collect();
        t.push(x.iter().zip(&tx).map(|(&a, &b)| a * b).sum());
        let mut eta = z.clone();
        eta.push(1.0);
        let bias_energy = -z.iter().zip(&tz).map(|(&a, &b)| a * b).sum::<f64>();
        let reduced = joint_energy_from_parts(&t, &eta, bias_energy).unwrap();
        worst = worst.max((direct - reduced).abs());
    }
    worst
}

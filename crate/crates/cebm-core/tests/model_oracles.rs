//! Brute-force oracles for the energy definitions: grid conjugacy on a
//! single-pixel domain, the harmonium reduction, posterior well-formedness
//! at scale, and single-component mixture consistency.

mod common;

use cebm_core::autodiff::TensorValue;
use cebm_core::expfam::{exp_family_log_density, DensityRoute, ExpFamily};
use cebm_core::model::{CebmModel, GmmCebmModel, Model};
use cebm_core::rng::{step_stream, stream, Purpose};
use common::{check_efh_reduction, dense_enc, grid_conjugacy_errors};
use rand::Rng;

#[test]
fn grid_conjugacy_posterior_and_marginal() {
    for seed in [7u64, 19] {
        let (density_err, ratio_spread) = grid_conjugacy_errors(seed);
        assert!(
            density_err < 1e-3,
            "seed {seed}: posterior density error {density_err}"
        );
        assert!(
            ratio_spread < 1e-6,
            "seed {seed}: joint/marginal ratio spread {ratio_spread}"
        );
    }
}

#[test]
fn efh_reduction_on_random_instances() {
    let mut rng = stream(21, Purpose::Eval);
    let worst = check_efh_reduction(1000, &mut rng);
    assert!(worst < 1e-12, "worst reduction gap {worst}");
}

#[test]
fn posteriors_are_well_formed_over_many_inputs() {
    let model = CebmModel::new(dense_enc(4, 4, 8, 3), 1.0, 23).unwrap();
    let mut rng = stream(23, Purpose::Eval);
    let mut checked = 0usize;
    for _ in 0..40 {
        let n = 250usize;
        let data: Vec<f64> = (0..n * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = TensorValue::new(vec![n, 1, 4, 4], data).unwrap();
        for post in model.posteriors(&x).unwrap() {
            for (&l1, &l2) in post.lam1().iter().zip(post.lam2()) {
                assert!(l1.is_finite() && l2.is_finite());
                assert!(l2 < 0.0, "lam2 must stay negative, got {l2}");
                let var = -1.0 / (2.0 * l2);
                // The squashed second statistic only sharpens the bias.
                assert!(var > 0.0 && var < 1.0, "variance {var} out of range");
            }
            checked += 1;
        }
    }
    assert_eq!(checked, 10_000);
}

/// Scan a few ulps around softplus^{-1}(1/2) for a raw value that the model
/// squashes to exactly -1/2, making the single-component mixture bitwise
/// identical to the plain model.
fn exact_half_raw(template: &GmmCebmModel) -> Option<f64> {
    let analytic = (0.5f64.exp() - 1.0).ln();
    let mut model = Model::Gmm(template.clone());
    for delta in -200i64..=200 {
        let candidate = f64::from_bits((analytic.to_bits() as i64 + delta) as u64);
        let raw2 = model.params_mut().get_mut("gmm0_raw_lam2").unwrap();
        for v in raw2.data_mut() {
            *v = candidate;
        }
        let inner = match &model {
            Model::Gmm(g) => g,
            _ => unreachable!(),
        };
        let comps = inner.component_params().unwrap();
        if comps[0].lam2().iter().all(|&l2| l2 == -0.5) {
            return Some(candidate);
        }
    }
    None
}

#[test]
fn single_component_mixture_matches_plain_model() {
    let enc = dense_enc(4, 4, 8, 3);
    let plain = Model::Cebm(CebmModel::new(enc.clone(), 1.0, 31).unwrap());
    let gmm_raw = GmmCebmModel::new(enc, 1, 1.0, 31).unwrap();
    let raw2 = exact_half_raw(&gmm_raw);
    let mut gmm = Model::Gmm(gmm_raw);

    // Same seed gives the same trunk and head draws; only the mixture's own
    // parameters differ, and those are what the scan pins down.
    for (name, value) in plain.params().iter() {
        assert_eq!(
            value.data(),
            gmm.params().get(name).unwrap().data(),
            "trunk/head init should match for {name}"
        );
    }
    {
        let p = gmm.params_mut().get_mut("gmm0_raw_lam1").unwrap();
        for v in p.data_mut() {
            *v = 0.0;
        }
    }
    if let Some(r) = raw2 {
        let p = gmm.params_mut().get_mut("gmm0_raw_lam2").unwrap();
        for v in p.data_mut() {
            *v = r;
        }
    }

    let mut rng = stream(31, Purpose::Eval);
    let data: Vec<f64> = (0..5 * 16).map(|_| rng.gen_range(0.0..1.0)).collect();
    let x = TensorValue::new(vec![5, 1, 4, 4], data).unwrap();
    let e_plain = plain.batch_energy(&x).unwrap();
    let e_gmm = gmm.batch_energy(&x).unwrap();
    for (a, b) in e_plain.iter().zip(&e_gmm) {
        assert!((a - b).abs() < 1e-12, "energies differ: {a} vs {b}");
        if raw2.is_some() {
            assert_eq!(a, b, "exact raw2 found, equality must be bitwise");
        }
    }
    assert!(raw2.is_some(), "no raw2 within 200 ulps squashes to exactly -1/2");
}

#[test]
fn joint_marginal_posterior_identity_across_models() {
    // E_joint(x,z) + log p(z|x) - E_marg(x) is the constant log h(z), so the
    // residual cannot depend on x, z, or the parameters.
    for seed in 0..20u64 {
        let model = CebmModel::new(dense_enc(4, 4, 7, 2), 1.0, seed).unwrap();
        let wrapped = Model::Cebm(model.clone());
        let mut rng = step_stream(seed, Purpose::Eval, 3);
        let expected = -(2.0 / 2.0) * (2.0 * std::f64::consts::PI).ln();
        for _ in 0..5 {
            let data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.0..1.0)).collect();
            let x = TensorValue::new(vec![1, 1, 4, 4], data).unwrap();
            let z: Vec<f64> = (0..2).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let joint = model.energy_joint(&x, &z).unwrap();
            let marg = wrapped.batch_energy(&x).unwrap()[0];
            let post = model.posteriors(&x).unwrap().remove(0);
            let logp =
                exp_family_log_density(&ExpFamily::Gaussian(post), &z, DensityRoute::Canonical)
                    .unwrap();
            let residual = joint + logp - marg;
            assert!(
                (residual - expected).abs() < 1e-8,
                "seed {seed}: residual {residual} vs {expected}"
            );
        }
    }
}

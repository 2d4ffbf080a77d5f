use circe::diagnostics::{fisher_information, nec};
use circe::hypothesis::{aic, ks_normality_test, wald_test};
use circe::*;
use proptest::prelude::*;

/// Random dataset with entries of H in [0.5, 2.5) and labels in 1..=q; every
/// label appears at least twice.
fn dataset_strategy(max_p: usize, max_q: usize) -> impl Strategy<Value = Dataset> {
    (1..=max_p, 1..=max_q, 0usize..20).prop_flat_map(|(p, q, extra)| {
        let n = 2 * q + p + extra;
        (
            prop::collection::vec(prop::collection::vec(0.5f64..2.5, p), n),
            prop::collection::vec(-3.0f64..3.0, n),
            prop::collection::vec(0.0f64..0.5, n),
            prop::collection::vec(1..=q as u32, n - 2 * q),
            Just(q),
        )
            .prop_map(|(h, y, r, tail, q)| {
                let mut groups: Vec<u32> = (1..=q as u32).flat_map(|g| [g, g]).collect();
                groups.extend(tail);
                Dataset::new(y, h, r, groups).expect("strategy builds full-rank data")
            })
    })
}

fn params_for(d: &Dataset, seed: &[f64]) -> ModelParams {
    let mut k = 0;
    let mut next = || {
        k += 1;
        seed[k % seed.len()]
    };
    let m = (0..d.p()).map(|_| next() - 1.0).collect();
    let sigma2 = (0..d.q()).map(|_| (0..d.p()).map(|_| next()).collect()).collect();
    ModelParams::new(m, sigma2).unwrap()
}

fn permuted(d: &Dataset, perm: &[usize]) -> Dataset {
    let y = perm.iter().map(|&i| d.y()[i]).collect();
    let h = perm.iter().map(|&i| d.row(i).to_vec()).collect();
    let r = perm.iter().map(|&i| d.r()[i]).collect();
    let labels = d.labels();
    let g = perm.iter().map(|&i| labels[i]).collect();
    Dataset::new(y, h, r, g).unwrap()
}

fn quick_cfg() -> EcmeConfig {
    EcmeConfig {
        n_random_starts: 2,
        ..EcmeConfig::default()
    }
}

/// The stopping tolerances are absolute, so comparing fits at different
/// scales needs them far below the comparison tolerance.
fn tight_cfg() -> EcmeConfig {
    EcmeConfig {
        max_iterations: 200_000,
        rel_loglik_tol: 1e-15,
        param_tol: 1e-13,
        ..quick_cfg()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shared_variances_match_pooled_loglik(d in dataset_strategy(3, 4), vals in prop::collection::vec(0.05f64..2.0, 8)) {
        let pooled_theta = params_for(&d.pooled(), &vals);
        let shared = ModelParams::new(
            pooled_theta.m().to_vec(),
            vec![pooled_theta.sigma2()[0].clone(); d.q()],
        ).unwrap();
        let a = log_likelihood(&d, &shared).unwrap();
        let b = log_likelihood(&d.pooled(), &pooled_theta).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn loglik_is_permutation_invariant(
        d in dataset_strategy(3, 3),
        vals in prop::collection::vec(0.05f64..2.0, 8),
        shuffle in any::<u64>(),
    ) {
        let theta = params_for(&d, &vals);
        let mut perm: Vec<usize> = (0..d.n()).collect();
        let mut state = shuffle;
        for i in (1..perm.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let pd = permuted(&d, &perm);
        let a = log_likelihood(&d, &theta).unwrap();
        let b = log_likelihood(&pd, &theta).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn predictive_variance_is_monotone(
        d in dataset_strategy(3, 3),
        vals in prop::collection::vec(0.05f64..2.0, 8),
        bump in 0.0f64..1.0,
        which in any::<prop::sample::Index>(),
    ) {
        let theta = params_for(&d, &vals);
        let s = which.index(d.q());
        let j = which.index(d.p());
        let mut sigma2 = theta.sigma2().to_vec();
        sigma2[s][j] += bump;
        let bigger = ModelParams::new(theta.m().to_vec(), sigma2).unwrap();
        let mut raw = d.to_raw();
        raw.r = Some(raw.r.unwrap().iter().map(|r| r + bump).collect());
        let noisier = validate_dataset(raw).unwrap();
        for i in 0..d.n() {
            let base = predictive_moments(&d, &theta, i).unwrap().var;
            prop_assert!(predictive_moments(&d, &bigger, i).unwrap().var >= base);
            prop_assert!(predictive_moments(&noisier, &theta, i).unwrap().var >= base);
        }
    }

    #[test]
    fn ecme_steps_never_decrease_loglik(d in dataset_strategy(3, 3), vals in prop::collection::vec(0.0f64..2.0, 8)) {
        let mut theta = params_for(&d, &vals);
        let mut ll = log_likelihood_floored(&d, &theta).unwrap();
        for _ in 0..30 {
            theta = ecme_step_multigroup(&d, &theta, true).unwrap().params;
            let next = log_likelihood_floored(&d, &theta).unwrap();
            prop_assert!(next - ll >= -1e-10, "loglik dropped by {}", ll - next);
            ll = next;
        }
    }

    #[test]
    fn fisher_blocks_are_symmetric_psd(d in dataset_strategy(3, 3), vals in prop::collection::vec(0.05f64..2.0, 8)) {
        let theta = params_for(&d, &vals);
        let f = fisher_information(&d, &theta).unwrap();
        for block in std::iter::once(&f.mean_block).chain(&f.var_blocks) {
            prop_assert!((block - block.transpose()).abs().max() <= 1e-10);
            let eig = block.clone().symmetric_eigen();
            let scale = block.abs().max();
            prop_assert!(eig.eigenvalues.iter().all(|&l| l >= -1e-10 * scale));
        }
    }

    #[test]
    fn mean_block_is_additive_over_groups(d in dataset_strategy(2, 3), vals in prop::collection::vec(0.05f64..2.0, 8)) {
        let theta = params_for(&d, &vals);
        let total = fisher_information(&d, &theta).unwrap().mean_block;
        let mut summed = total.clone() * 0.0;
        for s in 0..d.q() {
            let rows = d.members(s);
            let sub = Dataset::new(
                rows.iter().map(|&i| d.y()[i]).collect(),
                rows.iter().map(|&i| d.row(i).to_vec()).collect(),
                rows.iter().map(|&i| d.r()[i]).collect(),
                vec![1; rows.len()],
            );
            // A single group may be rank deficient on its own; its block is
            // still well defined, so fall back to the direct sum.
            match sub {
                Ok(sub) => {
                    let theta_s = ModelParams::new(theta.m().to_vec(), vec![theta.sigma2()[s].clone()]).unwrap();
                    summed += fisher_information(&sub, &theta_s).unwrap().mean_block;
                }
                Err(_) => {
                    for &i in rows {
                        let v = predictive_moments(&d, &theta, i).unwrap().var;
                        let h = d.row(i);
                        for j in 0..d.p() {
                            for k in 0..d.p() {
                                summed[(j, k)] += h[j] * h[k] / v;
                            }
                        }
                    }
                }
            }
        }
        prop_assert!((total - &summed).abs().max() <= 1e-12 * summed.abs().max());
    }

    #[test]
    fn nec_scales_with_replication(d in dataset_strategy(3, 3), vals in prop::collection::vec(0.05f64..2.0, 8), k in 2usize..5) {
        let theta = params_for(&d, &vals);
        let mut raw = d.to_raw();
        let (y, h, r, g) = (raw.y.clone(), raw.h.clone(), raw.r.clone().unwrap(), raw.groups.clone().unwrap());
        for _ in 1..k {
            raw.y.extend(&y);
            raw.h.extend(h.iter().cloned());
            raw.r.as_mut().unwrap().extend(&r);
            raw.groups.as_mut().unwrap().extend(&g);
        }
        let big = validate_dataset(raw).unwrap();
        let base = nec(&fisher_information(&d, &theta).unwrap(), &theta);
        let scaled = nec(&fisher_information(&big, &theta).unwrap(), &theta);
        for (a, b) in base.iter().flatten().zip(scaled.iter().flatten()) {
            prop_assert!(b < a);
            prop_assert!((b * (k as f64).sqrt() - a).abs() <= 1e-10 * a);
        }
    }

    #[test]
    fn wald_is_symmetric(d in dataset_strategy(2, 3), vals in prop::collection::vec(0.05f64..2.0, 8)) {
        prop_assume!(d.q() >= 2);
        let theta = params_for(&d, &vals);
        let f = fisher_information(&d, &theta).unwrap();
        for j in 0..d.p() {
            let ab = wald_test(&f, &theta, 0, 1, j).unwrap();
            let ba = wald_test(&f, &theta, 1, 0, j).unwrap();
            prop_assert_eq!(ab.statistic.to_bits(), ba.statistic.to_bits());
            prop_assert!(ab.p_value >= 0.0 && ab.p_value <= 1.0);
            prop_assert!((ab.p_value - chi2_tail_by_quadrature(ab.statistic)).abs() < 1e-8);
        }
    }

    #[test]
    fn aic_decreases_with_loglik(ll in -1e4f64..1e4, gain in 1e-6f64..10.0, k in 1usize..20) {
        prop_assert!(aic(ll + gain, k) < aic(ll, k));
    }

    #[test]
    fn ks_statistic_matches_ecdf_sup(e in prop::collection::vec(-3.0f64..3.0, 3..60), other in prop::collection::vec(-3.0f64..3.0, 3..60)) {
        let base = ks_normality_test(&e).unwrap();
        let mut rev = e.clone();
        rev.reverse();
        prop_assert_eq!(ks_normality_test(&rev).unwrap().statistic, base.statistic);
        let n = e.len() as f64;
        prop_assert!(base.statistic >= 0.5 / n - 1e-15 && base.statistic <= 1.0);

        // Sup of |F_n - Φ| over both one-sided limits at every jump.
        let phi = |x: f64| 0.5 * libm::erfc(-x / std::f64::consts::SQRT_2);
        let sup = e
            .iter()
            .map(|&x| {
                let below = e.iter().filter(|&&v| v < x).count() as f64 / n;
                let upto = e.iter().filter(|&&v| v <= x).count() as f64 / n;
                (upto - phi(x)).abs().max((phi(x) - below).abs())
            })
            .fold(0.0, f64::max);
        prop_assert!((base.statistic - sup).abs() < 1e-12);

        // Same n: a larger statistic never has a larger p-value.
        let mut second = other.clone();
        second.resize(e.len(), 0.25);
        let alt = ks_normality_test(&second).unwrap();
        if alt.statistic > base.statistic {
            prop_assert!(alt.p_value <= base.p_value);
        }
    }
}

/// χ²(1) tail `2(1 − Φ(√w))` by Simpson quadrature of the normal density.
fn chi2_tail_by_quadrature(w: f64) -> f64 {
    let a = w.sqrt();
    let b = 12.0f64.max(a + 1.0);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut s = pdf(a) + pdf(b);
    for i in 1..n {
        let x = a + i as f64 * h;
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * pdf(x);
    }
    2.0 * s * h / 3.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn fit_is_permutation_invariant(d in dataset_strategy(2, 3), shuffle in any::<u64>()) {
        let mut perm: Vec<usize> = (0..d.n()).collect();
        let mut state = shuffle;
        for i in (1..perm.len()).rev() {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (state >> 33) as usize % (i + 1));
        }
        let pd = permuted(&d, &perm);
        let a = fit_multigroup(&d, &quick_cfg()).unwrap();
        let b = fit_multigroup(&pd, &quick_cfg()).unwrap();
        prop_assume!(a.converged && b.converged && a.clamped.iter().flatten().all(|c| !c));
        for (x, y) in a.params.m().iter().zip(b.params.m()) {
            prop_assert!((x - y).abs() < 1e-10, "m {x} vs {y}");
        }
        for (x, y) in a.params.sigma2().iter().flatten().zip(b.params.sigma2().iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-10, "sigma2 {x} vs {y}");
        }
    }

    #[test]
    fn fit_scale_equivariance(d in dataset_strategy(2, 2), c in prop::sample::select(vec![0.25, 0.5, 2.0, 3.7, 10.0])) {
        let base = fit_multigroup(&d, &tight_cfg()).unwrap();
        prop_assume!(base.converged && base.clamped.iter().flatten().all(|f| !f));

        // y, h scaled together (R by c²): estimates unchanged.
        let mut raw = d.to_raw();
        raw.y.iter_mut().for_each(|v| *v *= c);
        raw.h.iter_mut().flatten().for_each(|v| *v *= c);
        raw.r.as_mut().unwrap().iter_mut().for_each(|v| *v *= c * c);
        let both = fit_multigroup(&validate_dataset(raw).unwrap(), &tight_cfg()).unwrap();
        for (x, y) in base.params.m().iter().zip(both.params.m()) {
            prop_assert!((x - y).abs() <= 1e-8 * x.abs().max(1.0));
        }
        for (x, y) in base.params.sigma2().iter().flatten().zip(both.params.sigma2().iter().flatten()) {
            prop_assert!((x - y).abs() <= 1e-8 * x.abs().max(1.0));
        }

        // y scaled alone (R by c²): m by c, σ² by c².
        let mut raw = d.to_raw();
        raw.y.iter_mut().for_each(|v| *v *= c);
        raw.r.as_mut().unwrap().iter_mut().for_each(|v| *v *= c * c);
        let ys = fit_multigroup(&validate_dataset(raw).unwrap(), &tight_cfg()).unwrap();
        for (x, y) in base.params.m().iter().zip(ys.params.m()) {
            prop_assert!((c * x - y).abs() <= 1e-8 * (c * x).abs().max(1.0));
        }
        for (x, y) in base.params.sigma2().iter().flatten().zip(ys.params.sigma2().iter().flatten()) {
            prop_assert!((c * c * x - y).abs() <= 1e-8 * (c * c * x).abs().max(1.0));
        }
    }

    #[test]
    fn single_group_fit_matches_regular(d in dataset_strategy(3, 3)) {
        let mut raw = d.to_raw();
        raw.groups = Some(vec![7; d.n()]);
        let one = validate_dataset(raw).unwrap();
        let a = fit_multigroup(&one, &quick_cfg()).unwrap();
        let b = fit_regular(&d, &quick_cfg()).unwrap();
        for (x, y) in a.params.m().iter().zip(b.params.m()) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
        for (x, y) in a.params.sigma2()[0].iter().zip(&b.params.sigma2()[0]) {
            prop_assert!((x - y).abs() <= 1e-10);
        }
    }
}

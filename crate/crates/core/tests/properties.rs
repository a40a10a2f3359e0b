mod common;

use cdcm::error::CdcmError;
use cdcm::group::{corr_cholesky, group_marginal_loglik, GroupParams, SubjectRecord};
use cdcm::identifiability::{check_design, recover_block, recover_from_trajectory};
use cdcm::inference::{nuts_sample, CdcmPosterior, GaussianTarget, SamplerConfig};
use cdcm::linalg::{affine_step, mat_exp, mat_log_real, w_antideriv, Matrix, Vector};
use cdcm::model::{
    block_partition, convolve, hrf_kernel, log_likelihood, neural_trajectory, Block, Hypothesis,
};
use cdcm::simulator::{benchmark_design, simple_model_truth, simulate, SimulationSpec};
use common::{flatten, gradient_error, identifiable_case, max_rel_err, permute_columns, permute_rois, random_case};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

fn small_matrix(max_d: usize, bound: f64) -> impl Strategy<Value = Matrix> {
    (1..=max_d).prop_flat_map(move |d| {
        prop::collection::vec(-bound..bound, d * d).prop_map(move |v| Matrix::from_row_slice(d, d, &v))
    })
}

fn close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    (a - b).amax() <= tol * b.amax().max(1.0)
}

/// `P diag(λ) P⁻¹` with well-separated real eigenvalues in `[-1, 0.5]`.
fn real_spectrum_matrix(d: usize, seed: u64) -> Matrix {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambdas: Vec<f64> = (0..d).map(|i| -1.0 + 1.5 * (i as f64 + rng.random_range(0.2..0.8)) / d as f64).collect();
    let p = Matrix::identity(d, d) + Matrix::from_fn(d, d, |_, _| rng.random_range(-0.3..0.3));
    let pinv = p.clone().try_inverse().unwrap();
    p * Matrix::from_diagonal(&Vector::from_vec(lambdas)) * pinv
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn exp_semigroup(a in small_matrix(4, 0.5), s in 0.0..5.0f64, t in 0.0..5.0f64) {
        let lhs = mat_exp(&(&a * (s + t))).unwrap();
        let rhs = mat_exp(&(&a * s)).unwrap() * mat_exp(&(&a * t)).unwrap();
        prop_assert!(close(&lhs, &rhs, 1e-9));
    }

    #[test]
    fn antiderivative_identity(a in small_matrix(4, 0.5), t in 0.0..5.0f64, singular in any::<bool>()) {
        let mut a = a;
        if singular {
            let col = a.column(0).clone_owned();
            a.set_column(a.ncols() - 1, &col);
            if a.ncols() == 1 {
                a[(0, 0)] = 0.0;
            }
        }
        let d = a.nrows();
        let lhs = Matrix::identity(d, d) + &a * w_antideriv(t, &a).unwrap();
        prop_assert!(close(&lhs, &mat_exp(&(&a * t)).unwrap(), 1e-9));
    }

    #[test]
    fn affine_step_composes(
        a in small_matrix(4, 0.5),
        c in prop::collection::vec(-1.0..1.0f64, 4),
        z in prop::collection::vec(-1.0..1.0f64, 4),
        t1 in 0.0..3.0f64,
        t2 in 0.0..3.0f64,
    ) {
        let d = a.nrows();
        let c = Vector::from_column_slice(&c[..d]);
        let z = Vector::from_column_slice(&z[..d]);
        let two = affine_step(&affine_step(&z, &a, &c, t1).unwrap(), &a, &c, t2).unwrap();
        let one = affine_step(&z, &a, &c, t1 + t2).unwrap();
        prop_assert!((&two - &one).amax() <= 1e-9 * one.amax().max(1.0));
    }

    #[test]
    fn affine_step_fixed_point(a in small_matrix(4, 0.5), z in prop::collection::vec(-1.0..1.0f64, 4), t in 0.0..5.0f64) {
        let d = a.nrows();
        let z = Vector::from_column_slice(&z[..d]);
        let c = -(&a * &z);
        let out = affine_step(&z, &a, &c, t).unwrap();
        prop_assert!((&out - &z).amax() <= 1e-9 * out.amax().max(1.0));
    }

    #[test]
    fn exp_log_round_trip(d in 1usize..=4, seed in any::<u64>()) {
        let a = real_spectrum_matrix(d, seed);
        let back = mat_log_real(&mat_exp(&a).unwrap()).unwrap();
        prop_assert!(close(&back, &a, 1e-8));
    }

    #[test]
    fn recover_block_is_exact(d in 1usize..=4, seed in any::<u64>(), r_idx in 0usize..3) {
        use rand::Rng;
        let r = common::TRS[r_idx];
        let a = real_spectrum_matrix(d, seed) * (0.6 / r);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let c = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        let mut v = Matrix::zeros(d + 2, d);
        let mut z = Vector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
        for j in 0..d + 2 {
            v.set_row(j, &z.transpose());
            z = affine_step(&z, &a, &c, r).unwrap();
        }
        let (a_hat, c_hat) = recover_block(&v, r).unwrap();
        prop_assert!((&a_hat - &a).amax() <= 1e-8, "A error {}", (&a_hat - &a).amax());
        prop_assert!((&c_hat - &c).amax() <= 1e-8, "c error {}", (&c_hat - &c).amax());
    }

    #[test]
    fn diagonal_of_a_is_negative(nu in prop::collection::vec(-30.0..30.0f64, 1..6)) {
        let h = Hypothesis::empty(nu.len(), 1);
        let mut p = cdcm::model::ParamSet::zeros(&h);
        p.nu_diag_a = nu;
        let a = p.a_matrix(&h);
        prop_assert!(a.diagonal().iter().all(|v| *v < 0.0));
    }

    #[test]
    fn convolve_is_linear(
        n in 1usize..60,
        alpha in -3.0..3.0f64,
        seed in any::<u64>(),
    ) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z1 = Matrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let z2 = Matrix::from_fn(n, 2, |_, _| rng.random_range(-1.0..1.0));
        let h = hrf_kernel(2.0, n).unwrap();
        let lhs = convolve(&(&z1 * alpha + &z2), &h).unwrap();
        let rhs = convolve(&z1, &h).unwrap() * alpha + convolve(&z2, &h).unwrap();
        prop_assert!((&lhs - &rhs).amax() <= 1e-12 * rhs.amax().max(1.0));
    }

    #[test]
    fn clamp_never_increases_noise(snr in 0.2..5.0f64, seed in any::<u64>()) {
        let (hypothesis, truth) = simple_model_truth();
        let spec = SimulationSpec { truth, hypothesis, design: benchmark_design(), snr, seed, range_clamp: true };
        let out = simulate(&spec).unwrap();
        prop_assert!(out.clamp_factor <= 1.0 && out.clamp_factor >= 0.0);
        prop_assert!(out.y.max() - out.y.min() <= cdcm::simulator::MAX_RANGE + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn block_refinement_is_a_no_op(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, p, design) = random_case(&mut rng);
        let z = neural_trajectory(&p, &h, &design).unwrap();
        let mut split = design.clone();
        let k = split.blocks.iter().position(|b| b.len >= 2).unwrap();
        let b = split.blocks[k].clone();
        let first = b.len / 2;
        split.blocks[k] = Block { start: b.start, len: first, stimulus: b.stimulus.clone() };
        split.blocks.insert(k + 1, Block { start: b.start + first, len: b.len - first, stimulus: b.stimulus });
        let z_split = neural_trajectory(&p, &h, &split).unwrap();
        prop_assert!((&z - &z_split).amax() <= 1e-10);

        // The same block integrated as one long step.
        let (a_t, c_t) = cdcm::model::assemble_block_system(&p, &h, &design.blocks[k].stimulus).unwrap();
        let s = design.block_state_index(&design.blocks[k]);
        let len = design.blocks[k].len.min(design.n - 1 - s);
        let z0 = z.row(s).transpose();
        let jump = affine_step(&z0, &a_t, &c_t, len as f64 * design.r).unwrap();
        prop_assert!((jump - z.row(s + len).transpose()).amax() <= 1e-10 * z.amax().max(1.0));
    }

    #[test]
    fn likelihood_is_roi_permutation_invariant(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, mut p, design) = random_case(&mut rng);
        for l in 0..h.d {
            p.beta[l] = rng.random_range(-0.5..0.5);
            p.sigma[l] = rng.random_range(0.2..2.0);
        }
        let y = Matrix::from_fn(design.n, h.d, |_, _| rng.random_range(-1.0..1.0));
        let mut perm: Vec<usize> = (0..h.d).collect();
        perm.shuffle(&mut rng);
        let (hp, pp) = permute_rois(&h, &p, &perm);
        let yp = permute_columns(&y, &perm);
        let a = log_likelihood(&p, &h, &design, &y).unwrap();
        let b = log_likelihood(&pp, &hp, &design, &yp).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0), "{a} vs {b}");

        let post = CdcmPosterior::new(h, design.clone(), y).unwrap();
        let post_p = CdcmPosterior::new(hp, design, yp).unwrap();
        let lp = post.log_posterior(&p.to_unconstrained());
        let lpp = post_p.log_posterior(&pp.to_unconstrained());
        prop_assert!((lp - lpp).abs() <= 1e-9 * lp.abs().max(1.0));
    }

    #[test]
    fn recovery_follows_stimulus_relabelling(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, p, design) = identifiable_case(&mut rng);
        let m = h.m;
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let u: Vec<Vec<f64>> = design
            .u
            .iter()
            .map(|row| {
                let mut out = vec![0.0; m];
                for k in 0..m {
                    out[perm[k]] = row[k];
                }
                out
            })
            .collect();
        let relabelled = block_partition(u, design.r).unwrap();
        let z = neural_trajectory(&p, &h, &design).unwrap();
        // Block selection depends on stimulus order, so the two runs may use
        // different blocks; only the conditioning guard may refuse either.
        let (rec, rec_p) = (recover_from_trajectory(&z, &design), recover_from_trajectory(&z, &relabelled));
        let refused = |r: &cdcm::Result<_>| matches!(r, Err(CdcmError::SingularDataMatrix(_)));
        prop_assume!(!refused(&rec) && !refused(&rec_p));
        let (rec, rec_p) = (rec.unwrap(), rec_p.unwrap());
        prop_assert!((&rec.global.a - &rec_p.global.a).amax() <= 1e-8);
        for k in 0..m {
            prop_assert!((&rec.global.b[k] - &rec_p.global.b[perm[k]]).amax() <= 1e-8);
            prop_assert!((rec.global.c.column(k) - rec_p.global.c.column(perm[k])).amax() <= 1e-8);
        }
    }

    #[test]
    fn noiseless_recovery_on_random_identifiable_models(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, p, design) = identifiable_case(&mut rng);
        let z = neural_trajectory(&p, &h, &design).unwrap();
        let rec = recover_from_trajectory(&z, &design);
        prop_assume!(!matches!(rec, Err(CdcmError::SingularDataMatrix(_))));
        let rec = rec.unwrap();
        let mut est = flatten(&[&rec.global.a, &rec.global.c]);
        let mut truth = flatten(&[&p.a_matrix(&h), &p.c_matrix(&h)]);
        for (b_est, b_true) in rec.global.b.iter().zip(p.b_matrices(&h)) {
            est.extend(b_est.iter());
            truth.extend(b_true.iter());
        }
        est.extend(rec.s_star.iter());
        truth.extend(&p.s_star);
        prop_assert!(max_rel_err(&est, &truth) <= 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, mut p, design) = random_case(&mut rng);
        let spec = SimulationSpec { truth: p.clone(), hypothesis: h.clone(), design: design.clone(), snr: 2.0, seed, range_clamp: false };
        let Ok(sim) = simulate(&spec) else { return Ok(()); };
        p.sigma.iter_mut().for_each(|s| *s = 0.7);
        let post = CdcmPosterior::new(h, design, sim.y).unwrap();
        let x = p.to_unconstrained();
        let g = post.grad_log_posterior(&x).unwrap();
        let err = gradient_error(|v| post.log_posterior(v), &x, &g);
        prop_assert!(err <= 1e-5, "relative error {err}");
    }

    #[test]
    fn subject_order_is_irrelevant(seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (p, q, k) = (3, 2, 8);
        let mut records: Vec<SubjectRecord> = (0..k)
            .map(|_| {
                let theta: Vec<f64> = (0..p).map(|_| rng.random_range(-1.0..1.0)).collect();
                let s = Matrix::identity(p, p) * rng.random_range(0.01..0.2);
                let b: Vec<f64> = (0..q).map(|_| rng.random_range(-1.0..1.0)).collect();
                SubjectRecord::new(theta, s, b).unwrap()
            })
            .collect();
        let x: Vec<f64> = (0..cdcm::group::unconstrained_dim(p, q)).map(|_| rng.random_range(-0.5..0.5)).collect();
        let g = GroupParams::from_unconstrained(p, q, &x).unwrap();
        let before = group_marginal_loglik(&records, &g).unwrap();
        records.shuffle(&mut rng);
        let after = group_marginal_loglik(&records, &g).unwrap();
        prop_assert!((before - after).abs() <= 1e-10 * before.abs().max(1.0));
    }

    #[test]
    fn lkj_transform_gives_valid_correlations(p in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = (0..p * (p - 1) / 2).map(|_| rng.random_range(-4.0..4.0)).collect();
        let (l, _) = corr_cholesky(p, &y);
        let omega = &l * l.transpose();
        for i in 0..p {
            prop_assert!((omega[(i, i)] - 1.0).abs() < 1e-12);
        }
        let eig = omega.symmetric_eigen().eigenvalues;
        prop_assert!(eig.iter().all(|v| *v > -1e-12));
    }
}

#[test]
fn benchmark_design_supports_up_to_nine_rois() {
    let design = benchmark_design();
    for d in 1..=9 {
        let rep = check_design(&design, d);
        assert!(rep.a1.pass && rep.a2.pass, "d = {d}");
    }
}

#[test]
fn simulation_is_mean_unbiased() {
    let (hypothesis, truth) = simple_model_truth();
    let design = benchmark_design();
    let reps = 1000;
    let base = simulate(&SimulationSpec {
        truth: truth.clone(),
        hypothesis: hypothesis.clone(),
        design: design.clone(),
        snr: 1.68,
        seed: 0,
        range_clamp: false,
    })
    .unwrap();
    let target = {
        let mut m = base.mu.clone();
        for l in 0..hypothesis.d {
            m.column_mut(l).add_scalar_mut(truth.beta[l]);
        }
        m
    };
    let mut sum = Matrix::zeros(design.n, hypothesis.d);
    for seed in 0..reps {
        let out = simulate(&SimulationSpec {
            truth: truth.clone(),
            hypothesis: hypothesis.clone(),
            design: design.clone(),
            snr: 1.68,
            seed,
            range_clamp: false,
        })
        .unwrap();
        sum += out.y;
    }
    let mean = sum / reps as f64;
    // Per-entry z-scores; with 300 entries a handful beyond 3 are expected.
    let mut beyond_three = 0;
    let mut worst: f64 = 0.0;
    for j in 0..design.n {
        for l in 0..hypothesis.d {
            let se = base.noise_sd[l] / (reps as f64).sqrt();
            let z = (mean[(j, l)] - target[(j, l)]).abs() / se;
            worst = worst.max(z);
            if z > 3.0 {
                beyond_three += 1;
            }
        }
    }
    let entries = design.n * hypothesis.d;
    assert!(beyond_three as f64 <= 0.01 * entries as f64, "{beyond_three} of {entries} beyond 3 SE");
    assert!(worst < 4.5, "worst z-score {worst}");
}

#[test]
fn nuts_preserves_a_gaussian_target() {
    let cov = Matrix::from_row_slice(3, 3, &[1.0, 0.5, 0.0, 0.5, 2.0, -0.3, 0.0, -0.3, 0.5]);
    let target = GaussianTarget::new(Vector::from_vec(vec![1.0, -2.0, 0.5]), cov.clone()).unwrap();
    let cfg = SamplerConfig {
        warmup: 1000,
        num_samples: Some(20000),
        seed: 11,
        ..SamplerConfig::default()
    };
    let pd = nuts_sample(&target, &cfg, &[vec![0.0; 3]], vec!["x".into(), "y".into(), "z".into()]).unwrap();
    let n = pd.len() as f64;
    let critical = 1.628 / n.sqrt();
    for (j, mean) in [1.0, -2.0, 0.5].iter().enumerate() {
        let dist = Normal::new(*mean, cov[(j, j)].sqrt()).unwrap();
        let mut x: Vec<f64> = pd.draws.column(j).iter().copied().collect();
        x.sort_by(f64::total_cmp);
        let ks = x
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let f = dist.cdf(*v);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < critical, "margin {j}: KS {ks} vs {critical}");
    }
}

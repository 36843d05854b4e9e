use nalgebra::{DMatrix, DVector};
use prs_bridge::bridge::{tau_from_heritability, BridgeHyper, TauMode};
use prs_bridge::gibbs::{
    direct_sample_beta, posterior_precision, run_chain, sample_beta_block, CgSettings, GibbsConfig, GibbsSampler,
};
use prs_bridge::ld::{estimate_ld_block, standardize_genotypes, LdBlock};
use prs_bridge::summary::SummaryStats;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn ids(p: usize, prefix: &str) -> Vec<String> {
    (0..p).map(|j| format!("{prefix}{j}")).collect()
}

fn ar1(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |i, j| rho.powi((i as i32 - j as i32).abs()))
}

fn sample_moments(draws: &[DVector<f64>]) -> (DVector<f64>, DMatrix<f64>) {
    let p = draws[0].len();
    let n = draws.len() as f64;
    let mean = draws.iter().fold(DVector::zeros(p), |acc, d| acc + d) / n;
    let mut cov = DMatrix::zeros(p, p);
    for d in draws {
        let c = d - &mean;
        cov += &c * c.transpose();
    }
    (mean, cov / (n - 1.0))
}

#[test]
fn rank_deficient_block_matches_dense_moments() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let raw = DMatrix::from_fn(3, 4, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    });
    let block = estimate_ld_block(0, ids(4, "s"), &standardize_genotypes(&raw).unwrap()).unwrap();
    assert_eq!(block.rank(), 2);
    let b = block.project(&DVector::from_vec(vec![0.02, -0.01, 0.03, 0.0])).unwrap();
    let (tau, lambda, n) = (0.01, [1.0, 0.5, 2.0, 1.5], 2000);

    let draws = 20_000;
    let mut cg_draws = Vec::with_capacity(draws);
    let mut dense_draws = Vec::with_capacity(draws);
    for _ in 0..draws {
        cg_draws.push(sample_beta_block(&block, &b, tau, &lambda, n, CgSettings::default(), &mut rng).unwrap().beta);
        dense_draws.push(direct_sample_beta(&block, &b, tau, &lambda, n, &mut rng).unwrap());
    }
    let cov = posterior_precision(&block, tau, &lambda, n).try_inverse().unwrap();
    let mean = &cov * (&b * n as f64);
    for sample in [&cg_draws, &dense_draws] {
        let (m, c) = sample_moments(sample);
        for i in 0..4 {
            let se = (cov[(i, i)] / draws as f64).sqrt();
            assert!((m[i] - mean[i]).abs() < 5.0 * se, "mean {i}: {} vs {}", m[i], mean[i]);
            for j in 0..4 {
                let se = ((cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)) / draws as f64).sqrt();
                assert!((c[(i, j)] - cov[(i, j)]).abs() < 5.0 * se, "cov ({i},{j})");
            }
        }
    }
}

#[test]
fn block_diagonal_block_equals_two_blocks() {
    let (d1, d2) = (ar1(4, 0.7), ar1(4, -0.4));
    let mut joint = DMatrix::zeros(8, 8);
    joint.view_mut((0, 0), (4, 4)).copy_from(&d1);
    joint.view_mut((4, 4), (4, 4)).copy_from(&d2);
    let b1 = LdBlock::from_correlation(0, ids(4, "a"), &d1, 100).unwrap();
    let b2 = LdBlock::from_correlation(1, ids(4, "b"), &d2, 100).unwrap();
    let mut all_ids = ids(4, "a");
    all_ids.extend(ids(4, "b"));
    let bj = LdBlock::from_correlation(0, all_ids, &joint, 100).unwrap();

    let tau = 0.02;
    let lambda = [1.0, 2.0, 0.5, 1.0, 0.3, 1.0, 4.0, 1.0];
    let beta_sum = DVector::from_vec(vec![0.05, 0.03, -0.02, 0.0, 0.01, -0.04, 0.02, 0.0]);
    let n = 5000;

    let phi = posterior_precision(&bj, tau, &lambda, n);
    let phi1 = posterior_precision(&b1, tau, &lambda[..4], n);
    let phi2 = posterior_precision(&b2, tau, &lambda[4..], n);
    let tol = 1e-9 * phi.amax();
    assert!((phi.view((0, 0), (4, 4)) - &phi1).amax() < tol);
    assert!((phi.view((4, 4), (4, 4)) - &phi2).amax() < tol);
    assert!(phi.view((0, 4), (4, 4)).amax() < tol);

    let m1 = phi1.clone().try_inverse().unwrap() * beta_sum.rows(0, 4) * n as f64;
    let m2 = phi2.clone().try_inverse().unwrap() * beta_sum.rows(4, 4) * n as f64;
    let cov = phi.try_inverse().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws: Vec<_> = (0..10_000)
        .map(|_| sample_beta_block(&bj, &beta_sum, tau, &lambda, n, CgSettings::default(), &mut rng).unwrap().beta)
        .collect();
    let (m, _) = sample_moments(&draws);
    for j in 0..8 {
        let expected = if j < 4 { m1[j] } else { m2[j - 4] };
        let se = (cov[(j, j)] / draws.len() as f64).sqrt();
        assert!((m[j] - expected).abs() < 5.0 * se, "coordinate {j}");
    }
}

fn sparse_problem() -> (Vec<LdBlock>, SummaryStats, DVector<f64>) {
    let p = 30;
    let d = ar1(p, 0.5);
    let block = LdBlock::from_correlation(0, ids(p, "rs"), &d, 1000).unwrap();
    let mut truth = DVector::zeros(p);
    truth[3] = 0.08;
    truth[17] = -0.06;
    let n = 20_000u64;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = block.sqrt_ld_mul(&DVector::from_fn(p, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        z
    })) / (n as f64).sqrt();
    let beta_sum = &d * &truth + noise;
    let stats = SummaryStats::new(ids(p, "rs"), beta_sum, n).unwrap();
    (vec![block], stats, truth)
}

#[test]
fn chain_recovers_sparse_effects() {
    let (blocks, stats, truth) = sparse_problem();
    let cfg = GibbsConfig { n_iter: 600, burn_in: 200, seed: 2, ..GibbsConfig::default() };
    let out = run_chain(&blocks, &stats, BridgeHyper::with_alpha(0.25).unwrap(), cfg).unwrap();
    assert_eq!(out.n_samples, 400);
    let err = (&out.mean_beta - &truth).norm();
    let marginal_err = (&stats.beta_sum - &truth).norm();
    assert!(err < 0.5 * marginal_err, "posterior error {err} vs marginal {marginal_err}");
    assert!((out.mean_beta[3] - 0.08).abs() < 0.02);
    assert!((out.mean_beta[17] + 0.06).abs() < 0.02);
}

#[test]
fn result_does_not_depend_on_thread_count() {
    let (mut blocks, stats, _) = sparse_problem();
    // split into three blocks so the parallel maps have work to schedule
    let d = blocks.remove(0).ld_matrix();
    let mut offset = 0;
    for (k, size) in [10, 12, 8].into_iter().enumerate() {
        let sub = d.view((offset, offset), (size, size)).clone_owned();
        let sub_ids = stats.snp_ids[offset..offset + size].to_vec();
        blocks.push(LdBlock::from_correlation(k as u32, sub_ids, &sub, 1000).unwrap());
        offset += size;
    }
    let fit = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let cfg = GibbsConfig { n_iter: 50, burn_in: 10, seed: 9, ..GibbsConfig::default() };
        pool.install(|| run_chain(&blocks, &stats, BridgeHyper::with_alpha(0.5).unwrap(), cfg).unwrap())
    };
    let (a, b) = (fit(1), fit(4));
    assert_eq!(a.mean_beta, b.mean_beta);
    assert_eq!(a.diagnostics, b.diagnostics);
}

#[test]
fn fixed_tau_mode_keeps_tau() {
    let (blocks, stats, _) = sparse_problem();
    let hyper = BridgeHyper::new(0.5, 1.0, 1e-4, TauMode::FixedFromHeritability { h2: 0.3, m_snps: 30 }).unwrap();
    let expected = tau_from_heritability(0.3, 30, 0.5).unwrap();
    let mut sampler =
        GibbsSampler::new(&blocks, &stats, hyper, GibbsConfig { n_iter: 20, burn_in: 5, ..GibbsConfig::default() })
            .unwrap();
    for _ in 0..20 {
        assert_eq!(sampler.step().unwrap().tau, expected);
    }
}

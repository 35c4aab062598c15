//! Sequence contrastive loss (SCL) and the per-frame contrastive baseline.
//!
//! For every frame `i` of one view, the softmax over cosine similarities to
//! all frames of the other view (temperature `tau`) is matched by
//! cross-entropy to a row-normalized Gaussian prior over raw timestamp
//! distance (variance `sigma2`). The loss of a view is the mean over its
//! frames; SCL sums both directions.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SclConfig {
    pub sigma2: f64,
    pub tau: f64,
}

impl Default for SclConfig {
    fn default() -> Self {
        Self { sigma2: 10.0, tau: 0.1 }
    }
}

impl SclConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::config(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        validate_tau(self.tau)
    }
}

fn validate_tau(tau: f64) -> Result<()> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::config(format!("tau must be > 0, got {tau}")));
    }
    Ok(())
}

/// Row-stochastic prior `w_ij ∝ exp(-(s1_i - s2_j)^2 / (2 sigma2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianWeightMatrix(pub Array2<f64>);

/// Cosine similarities between the rows of two embedding matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix(pub Array2<f64>);

impl SimilarityMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }
}

/// Loss value with gradients on both embedding matrices.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub grad_z1: Array2<f64>,
    pub grad_z2: Array2<f64>,
}

pub fn gaussian_weights(s1: &[f64], s2: &[f64], sigma2: f64) -> Result<GaussianWeightMatrix> {
    if !(sigma2.is_finite() && sigma2 > 0.0) {
        return Err(Error::config(format!("sigma2 must be > 0, got {sigma2}")));
    }
    let mut w = Array2::from_shape_fn((s1.len(), s2.len()), |(i, j)| {
        let d = s1[i] - s2[j];
        -d * d / (2.0 * sigma2)
    });
    // Subtracting the row maximum keeps the nearest timestamp at exp(0) = 1,
    // so the normalizer never underflows.
    for mut row in w.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    Ok(GaussianWeightMatrix(w))
}

fn row_norms(z: &Array2<f64>, which: &str) -> Result<Array1<f64>> {
    let norms = z.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(i) = norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::numeric(format!("{which} row {i} has zero or non-finite norm")));
    }
    Ok(norms)
}

fn normalized(z: &Array2<f64>, norms: &Array1<f64>) -> Array2<f64> {
    z / &norms.view().insert_axis(Axis(1))
}

pub fn cosine_similarities(z1: &Array2<f64>, z2: &Array2<f64>) -> Result<SimilarityMatrix> {
    if z1.ncols() != z2.ncols() {
        return Err(Error::shape(format!(
            "embedding widths differ: {} vs {}",
            z1.ncols(),
            z2.ncols()
        )));
    }
    let n1 = row_norms(z1, "Z1")?;
    let n2 = row_norms(z2, "Z2")?;
    Ok(SimilarityMatrix(normalized(z1, &n1).dot(&normalized(z2, &n2).t())))
}

/// Row-wise log-softmax of `m / tau`, stabilized by the row maximum.
fn log_softmax_rows(m: &Array2<f64>, tau: f64) -> Array2<f64> {
    let mut out = m / tau;
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Gradient of `z / |z|` pulled back to `z`, row by row.
fn normalize_backward(zn: &Array2<f64>, norms: &Array1<f64>, d_zn: &Array2<f64>) -> Array2<f64> {
    let proj = (zn * d_zn).sum_axis(Axis(1));
    (d_zn - &(zn * &proj.insert_axis(Axis(1)))) / &norms.view().insert_axis(Axis(1))
}

struct Normalized {
    zn1: Array2<f64>,
    zn2: Array2<f64>,
    n1: Array1<f64>,
    n2: Array1<f64>,
    sim: Array2<f64>,
}

fn prepare(z1: &Array2<f64>, z2: &Array2<f64>) -> Result<Normalized> {
    if z1.ncols() != z2.ncols() {
        return Err(Error::shape(format!(
            "embedding widths differ: {} vs {}",
            z1.ncols(),
            z2.ncols()
        )));
    }
    let n1 = row_norms(z1, "Z1")?;
    let n2 = row_norms(z2, "Z2")?;
    let zn1 = normalized(z1, &n1);
    let zn2 = normalized(z2, &n2);
    let sim = zn1.dot(&zn2.t());
    Ok(Normalized { zn1, zn2, n1, n2, sim })
}

/// Chain rule from d(loss)/d(similarity) back to both embedding matrices.
fn similarity_backward(nz: &Normalized, d_sim: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let d_zn1 = d_sim.dot(&nz.zn2);
    let d_zn2 = d_sim.t().dot(&nz.zn1);
    (
        normalize_backward(&nz.zn1, &nz.n1, &d_zn1),
        normalize_backward(&nz.zn2, &nz.n2, &d_zn2),
    )
}

fn check_lengths(z1: &Array2<f64>, z2: &Array2<f64>, s1: &[f64], s2: &[f64]) -> Result<()> {
    if z1.nrows() != s1.len() || z2.nrows() != s2.len() {
        return Err(Error::shape(format!(
            "embeddings have {}/{} rows but {}/{} timestamps",
            z1.nrows(),
            z2.nrows(),
            s1.len(),
            s2.len()
        )));
    }
    if z1.nrows() == 0 || z2.nrows() == 0 {
        return Err(Error::shape("empty view"));
    }
    Ok(())
}

/// Per-frame losses `L_i` of view 1 against view 2.
pub fn scl_frame_losses(z1: &Array2<f64>, z2: &Array2<f64>, s1: &[f64], s2: &[f64], cfg: &SclConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_lengths(z1, z2, s1, s2)?;
    let w = gaussian_weights(s1, s2, cfg.sigma2)?.0;
    let logp = log_softmax_rows(&cosine_similarities(z1, z2)?.0, cfg.tau);
    Ok((&w * &logp).sum_axis(Axis(1)).iter().map(|v| -v).collect())
}

/// One direction of SCL: mean over frames of view 1 with exact gradients.
pub fn scl_one_direction(z1: &Array2<f64>, z2: &Array2<f64>, s1: &[f64], s2: &[f64], cfg: &SclConfig) -> Result<LossOutput> {
    cfg.validate()?;
    check_lengths(z1, z2, s1, s2)?;
    let w = gaussian_weights(s1, s2, cfg.sigma2)?.0;
    let nz = prepare(z1, z2)?;
    let logp = log_softmax_rows(&nz.sim, cfg.tau);
    let t = z1.nrows() as f64;
    let loss = -(&w * &logp).sum() / t;

    // Rows of w sum to one, so d L / d logits = (p - w) / T.
    let d_sim = (logp.mapv(f64::exp) - &w) / (t * cfg.tau);
    let (grad_z1, grad_z2) = similarity_backward(&nz, &d_sim);
    Ok(LossOutput { loss, grad_z1, grad_z2 })
}

/// `L = L(1 -> 2) + L(2 -> 1)`.
pub fn scl_loss(z1: &Array2<f64>, z2: &Array2<f64>, s1: &[f64], s2: &[f64], cfg: &SclConfig) -> Result<LossOutput> {
    let a = scl_one_direction(z1, z2, s1, s2, cfg)?;
    let b = scl_one_direction(z2, z1, s2, s1, cfg)?;
    Ok(LossOutput {
        loss: a.loss + b.loss,
        grad_z1: a.grad_z1 + b.grad_z2,
        grad_z2: a.grad_z2 + b.grad_z1,
    })
}

/// Index pairs `(i, j)` with `s1[i] == s2[j]`; both inputs strictly increasing.
pub fn timestamp_correspondence(s1: &[usize], s2: &[usize]) -> Vec<(usize, usize)> {
    let (mut i, mut j) = (0, 0);
    let mut out = Vec::new();
    while i < s1.len() && j < s2.len() {
        match s1[i].cmp(&s2[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                out.push((i, j));
                i += 1;
                j += 1;
            }
        }
    }
    out
}

/// Per-frame contrastive loss whose only positive is the frame of the other
/// view sharing the same raw timestamp; every other frame of that view is a
/// negative. Averaged over matches and summed over both directions.
pub fn baseline_contrastive_loss(
    z1: &Array2<f64>,
    z2: &Array2<f64>,
    correspondence: &[(usize, usize)],
    tau: f64,
) -> Result<LossOutput> {
    validate_tau(tau)?;
    if correspondence.is_empty() {
        return Err(Error::invalid("views share no timestamps; baseline loss needs at least one match"));
    }
    if let Some(&(i, j)) = correspondence.iter().find(|&&(i, j)| i >= z1.nrows() || j >= z2.nrows()) {
        return Err(Error::shape(format!("correspondence ({i}, {j}) is out of range")));
    }
    let nz = prepare(z1, z2)?;
    let logp_rows = log_softmax_rows(&nz.sim, tau);
    let logp_cols = log_softmax_rows(&nz.sim.t().to_owned(), tau);
    let n = correspondence.len() as f64;

    let mut loss = 0.0;
    let mut d_sim = Array2::<f64>::zeros(nz.sim.dim());
    for &(i, j) in correspondence {
        loss -= logp_rows[[i, j]] + logp_cols[[j, i]];
        // view 1 -> view 2: softmax over row i
        for (k, lp) in logp_rows.row(i).iter().enumerate() {
            d_sim[[i, k]] += lp.exp() / (n * tau);
        }
        // view 2 -> view 1: softmax over column j
        for (k, lp) in logp_cols.row(j).iter().enumerate() {
            d_sim[[k, j]] += lp.exp() / (n * tau);
        }
        d_sim[[i, j]] -= 2.0 / (n * tau);
    }
    let (grad_z1, grad_z2) = similarity_backward(&nz, &d_sim);
    Ok(LossOutput {
        loss: loss / n,
        grad_z1,
        grad_z2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};
    use rand_distr::{Distribution, StandardNormal};

    fn randn(shape: (usize, usize), rng: &mut Rng) -> Array2<f64> {
        Array2::from_shape_fn(shape, |_| StandardNormal.sample(rng))
    }

    fn sorted_stamps(n: usize, rng: &mut Rng) -> Vec<f64> {
        let mut v: Vec<usize> = rand::seq::index::sample(rng, 4 * n, n).into_vec();
        v.sort_unstable();
        v.into_iter().map(|x| x as f64).collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn fd_check<F: Fn(&Array2<f64>, &Array2<f64>) -> f64>(f: F, z1: &Array2<f64>, z2: &Array2<f64>, g1: &Array2<f64>, g2: &Array2<f64>, h: f64) -> f64 {
        let mut worst: f64 = 0.0;
        for which in 0..2 {
            let (base, g) = if which == 0 { (z1, g1) } else { (z2, g2) };
            for idx in 0..base.len() {
                let (r, c) = (idx / base.ncols(), idx % base.ncols());
                let mut up = base.clone();
                up[[r, c]] += h;
                let mut down = base.clone();
                down[[r, c]] -= h;
                let (fu, fd) = if which == 0 {
                    (f(&up, z2), f(&down, z2))
                } else {
                    (f(z1, &up), f(z1, &down))
                };
                worst = worst.max(rel_err(g[[r, c]], (fu - fd) / (2.0 * h)));
            }
        }
        worst
    }

    #[test]
    fn single_timestamp_weight_is_one() {
        let w = gaussian_weights(&[3.0], &[17.0], 10.0).unwrap();
        assert_eq!(w.0, Array2::from_elem((1, 1), 1.0));
    }

    #[test]
    fn three_point_row_matches_direct_evaluation() {
        let w = gaussian_weights(&[0.0], &[-1.0, 0.0, 1.0], 10.0).unwrap().0;
        // exp(-0.05) / (1 + 2 exp(-0.05)) and 1 / (1 + 2 exp(-0.05))
        assert!((w[[0, 0]] - 0.327_732_269_082_119).abs() < 1e-12);
        assert!((w[[0, 1]] - 0.344_535_461_835_762).abs() < 1e-12);
        assert_eq!(w[[0, 0]], w[[0, 2]]);
    }

    #[test]
    fn cosine_examples() {
        let eye = Array2::<f64>::eye(4);
        assert_eq!(cosine_similarities(&eye, &eye).unwrap().0, eye);
        let z = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let m = cosine_similarities(&z, &(-&z)).unwrap().0;
        assert!((m[[0, 0]] + 1.0).abs() < 1e-15);

        let mut rng = Rng::seed_from_u64(0);
        let a = randn((4, 3), &mut rng);
        let b = randn((5, 3), &mut rng);
        let mut a7 = a.clone();
        a7.row_mut(2).mapv_inplace(|v| v * 7.0);
        let (m1, m2) = (cosine_similarities(&a, &b).unwrap().0, cosine_similarities(&a7, &b).unwrap().0);
        for (x, y) in m1.iter().zip(m2.iter()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_row_is_reported() {
        let mut z = Array2::ones((3, 2));
        z.row_mut(1).fill(0.0);
        match cosine_similarities(&Array2::ones((2, 2)), &z) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("Z2 row 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uniform_similarity_gives_log_t() {
        let t = 6;
        let z = Array2::from_elem((t, 4), 0.3);
        let mut rng = Rng::seed_from_u64(1);
        let s1 = sorted_stamps(t, &mut rng);
        let s2 = sorted_stamps(t, &mut rng);
        for tau in [0.1, 1.0] {
            let cfg = SclConfig { sigma2: 10.0, tau };
            let one = scl_one_direction(&z, &z, &s1, &s2, &cfg).unwrap().loss;
            assert!((one - (t as f64).ln()).abs() < 1e-12);
            let both = scl_loss(&z, &z, &s1, &s2, &cfg).unwrap().loss;
            assert!((both - 2.0 * (t as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn swapping_views_leaves_loss_unchanged() {
        let mut rng = Rng::seed_from_u64(2);
        let (z1, z2) = (randn((5, 4), &mut rng), randn((5, 4), &mut rng));
        let (s1, s2) = (sorted_stamps(5, &mut rng), sorted_stamps(5, &mut rng));
        let cfg = SclConfig::default();
        let a = scl_loss(&z1, &z2, &s1, &s2, &cfg).unwrap().loss;
        let b = scl_loss(&z2, &z1, &s2, &s1, &cfg).unwrap().loss;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn one_direction_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(3);
        let (z1, z2) = (randn((6, 8), &mut rng), randn((6, 8), &mut rng));
        let (s1, s2) = (sorted_stamps(6, &mut rng), sorted_stamps(6, &mut rng));
        let cfg = SclConfig::default();
        let out = scl_one_direction(&z1, &z2, &s1, &s2, &cfg).unwrap();
        let f = |a: &Array2<f64>, b: &Array2<f64>| scl_one_direction(a, b, &s1, &s2, &cfg).unwrap().loss;
        let err = fd_check(f, &z1, &z2, &out.grad_z1, &out.grad_z2, 1e-6);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn full_loss_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(4);
        let (z1, z2) = (randn((7, 5), &mut rng), randn((7, 5), &mut rng));
        let (s1, s2) = (sorted_stamps(7, &mut rng), sorted_stamps(7, &mut rng));
        let cfg = SclConfig { sigma2: 3.0, tau: 0.3 };
        let out = scl_loss(&z1, &z2, &s1, &s2, &cfg).unwrap();
        let f = |a: &Array2<f64>, b: &Array2<f64>| scl_loss(a, b, &s1, &s2, &cfg).unwrap().loss;
        let err = fd_check(f, &z1, &z2, &out.grad_z1, &out.grad_z2, 1e-6);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn baseline_gradient_matches_finite_differences() {
        let mut rng = Rng::seed_from_u64(5);
        let (z1, z2) = (randn((6, 4), &mut rng), randn((7, 4), &mut rng));
        let corr = vec![(0, 1), (2, 2), (5, 6)];
        let out = baseline_contrastive_loss(&z1, &z2, &corr, 0.2).unwrap();
        let f = |a: &Array2<f64>, b: &Array2<f64>| baseline_contrastive_loss(a, b, &corr, 0.2).unwrap().loss;
        let err = fd_check(f, &z1, &z2, &out.grad_z1, &out.grad_z2, 1e-6);
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn baseline_closed_form_on_orthonormal_views() {
        let t = 5;
        let z = Array2::<f64>::eye(t);
        let corr: Vec<_> = (0..t).map(|i| (i, i)).collect();
        let out = baseline_contrastive_loss(&z, &z, &corr, 0.1).unwrap();
        let per_frame = -(10f64.exp() / (10f64.exp() + (t - 1) as f64)).ln();
        assert!((out.loss - 2.0 * per_frame).abs() < 1e-12);
    }

    #[test]
    fn baseline_is_the_sharp_prior_limit_of_scl() {
        let mut rng = Rng::seed_from_u64(6);
        let (z1, z2) = (randn((6, 4), &mut rng), randn((6, 4), &mut rng));
        let stamps = [2usize, 5, 9, 10, 14, 20];
        let s: Vec<f64> = stamps.iter().map(|&v| v as f64).collect();
        let corr = timestamp_correspondence(&stamps, &stamps);
        let cfg = SclConfig { sigma2: 1e-6, tau: 0.1 };
        let scl = scl_loss(&z1, &z2, &s, &s, &cfg).unwrap().loss;
        let base = baseline_contrastive_loss(&z1, &z2, &corr, 0.1).unwrap().loss;
        assert!((scl - base).abs() < 1e-6, "{scl} vs {base}");
    }

    #[test]
    fn baseline_needs_overlap() {
        let z = Array2::<f64>::eye(3);
        assert!(matches!(baseline_contrastive_loss(&z, &z, &[], 0.1), Err(Error::InvalidInput(_))));
        assert!(timestamp_correspondence(&[1, 3], &[2, 4]).is_empty());
        assert_eq!(timestamp_correspondence(&[1, 3, 4, 8], &[0, 3, 8]), vec![(1, 1), (3, 2)]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn weight_rows_are_stochastic(
            seed in any::<u64>(),
            t1 in 1usize..12,
            t2 in 1usize..12,
            sigma_idx in 0usize..3,
            shift in -1000i64..1000,
        ) {
            let sigma2 = [1.0, 10.0, 25.0][sigma_idx];
            let mut rng = Rng::seed_from_u64(seed);
            let s1: Vec<f64> = (0..t1).map(|_| rng.random_range(0..500) as f64).collect();
            let s2: Vec<f64> = (0..t2).map(|_| rng.random_range(0..500) as f64).collect();
            let w = gaussian_weights(&s1, &s2, sigma2).unwrap().0;
            for row in w.rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
            let c = shift as f64;
            let s1c: Vec<f64> = s1.iter().map(|v| v + c).collect();
            let s2c: Vec<f64> = s2.iter().map(|v| v + c).collect();
            prop_assert_eq!(gaussian_weights(&s1c, &s2c, sigma2).unwrap().0, w);
        }

        #[test]
        fn loss_is_scale_invariant_and_bounded_by_entropy(
            seed in any::<u64>(),
            t in 2usize..9,
            d in 2usize..9,
        ) {
            let mut rng = Rng::seed_from_u64(seed);
            let (z1, z2) = (randn((t, d), &mut rng), randn((t, d), &mut rng));
            let (s1, s2) = (sorted_stamps(t, &mut rng), sorted_stamps(t, &mut rng));
            let cfg = SclConfig::default();
            let base = scl_loss(&z1, &z2, &s1, &s2, &cfg).unwrap().loss;
            let mut scaled = z1.clone();
            for mut row in scaled.rows_mut() {
                let f = rng.random_range(0.01..100.0);
                row.mapv_inplace(|v| v * f);
            }
            let again = scl_loss(&scaled, &z2, &s1, &s2, &cfg).unwrap().loss;
            prop_assert!((base - again).abs() < 1e-9);

            let entropy = |w: &Array2<f64>| -> f64 {
                w.rows().into_iter().map(|r| -r.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()).sum::<f64>() / w.nrows() as f64
            };
            let h12 = entropy(&gaussian_weights(&s1, &s2, cfg.sigma2).unwrap().0);
            let h21 = entropy(&gaussian_weights(&s2, &s1, cfg.sigma2).unwrap().0);
            prop_assert!(base >= h12 + h21 - 1e-12);
        }
    }
}

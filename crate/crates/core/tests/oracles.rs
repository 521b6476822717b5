//! Expected values computed independently of the code under test.

use florg::federation::dirichlet_partition;
use florg::federation::partition::label_entropy;
use florg::linalg::{sym_eig, Matrix};
use florg::rng::{rng_for, stream};
use florg::server::{
    aggregate_gram, decompose, procrustes_align, truncate_factor, uniform_weights,
};

fn gaussian(seed: u64, rows: usize, cols: usize) -> Matrix {
    Matrix::gaussian(rows, cols, 1.0, &mut rng_for(seed, stream::VERIFY))
}

/// Best PSD approximation of rank at most `r`, by trying every subset of
/// `r` eigenpairs.
fn best_rank_r_psd(q: &Matrix, r: usize) -> (Matrix, f64) {
    let eig = sym_eig(q, 0.0_f64.max(1e-14 * q.trace())).unwrap();
    let n = eig.dim();
    let mut best = (Matrix::zeros(n, n), f64::INFINITY);
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != r.min(n) {
            continue;
        }
        let approx = Matrix::from_fn(n, n, |i, j| {
            (0..n)
                .filter(|l| mask & (1 << l) != 0)
                .map(|l| eig.values[l] * eig.vectors[(l, i)] * eig.vectors[(l, j)])
                .sum()
        });
        let err = q.distance(&approx).unwrap();
        if err < best.1 {
            best = (approx, err);
        }
    }
    best
}

#[test]
fn truncation_is_the_best_rank_r_psd_approximation() {
    for seed in 0..200u64 {
        let k = 1 + (seed % 6) as usize;
        let n = 1 + (seed % 3) as usize;
        let local_r = 1 + (seed % 4) as usize;
        let locals: Vec<Matrix> = (0..n)
            .map(|c| gaussian(seed * 10 + c as u64, local_r, k))
            .collect();
        let agg = aggregate_gram(&locals, &uniform_weights(n)).unwrap();
        for r in 1..=k {
            let factor = truncate_factor(&decompose(&agg), r).unwrap();
            let (best, err) = best_rank_r_psd(&agg.q, r);
            let scale = agg.q.frobenius_norm();
            assert!(
                factor.gram().distance(&best).unwrap() <= 1e-9 * scale,
                "seed {seed} r {r}: truncated Gram differs from the exhaustive optimum"
            );
            assert!((agg.q.distance(&factor.gram()).unwrap() - err).abs() <= 1e-9 * scale);
        }
    }
}

#[test]
fn truncation_loss_is_the_dropped_trace() {
    let locals = [gaussian(1, 3, 6), gaussian(2, 3, 6)];
    let agg = aggregate_gram(&locals, &uniform_weights(2)).unwrap();
    let factor = truncate_factor(&decompose(&agg), 2).unwrap();
    let kept = factor.gram().trace();
    assert!((agg.q.trace() - kept - factor.truncation_loss).abs() <= 1e-12 * agg.q.trace());
}

fn invert(m: &Matrix) -> Matrix {
    // Gauss-Jordan with partial pivoting; only used on small well-conditioned inputs
    let n = m.rows();
    let mut a = m.clone();
    let mut inv = Matrix::identity(n);
    for col in 0..n {
        let p = (col..n)
            .max_by(|&x, &y| a[(x, col)].abs().total_cmp(&a[(y, col)].abs()))
            .unwrap();
        for j in 0..n {
            let (t1, t2) = (a[(col, j)], a[(p, j)]);
            a[(col, j)] = t2;
            a[(p, j)] = t1;
            let (t1, t2) = (inv[(col, j)], inv[(p, j)]);
            inv[(col, j)] = t2;
            inv[(p, j)] = t1;
        }
        let d = a[(col, col)];
        for j in 0..n {
            a[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = a[(i, col)];
                for j in 0..n {
                    a[(i, j)] -= f * a[(col, j)];
                    inv[(i, j)] -= f * inv[(col, j)];
                }
            }
        }
    }
    inv
}

/// Orthogonal polar factor by the Newton iteration `X ← (X + X⁻ᵀ)/2`.
fn polar(m: &Matrix) -> Matrix {
    let mut x = m.clone();
    for _ in 0..100 {
        let next = x.add(&invert(&x).transpose()).unwrap().scale(0.5);
        let done = next.distance(&x).unwrap() <= 1e-15;
        x = next;
        if done {
            break;
        }
    }
    x
}

#[test]
fn single_client_pipeline_recovers_the_polar_rotation() {
    // With one full-rank client, {S·Ã} = {O·A₁ : O orthogonal}, so the aligned
    // update is polar(A_prev·A₁ᵀ)·A₁.
    for seed in 0..100u64 {
        let r = 1 + (seed % 4) as usize;
        let k = r + (seed % 5) as usize;
        let a1 = gaussian(seed, r, k);
        let a_prev = gaussian(seed + 1000, r, k);
        let factor = truncate_factor(
            &decompose(&aggregate_gram(std::slice::from_ref(&a1), &[1.0]).unwrap()),
            r,
        )
        .unwrap();
        assert_eq!(factor.rows(), r);
        let res = procrustes_align(&a_prev, &factor).unwrap();
        let expected = polar(&a_prev.matmul_t(&a1).unwrap()).matmul(&a1).unwrap();
        assert!(
            res.a_next.distance(&expected).unwrap() <= 1e-8 * expected.frobenius_norm(),
            "seed {seed}"
        );
    }
}

#[test]
fn single_client_self_alignment_returns_the_client() {
    for seed in 0..50u64 {
        let a = gaussian(seed, 3, 7);
        let factor = truncate_factor(
            &decompose(&aggregate_gram(std::slice::from_ref(&a), &[1.0]).unwrap()),
            3,
        )
        .unwrap();
        let res = procrustes_align(&a, &factor).unwrap();
        assert!(res.a_next.distance(&a).unwrap() <= 1e-10 * a.frobenius_norm());
        assert!(res.residual <= 1e-18 * a.frobenius_norm_sq().max(1.0) + 1e-20);
    }
}

fn class_labels(classes: usize, per_class: usize) -> Vec<usize> {
    (0..classes * per_class).map(|i| i % classes).collect()
}

#[test]
fn huge_rho_gives_global_proportions() {
    let classes = 4;
    let labels = class_labels(classes, 500);
    for seed in 0..50 {
        let shards = dirichlet_partition(&labels, 5, 1e6, seed).unwrap();
        for s in &shards {
            for c in 0..classes {
                let p = s.indices.iter().filter(|&&i| labels[i] == c).count() as f64
                    / s.sample_count() as f64;
                assert!(
                    (p - 0.25).abs() <= 0.02,
                    "seed {seed} client {} class {c}: {p}",
                    s.client_id
                );
            }
        }
    }
}

#[test]
fn smaller_rho_means_lower_label_entropy() {
    let labels = class_labels(5, 100);
    let mean_entropy = |rho: f64| {
        let mut total = 0.0;
        let mut count = 0;
        for seed in 0..50 {
            for s in dirichlet_partition(&labels, 10, rho, seed).unwrap() {
                total += label_entropy(&labels, &s);
                count += 1;
            }
        }
        total / count as f64
    };
    let (skewed, mild) = (mean_entropy(0.1), mean_entropy(1.0));
    assert!(skewed < mild, "entropy at 0.1 = {skewed}, at 1.0 = {mild}");
}

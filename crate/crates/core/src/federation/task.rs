//! Synthetic tasks and the shared loss evaluator.

use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{TaskKind, TaskSpec};
use crate::adapter::{init_adapter, AdapterConfig, InitScheme};
use crate::error::{Error, Result};
use crate::linalg::{symmetric_eigen, Matrix};
use crate::rng::{rng_for, stream};

#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// `m x d_out` responses.
    Regression(Matrix),
    /// Class index per sample.
    Classes(Vec<usize>),
}

/// Samples as rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub targets: Targets,
    /// Partition label per sample: the class for classification, the feature
    /// cluster for regression.
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How the target perturbation is planted: in the bases an adapter with this
/// init scheme and the task seed would draw, scaled by `scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plant {
    pub scale: f64,
    pub scheme: InitScheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub spec: TaskSpec,
    pub w0: Matrix,
    pub w_target: Matrix,
    pub train: Dataset,
    pub eval: Dataset,
}

/// Build `W⁰`, the planted target `W⁰ + scale·L·M₀ᵀM₀·R` with
/// `rank(M₀) = true_rank`, and the training/evaluation data.
pub fn generate_task(spec: &TaskSpec, plant: &Plant) -> Result<Task> {
    let (d_out, d_in) = (spec.d_out, spec.d_in);
    let k = d_out.min(d_in);
    if spec.true_rank > k {
        return Err(Error::contract(format!(
            "true rank {} exceeds {k}",
            spec.true_rank
        )));
    }
    let mut wrng = rng_for(spec.seed, stream::TASK_WEIGHTS);
    let w0 = Matrix::gaussian(d_out, d_in, 1.0 / (d_in as f64).sqrt(), &mut wrng);
    let mut w_target = w0.clone();
    if spec.true_rank > 0 {
        let bases = init_adapter(
            AdapterConfig {
                d_out,
                d_in,
                rank: spec.true_rank,
                alpha: 1.0,
                init_scheme: plant.scheme,
                seed: spec.seed,
            },
            w0.clone(),
        )?;
        let m0 = Matrix::gaussian(spec.true_rank, k, 1.0 / (k as f64).sqrt(), &mut wrng);
        let left = bases.l_basis().matmul_t(&m0)?;
        let right = m0.matmul(bases.r_basis())?;
        w_target.axpy(plant.scale, &left.matmul(&right)?)?;
    }

    let mut frng = rng_for(spec.seed, stream::TASK_FEATURES);
    let mut nrng = rng_for(spec.seed, stream::TASK_NOISE);
    let (train, eval) = match spec.kind {
        TaskKind::MatrixRecovery => {
            let means = Matrix::gaussian(spec.num_classes, d_in, 1.0, &mut frng);
            let train = regression_set(
                spec,
                &means,
                &w_target,
                spec.num_samples,
                &mut frng,
                &mut nrng,
            )?;
            let eval = regression_set(
                spec,
                &means,
                &w_target,
                spec.eval_samples,
                &mut frng,
                &mut nrng,
            )?;
            (train, eval)
        }
        TaskKind::SoftmaxClassify => {
            let train =
                classification_set(spec, &w_target, spec.num_samples, &mut frng, &mut nrng)?;
            let eval =
                classification_set(spec, &w_target, spec.eval_samples, &mut frng, &mut nrng)?;
            (train, eval)
        }
    };
    Ok(Task {
        spec: spec.clone(),
        w0,
        w_target,
        train,
        eval,
    })
}

fn regression_set<R: Rng>(
    spec: &TaskSpec,
    means: &Matrix,
    w_target: &Matrix,
    m: usize,
    frng: &mut R,
    nrng: &mut R,
) -> Result<Dataset> {
    let labels: Vec<usize> = (0..m)
        .map(|_| frng.random_range(0..spec.num_classes))
        .collect();
    let mut x = Matrix::gaussian(m, spec.d_in, 1.0, frng);
    for (i, &c) in labels.iter().enumerate() {
        for (v, mu) in x.row_mut(i).iter_mut().zip(means.row(c)) {
            *v += mu;
        }
    }
    let mut y = x.matmul_t(w_target)?;
    if spec.noise_std > 0.0 {
        y.axpy(spec.noise_std, &Matrix::gaussian(m, spec.d_out, 1.0, nrng))?;
    }
    Ok(Dataset {
        features: x,
        targets: Targets::Regression(y),
        labels,
    })
}

fn classification_set<R: Rng>(
    spec: &TaskSpec,
    w_target: &Matrix,
    m: usize,
    frng: &mut R,
    nrng: &mut R,
) -> Result<Dataset> {
    let x = Matrix::gaussian(m, spec.d_in, 1.0, frng);
    let logits = x.matmul_t(w_target)?;
    let labels: Vec<usize> = (0..m)
        .map(|i| {
            let row = logits.row(i);
            let noisy = row.iter().map(|&z| {
                if spec.noise_std > 0.0 {
                    z + spec.noise_std * nrng.sample::<f64, _>(StandardNormal)
                } else {
                    z
                }
            });
            argmax(noisy)
        })
        .collect();
    Ok(Dataset {
        features: x,
        targets: Targets::Classes(labels.clone()),
        labels,
    })
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Loss, its gradient with respect to the full weight, and (for
/// classification) the count of correct predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Matrix,
    pub correct: Option<usize>,
}

impl Task {
    pub fn d_out(&self) -> usize {
        self.spec.d_out
    }

    pub fn d_in(&self) -> usize {
        self.spec.d_in
    }

    /// Evaluate on `data`, restricted to `rows` if given.
    ///
    /// Regression: `‖X·Wᵀ − Y‖²_F / 2m`; classification: mean cross-entropy.
    pub fn evaluate(
        &self,
        w: &Matrix,
        data: &Dataset,
        rows: Option<&[usize]>,
    ) -> Result<Evaluation> {
        if w.shape() != (self.spec.d_out, self.spec.d_in) {
            return Err(Error::shape(
                "Task::evaluate",
                w.shape(),
                (self.spec.d_out, self.spec.d_in),
            ));
        }
        let x = match rows {
            Some(r) => data.features.select_rows(r),
            None => data.features.clone(),
        };
        let m = x.rows() as f64;
        let z = x.matmul_t(w)?;
        match &data.targets {
            Targets::Regression(y) => {
                let y = match rows {
                    Some(r) => y.select_rows(r),
                    None => y.clone(),
                };
                let e = z.sub(&y)?;
                let loss = e.frobenius_norm_sq() / (2.0 * m);
                let grad = e.t_matmul(&x)?.scale(1.0 / m);
                Ok(Evaluation {
                    loss,
                    grad,
                    correct: None,
                })
            }
            Targets::Classes(labels) => {
                let picked: Vec<usize> = match rows {
                    Some(r) => r.iter().map(|&i| labels[i]).collect(),
                    None => labels.clone(),
                };
                let mut p = z;
                let mut loss = 0.0;
                let mut correct = 0;
                for (i, &y) in picked.iter().enumerate() {
                    let row = p.row_mut(i);
                    if argmax(row.iter().copied()) == y {
                        correct += 1;
                    }
                    let zmax = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - zmax).exp();
                        total += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= total;
                    }
                    loss -= row[y].max(f64::MIN_POSITIVE).ln();
                    row[y] -= 1.0;
                }
                let grad = p.t_matmul(&x)?.scale(1.0 / m);
                Ok(Evaluation {
                    loss: loss / m,
                    grad,
                    correct: Some(correct),
                })
            }
        }
    }

    pub fn loss(&self, w: &Matrix, data: &Dataset) -> Result<f64> {
        Ok(self.evaluate(w, data, None)?.loss)
    }

    /// Curvature estimate of the loss in `W`: `λ_max(XᵀX/m)` on the training
    /// set, halved for cross-entropy.
    pub fn smoothness(&self) -> Result<f64> {
        let x = &self.train.features;
        let c = x.gram().scale(1.0 / x.rows() as f64);
        let top = symmetric_eigen(&c)?.values[0];
        Ok(match self.spec.kind {
            TaskKind::MatrixRecovery => top,
            TaskKind::SoftmaxClassify => 0.5 * top,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(true_rank: usize) -> TaskSpec {
        TaskSpec {
            d_out: 6,
            d_in: 5,
            num_samples: 40,
            eval_samples: 10,
            true_rank,
            ..TaskSpec::default()
        }
    }

    const PLANT: Plant = Plant {
        scale: 4.0,
        scheme: InitScheme::SemiOrthogonal,
    };

    #[test]
    fn zero_true_rank_targets_w0() {
        let t = generate_task(&spec(0), &PLANT).unwrap();
        assert_eq!(t.w_target, t.w0);
        assert_eq!(t.loss(&t.w0, &t.train).unwrap(), 0.0);
    }

    #[test]
    fn noiseless_target_has_zero_loss() {
        let t = generate_task(&spec(2), &PLANT).unwrap();
        assert!(t.loss(&t.w_target, &t.train).unwrap() <= 1e-28);
        assert!(t.loss(&t.w0, &t.train).unwrap() > 0.0);
    }

    #[test]
    fn loss_at_w0_matches_closed_form() {
        let t = generate_task(&spec(2), &PLANT).unwrap();
        let dw = t.w_target.sub(&t.w0).unwrap();
        let x = &t.train.features;
        let closed = x.matmul_t(&dw).unwrap().frobenius_norm_sq() / (2.0 * x.rows() as f64);
        let got = t.loss(&t.w0, &t.train).unwrap();
        assert!((got - closed).abs() <= 1e-12 * closed);
    }

    #[test]
    fn planted_perturbation_has_true_rank() {
        let t = generate_task(&spec(2), &PLANT).unwrap();
        let dw = t.w_target.sub(&t.w0).unwrap();
        assert_eq!(crate::linalg::thin_svd(&dw).rank(), 2);
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(
            generate_task(&spec(1), &PLANT).unwrap(),
            generate_task(&spec(1), &PLANT).unwrap()
        );
    }

    #[test]
    fn classification_labels_follow_teacher() {
        let s = TaskSpec {
            kind: TaskKind::SoftmaxClassify,
            d_out: 3,
            d_in: 4,
            num_classes: 3,
            num_samples: 30,
            eval_samples: 30,
            true_rank: 1,
            ..TaskSpec::default()
        };
        let t = generate_task(&s, &PLANT).unwrap();
        let e = t.evaluate(&t.w_target, &t.eval, None).unwrap();
        assert_eq!(e.correct, Some(30));
        assert!(e.loss > 0.0);
        assert!(t.train.labels.iter().all(|&y| y < 3));
    }

    #[test]
    fn row_subset_matches_manual_selection() {
        let t = generate_task(&spec(2), &PLANT).unwrap();
        let rows = [3, 0, 7];
        let sub = t.evaluate(&t.w0, &t.train, Some(&rows)).unwrap();
        let x = t.train.features.select_rows(&rows);
        let Targets::Regression(y) = &t.train.targets else {
            unreachable!()
        };
        let e = x
            .matmul_t(&t.w0)
            .unwrap()
            .sub(&y.select_rows(&rows))
            .unwrap();
        assert!((sub.loss - e.frobenius_norm_sq() / 6.0).abs() < 1e-14);
    }
}

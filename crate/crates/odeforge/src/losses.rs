//! Training losses: temperature-softened distillation, covariance alignment
//! between domains, supervised cross-entropy, and their gradients.
//!
//! The soft-target loss is the mean KL divergence between the teacher's and
//! student's temperature-softened class distributions, scaled by `T^2` so
//! its gradient magnitude stays comparable across temperatures. The
//! covariance (domain-confusion) loss is `||C_s - C_t||_F^2 / (4 d^2)` where
//! `C` is the sample covariance (1/(n-1) normalization) of a feature batch
//! and `d` the feature dimension. No hard-target term participates in
//! distillation; supervised cross-entropy exists separately for teacher
//! pre-training.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Numerically stable softmax of a logit vector.
pub fn softmax(logits: &Tensor) -> Tensor {
    let max = logits.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Tensor::from_vec_unchecked(vec![logits.len()], exps.iter().map(|&e| e / sum).collect())
}

fn check_batch(a: &[Tensor], b: &[Tensor], context: &str) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(
            context,
            format!("two equal non-empty batches"),
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    for (x, y) in a.iter().zip(b) {
        if x.shape() != y.shape() {
            return Err(Error::shape(
                context,
                format!("{:?}", x.shape()),
                format!("{:?}", y.shape()),
            ));
        }
    }
    Ok(())
}

/// Mean temperature-softened KL divergence between teacher and student
/// logits, scaled by `T^2`.
pub fn soft_target_loss(teacher_logits: &[Tensor], student_logits: &[Tensor], temperature: f64) -> Result<f64> {
    Ok(soft_target_loss_grad(teacher_logits, student_logits, temperature)?.0)
}

/// Soft-target loss plus its gradient with respect to the student logits.
pub fn soft_target_loss_grad(
    teacher_logits: &[Tensor],
    student_logits: &[Tensor],
    temperature: f64,
) -> Result<(f64, Vec<Tensor>)> {
    check_batch(teacher_logits, student_logits, "soft_target_loss")?;
    if temperature <= 0.0 {
        return Err(Error::config("temperature", "must be positive"));
    }
    let t = temperature;
    let n = teacher_logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(teacher_logits.len());
    for (tl, sl) in teacher_logits.iter().zip(student_logits) {
        let p_t = softmax(&tl.map(|v| v / t));
        let p_s = softmax(&sl.map(|v| v / t));
        let mut kl = 0.0;
        for (&pt, &ps) in p_t.data().iter().zip(p_s.data()) {
            if pt > 0.0 {
                kl += pt * (pt.ln() - ps.ln());
            }
        }
        loss += kl * t * t / n;
        let grad: Vec<f64> = p_s
            .data()
            .iter()
            .zip(p_t.data())
            .map(|(&ps, &pt)| t * (ps - pt) / n)
            .collect();
        grads.push(Tensor::from_vec_unchecked(vec![sl.len()], grad));
    }
    Ok((loss, grads))
}

/// Sample covariance matrix (row-major `d x d`) of a feature batch, with the
/// `1/(n-1)` normalization.
pub fn covariance(features: &[Tensor]) -> Result<Vec<f64>> {
    if features.len() < 2 {
        return Err(Error::InvalidArgument(
            "covariance requires at least 2 samples".to_string(),
        ));
    }
    let n = features.len();
    let d = features[0].len();
    let mut mean = vec![0.0f64; d];
    for f in features {
        if f.len() != d {
            return Err(Error::shape("covariance", format!("{} features", d), format!("{}", f.len())));
        }
        for (m, &v) in mean.iter_mut().zip(f.data()) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut cov = vec![0.0f64; d * d];
    for f in features {
        for i in 0..d {
            let di = f.data()[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (f.data()[j] - mean[j]);
            }
        }
    }
    let norm = 1.0 / (n as f64 - 1.0);
    for c in cov.iter_mut() {
        *c *= norm;
    }
    Ok(cov)
}

/// Squared Frobenius distance between the source and target feature
/// covariance matrices, scaled by `1/(4 d^2)`.
pub fn coral_loss(feat_source: &[Tensor], feat_target: &[Tensor]) -> Result<f64> {
    Ok(coral_loss_grad(feat_source, feat_target)?.0)
}

/// Covariance-alignment loss plus gradients with respect to both feature
/// batches.
pub fn coral_loss_grad(
    feat_source: &[Tensor],
    feat_target: &[Tensor],
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    if feat_source.len() < 2 || feat_target.len() < 2 {
        return Err(Error::InvalidArgument(
            "coral_loss requires at least 2 samples per domain".to_string(),
        ));
    }
    let d = feat_source[0].len();
    if feat_target[0].len() != d {
        return Err(Error::shape(
            "coral_loss",
            format!("{} features", d),
            format!("{}", feat_target[0].len()),
        ));
    }
    let c_s = covariance(feat_source)?;
    let c_t = covariance(feat_target)?;
    let delta: Vec<f64> = c_s.iter().zip(&c_t).map(|(a, b)| a - b).collect();
    let fro2: f64 = delta.iter().map(|v| v * v).sum();
    let scale = 1.0 / (4.0 * (d as f64) * (d as f64));
    let loss = fro2 * scale;

    // dL/dD = M * delta / (d^2 (n-1)) for the source side, negated for the
    // target side, with M the centered feature matrix
    let grads_for = |features: &[Tensor], sign: f64| -> Vec<Tensor> {
        let n = features.len();
        let mut mean = vec![0.0f64; d];
        for f in features {
            for (m, &v) in mean.iter_mut().zip(f.data()) {
                *m += v;
            }
        }
        for m in mean.iter_mut() {
            *m /= n as f64;
        }
        let factor = sign / ((d as f64) * (d as f64) * (n as f64 - 1.0));
        features
            .iter()
            .map(|f| {
                let centered: Vec<f64> = f.data().iter().zip(&mean).map(|(&v, &m)| v - m).collect();
                let mut g = vec![0.0f64; d];
                for j in 0..d {
                    let mut acc = 0.0;
                    for i in 0..d {
                        acc += centered[i] * delta[i * d + j];
                    }
                    g[j] = acc * factor;
                }
                Tensor::from_vec_unchecked(vec![d], g)
            })
            .collect()
    };
    let grad_source = grads_for(feat_source, 1.0);
    let grad_target = grads_for(feat_target, -1.0);
    Ok((loss, grad_source, grad_target))
}

/// `L = L_soft + lambda * L_dc`.
pub fn combined_loss(l_soft: f64, l_dc: f64, lambda: f64) -> f64 {
    l_soft + lambda * l_dc
}

/// Mean cross-entropy of logits against integer labels.
pub fn cross_entropy_loss(logits: &[Tensor], labels: &[usize]) -> Result<f64> {
    Ok(cross_entropy_grad(logits, labels)?.0)
}

/// Cross-entropy loss plus its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &[Tensor], labels: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels", logits.len()),
            format!("{} labels", labels.len()),
        ));
    }
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (l, &y) in logits.iter().zip(labels) {
        if y >= l.len() {
            return Err(Error::InvalidArgument(format!(
                "label {} out of range for {} classes",
                y,
                l.len()
            )));
        }
        let p = softmax(l);
        loss += -p.data()[y].max(1e-300).ln() / n;
        let mut g: Vec<f64> = p.data().iter().map(|&v| v / n).collect();
        g[y] -= 1.0 / n;
        grads.push(Tensor::from_vec_unchecked(vec![l.len()], g));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(v: Vec<f64>) -> Tensor {
        Tensor::rank1(v).unwrap()
    }

    #[test]
    fn soft_loss_zero_for_identical_logits() {
        let logits = vec![t(vec![1.0, -0.5, 2.0]), t(vec![0.0, 0.0, 0.0])];
        let loss = soft_target_loss(&logits, &logits, 4.0).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn soft_loss_invariant_under_class_permutation() {
        let teacher = vec![t(vec![1.0, -0.5, 2.0])];
        let student = vec![t(vec![0.3, 0.1, -1.0])];
        let a = soft_target_loss(&teacher, &student, 2.0).unwrap();
        let perm = |x: &Tensor| t(vec![x.data()[2], x.data()[0], x.data()[1]]);
        let b = soft_target_loss(&[perm(&teacher[0])], &[perm(&student[0])], 2.0).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn soft_loss_hand_computed_two_class_case() {
        // teacher (ln 3, 0), student (0, 0), T = 1:
        // KL((0.75, 0.25) || (0.5, 0.5)) = 0.75 ln 1.5 + 0.25 ln 0.5
        let teacher = vec![t(vec![3f64.ln(), 0.0])];
        let student = vec![t(vec![0.0, 0.0])];
        let loss = soft_target_loss(&teacher, &student, 1.0).unwrap();
        let want = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        assert!((loss - want).abs() < 1e-12);
        assert!((loss - 0.13081).abs() < 1e-5);
    }

    #[test]
    fn soft_loss_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let teacher = vec![t((0..5).map(|_| rng.gen_range(-3.0..3.0)).collect())];
            let student = vec![t((0..5).map(|_| rng.gen_range(-3.0..3.0)).collect())];
            assert!(soft_target_loss(&teacher, &student, 4.0).unwrap() >= 0.0);
        }
    }

    #[test]
    fn coral_zero_for_identical_batches() {
        let feats = vec![t(vec![1.0, 2.0]), t(vec![-1.0, 0.5]), t(vec![0.0, 0.1])];
        assert!(coral_loss(&feats, &feats).unwrap().abs() < 1e-15);
    }

    #[test]
    fn coral_hand_computed_scalar_case() {
        // d = 1, source {0, 2} (sample variance 2), target {1, 1} (variance 0)
        let source = vec![t(vec![0.0]), t(vec![2.0])];
        let target = vec![t(vec![1.0]), t(vec![1.0])];
        let loss = coral_loss(&source, &target).unwrap();
        assert!((loss - 1.0).abs() < 1e-14);
    }

    #[test]
    fn coral_block_diagonal_doubling_halves_loss() {
        // orthogonal +/-1 patterns make the cross-covariance exactly zero,
        // so appending an identically distributed independent block doubles
        // the Frobenius term while 1/(4 d^2) quarters it
        let a = 0.7;
        let col1 = [a, a, -a, -a];
        let col2 = [a, -a, a, -a];
        let source_1d: Vec<Tensor> = col1.iter().map(|&v| t(vec![v])).collect();
        let target_1d: Vec<Tensor> = (0..4).map(|_| t(vec![0.0])).collect();
        let l1 = coral_loss(&source_1d, &target_1d).unwrap();
        let source_2d: Vec<Tensor> = col1
            .iter()
            .zip(&col2)
            .map(|(&x, &y)| t(vec![x, y]))
            .collect();
        let target_2d: Vec<Tensor> = (0..4).map(|_| t(vec![0.0, 0.0])).collect();
        let l2 = coral_loss(&source_2d, &target_2d).unwrap();
        assert!((l2 - l1 / 2.0).abs() < 1e-12, "l1={l1} l2={l2}");
    }

    #[test]
    fn coral_matches_direct_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = 3;
        let source: Vec<Tensor> = (0..6)
            .map(|_| t((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let target: Vec<Tensor> = (0..5)
            .map(|_| t((0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()))
            .collect();
        let got = coral_loss(&source, &target).unwrap();
        // independent oracle: explicit covariance matrices and norm
        let cov = |fs: &[Tensor]| -> Vec<f64> {
            let n = fs.len() as f64;
            let mut mean = vec![0.0; d];
            for f in fs {
                for (m, &v) in mean.iter_mut().zip(f.data()) {
                    *m += v / n;
                }
            }
            let mut c = vec![0.0; d * d];
            for f in fs {
                for i in 0..d {
                    for j in 0..d {
                        c[i * d + j] +=
                            (f.data()[i] - mean[i]) * (f.data()[j] - mean[j]) / (n - 1.0);
                    }
                }
            }
            c
        };
        let cs = cov(&source);
        let ct = cov(&target);
        let fro2: f64 = cs.iter().zip(&ct).map(|(a, b)| (a - b) * (a - b)).sum();
        let want = fro2 / (4.0 * (d * d) as f64);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn coral_requires_two_samples() {
        let one = vec![t(vec![1.0])];
        let two = vec![t(vec![1.0]), t(vec![2.0])];
        assert!(coral_loss(&one, &two).is_err());
        assert!(coral_loss(&two, &one).is_err());
    }

    #[test]
    fn combined_loss_arithmetic() {
        assert_eq!(combined_loss(0.5, 0.25, 2.0), 1.0);
        assert_eq!(combined_loss(0.7, 9.0, 0.0), 0.7);
        assert_eq!(combined_loss(0.7, 0.0, 5.0), 0.7);
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let logits = vec![t(vec![2.0, 0.0, -1.0])];
        let (loss, grads) = cross_entropy_grad(&logits, &[0]).unwrap();
        let p = softmax(&logits[0]);
        assert!((loss + p.data()[0].ln()).abs() < 1e-12);
        // gradient sums to zero over classes
        let sum: f64 = grads[0].data().iter().sum();
        assert!(sum.abs() < 1e-12);
    }
}

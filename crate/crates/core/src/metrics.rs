//! Evaluation metrics: overall accuracy, mean per-class recall, and the
//! pseudo-label distribution discrepancy.

use crate::error::{Error, Result};

/// Accuracy summary for one prediction set.
#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Sample-weighted fraction of correct predictions.
    pub overall_acc: f64,
    /// Unweighted mean of the per-class recalls, over classes that actually
    /// occur in the true labels.
    pub per_class_acc: f64,
    /// Recall per class; `None` for classes absent from the true labels.
    pub class_recalls: Vec<Option<f64>>,
}

/// Overall accuracy and mean per-class recall of `pred` against `truth`.
///
/// Classes with no true samples are excluded from the per-class mean and
/// reported as absent rather than as zero recall.
pub fn accuracies(pred: &[usize], truth: &[usize], classes: usize) -> Result<EvalReport> {
    if pred.is_empty() || truth.is_empty() {
        return Err(Error::invalid_argument("empty label lists"));
    }
    if pred.len() != truth.len() {
        return Err(Error::invalid_argument(format!(
            "{} predictions but {} true labels",
            pred.len(),
            truth.len()
        )));
    }
    if pred.iter().chain(truth).any(|&l| l >= classes) {
        return Err(Error::invalid_argument(format!(
            "label out of range for {classes} classes"
        )));
    }

    let mut correct_per_class = vec![0usize; classes];
    let mut total_per_class = vec![0usize; classes];
    let mut correct = 0usize;
    for (&p, &t) in pred.iter().zip(truth) {
        total_per_class[t] += 1;
        if p == t {
            correct += 1;
            correct_per_class[t] += 1;
        }
    }

    let class_recalls: Vec<Option<f64>> = (0..classes)
        .map(|k| {
            if total_per_class[k] == 0 {
                None
            } else {
                Some(correct_per_class[k] as f64 / total_per_class[k] as f64)
            }
        })
        .collect();
    let present: Vec<f64> = class_recalls.iter().flatten().copied().collect();
    Ok(EvalReport {
        overall_acc: correct as f64 / truth.len() as f64,
        per_class_acc: present.iter().sum::<f64>() / present.len() as f64,
        class_recalls,
    })
}

/// Pseudo-label distribution discrepancy: sum over classes of the per-class
/// count error relative to the true count. Zero iff the per-class histograms
/// agree; requires every class to have at least one true sample.
pub fn pseudo_label_discrepancy(
    pseudo: &[usize],
    truth: &[usize],
    classes: usize,
) -> Result<f64> {
    if pseudo.len() != truth.len() {
        return Err(Error::invalid_argument(format!(
            "{} pseudo labels but {} true labels",
            pseudo.len(),
            truth.len()
        )));
    }
    if pseudo.iter().chain(truth).any(|&l| l >= classes) {
        return Err(Error::invalid_argument(format!(
            "label out of range for {classes} classes"
        )));
    }
    let mut pl = vec![0usize; classes];
    let mut gt = vec![0usize; classes];
    for (&p, &t) in pseudo.iter().zip(truth) {
        pl[p] += 1;
        gt[t] += 1;
    }
    if let Some(k) = gt.iter().position(|&c| c == 0) {
        return Err(Error::invalid_argument(format!(
            "class {k} has no true samples; discrepancy is undefined"
        )));
    }
    Ok((0..classes)
        .map(|k| (pl[k] as f64 - gt[k] as f64).abs() / gt[k] as f64)
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_predictor() {
        let labels = vec![0, 1, 2, 1, 0];
        let rep = accuracies(&labels, &labels, 3).unwrap();
        assert_eq!(rep.overall_acc, 1.0);
        assert_eq!(rep.per_class_acc, 1.0);
    }

    #[test]
    fn mixed_recalls_average_unweighted() {
        // recalls 1.0 (class 0, 3/3) and 0.0 (class 1, 0/1)
        let rep = accuracies(&[0, 0, 0, 0], &[0, 0, 0, 1], 2).unwrap();
        assert!((rep.overall_acc - 0.75).abs() < 1e-15);
        assert!((rep.per_class_acc - 0.5).abs() < 1e-15);
        assert_eq!(rep.class_recalls, vec![Some(1.0), Some(0.0)]);
    }

    #[test]
    fn constant_predictor_on_balanced_classes() {
        let k = 4;
        let truth: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, 10)).collect();
        let pred = vec![2usize; truth.len()];
        let rep = accuracies(&pred, &truth, k).unwrap();
        assert!((rep.overall_acc - 1.0 / k as f64).abs() < 1e-15);
        assert!((rep.per_class_acc - 1.0 / k as f64).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_excluded() {
        let rep = accuracies(&[0, 1], &[0, 0], 3).unwrap();
        assert_eq!(rep.class_recalls[1], None);
        assert_eq!(rep.class_recalls[2], None);
        assert!((rep.per_class_acc - 0.5).abs() < 1e-15);
    }

    #[test]
    fn overall_equals_per_class_on_balanced_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let k = 5;
        let truth: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, 20)).collect();
        let pred: Vec<usize> = truth.iter().map(|_| rng.gen_range(0..k)).collect();
        let rep = accuracies(&pred, &truth, k).unwrap();
        assert!((rep.overall_acc - rep.per_class_acc).abs() < 1e-12);
    }

    #[test]
    fn empty_input_is_rejected() {
        assert!(accuracies(&[], &[], 2).is_err());
    }

    #[test]
    fn discrepancy_zero_for_matching_histograms() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let pseudo = vec![2, 2, 0, 0, 1, 1]; // same counts, different assignment
        assert_eq!(pseudo_label_discrepancy(&pseudo, &truth, 3).unwrap(), 0.0);
    }

    #[test]
    fn discrepancy_direct_formula() {
        // gt counts [10,10], pseudo [5,15] -> 5/10 + 5/10 = 1.0
        let truth: Vec<usize> =
            std::iter::repeat_n(0, 10).chain(std::iter::repeat_n(1, 10)).collect();
        let pseudo: Vec<usize> =
            std::iter::repeat_n(0, 5).chain(std::iter::repeat_n(1, 15)).collect();
        let d = pseudo_label_discrepancy(&pseudo, &truth, 2).unwrap();
        assert!((d - 1.0).abs() < 1e-15);
    }

    #[test]
    fn discrepancy_all_mass_on_one_class() {
        // Balanced truth over K classes, all pseudo mass on class 0 -> 2(K-1).
        let k = 6;
        let per = 5;
        let truth: Vec<usize> = (0..k).flat_map(|c| std::iter::repeat_n(c, per)).collect();
        let pseudo = vec![0usize; truth.len()];
        let d = pseudo_label_discrepancy(&pseudo, &truth, k).unwrap();
        assert!((d - 2.0 * (k as f64 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn discrepancy_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let truth: Vec<usize> = (0..40).map(|_| rng.gen_range(0..4)).collect();
        let truth = {
            // ensure every class present
            let mut t = truth;
            t[0] = 0;
            t[1] = 1;
            t[2] = 2;
            t[3] = 3;
            t
        };
        let pseudo: Vec<usize> = (0..40).map(|_| rng.gen_range(0..4)).collect();
        let d1 = pseudo_label_discrepancy(&pseudo, &truth, 4).unwrap();
        let mut order: Vec<usize> = (0..40).collect();
        for i in (1..40).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let pseudo2: Vec<usize> = order.iter().map(|&i| pseudo[i]).collect();
        let truth2: Vec<usize> = order.iter().map(|&i| truth[i]).collect();
        let d2 = pseudo_label_discrepancy(&pseudo2, &truth2, 4).unwrap();
        assert!((d1 - d2).abs() < 1e-15);
    }

    #[test]
    fn discrepancy_rejects_empty_true_class() {
        assert!(pseudo_label_discrepancy(&[0, 1], &[0, 0], 2).is_err());
    }
}

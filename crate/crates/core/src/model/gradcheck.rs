//! Finite-difference verification of the analytic gradients. Runs the full
//! training loss (forward, softmax, soft labels) in f64 and compares every
//! parameter coordinate against a central difference.

use super::{ModelError, Seq2Seq};
use crate::sals::LabelRowView;

/// Hard cap on checkable model size; keeps an exhaustive sweep fast.
pub const GRAD_CHECK_PARAM_LIMIT: usize = 20_000;

const EPSILON: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub param_count: usize,
    pub max_rel_err: f64,
    /// Tensor and flat offset of the worst coordinate.
    pub worst_name: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} parameters, max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e})",
            self.param_count,
            self.max_rel_err,
            self.worst_name,
            self.worst_index,
            self.analytic,
            self.numeric
        )
    }
}

/// Checks d(loss sum)/d(theta) for every parameter of `model` on one
/// teacher-forced example. The model must stay under
/// `GRAD_CHECK_PARAM_LIMIT` parameters.
pub fn grad_check(
    model: &Seq2Seq<f64>,
    src: &[u32],
    tgt_in: &[u32],
    labels: &[Option<LabelRowView<'_>>],
) -> Result<GradCheckReport, ModelError> {
    let param_count = model.params().param_count();
    if param_count > GRAD_CHECK_PARAM_LIMIT {
        return Err(ModelError::TooManyParams {
            count: param_count,
            limit: GRAD_CHECK_PARAM_LIMIT,
        });
    }
    let mut grads = model.params().zeroed();
    let (_, counted) = model.loss_and_grads(src, tgt_in, labels, None, 0, &mut grads)?;
    if counted == 0 {
        return Err(ModelError::EmptySequence);
    }
    let analytic = grads.flatten();

    // Map flat offsets back to tensor names for the report.
    let mut spans: Vec<(String, usize)> = Vec::new();
    model.params().visit(&mut |name, view| {
        spans.push((name, view.len()));
    });
    let locate = |index: usize| -> (String, usize) {
        let mut start = 0;
        for (name, len) in &spans {
            if index < start + len {
                return (name.clone(), index - start);
            }
            start += len;
        }
        ("?".to_string(), index)
    };

    let base = model.params().flatten();
    let mut probe = model.clone();
    let mut flat = base.clone();
    let mut report = GradCheckReport {
        param_count,
        max_rel_err: 0.0,
        worst_name: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..param_count {
        flat[i] = base[i] + EPSILON;
        probe.params_mut().assign_flat(&flat)?;
        let (hi, _) = probe.loss_only(src, tgt_in, labels)?;
        flat[i] = base[i] - EPSILON;
        probe.params_mut().assign_flat(&flat)?;
        let (lo, _) = probe.loss_only(src, tgt_in, labels)?;
        flat[i] = base[i];
        let numeric = (hi - lo) / (2.0 * EPSILON);
        let diff = (analytic[i] - numeric).abs();
        // Differences at the f64 rounding floor are noise, not disagreement;
        // some coordinates (key biases) have an exactly zero gradient.
        let rel = if diff < 1e-9 {
            0.0
        } else {
            diff / analytic[i].abs().max(numeric.abs()).max(1e-8)
        };
        if rel > report.max_rel_err {
            let (name, offset) = locate(i);
            report.max_rel_err = rel;
            report.worst_name = name;
            report.worst_index = offset;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::{BOS, EOS};

    fn one_hot(gold: u32) -> LabelRowView<'static> {
        LabelRowView::GoldPlusShared {
            gold,
            gold_mass: 1.0,
            shared: &[],
        }
    }

    #[test]
    fn tiny_model_passes_exhaustive_check() {
        let model = Seq2Seq::<f64>::new(ModelConfig::tiny(14), 17).unwrap();
        let src = [4u32, 9, EOS];
        let tgt_in = [BOS, 6, 11];
        let soft: &[(u32, f32)] = &[(6, 0.55), (7, 0.35), (4, 0.1)];
        let labels = vec![
            Some(LabelRowView::Sparse(soft)),
            Some(one_hot(11)),
            Some(one_hot(EOS)),
        ];
        let report = grad_check(&model, &src, &tgt_in, &labels).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "gradient mismatch: {report}"
        );
        assert!(report.param_count > 1000);
        assert!(!report.worst_name.is_empty());
    }

    #[test]
    fn oversized_model_is_refused() {
        let model = Seq2Seq::<f64>::new(ModelConfig::desk(2000), 1).unwrap();
        let err = grad_check(&model, &[4, EOS], &[BOS, 5], &[Some(one_hot(5)), Some(one_hot(EOS))])
            .unwrap_err();
        assert!(matches!(err, ModelError::TooManyParams { .. }));
    }

    #[test]
    fn padding_only_labels_are_refused() {
        let model = Seq2Seq::<f64>::new(ModelConfig::tiny(10), 3).unwrap();
        let err = grad_check(&model, &[4, EOS], &[BOS, 5], &[None, None]).unwrap_err();
        assert!(matches!(err, ModelError::EmptySequence));
    }
}

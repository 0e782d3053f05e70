use crate::exec::{ordered_map, ExecMode};
use crate::models::{Build, Forward, Model, ModelInput};
use crate::tensor::{Scalar, Var};

use super::data::{Prepared, PreparedTarget};

/// Loss pieces for one sample; `total` is `main + beta * act` with the ACT
/// term omitted entirely when beta is zero (its gradient is then exactly
/// zero by construction).
pub struct LossParts {
    pub total: Var,
    pub main: Var,
    pub fwd: Forward,
}

pub fn build_loss<T: Scalar>(
    model: &Model<T>,
    b: &mut Build<T>,
    p: &Prepared,
    beta: f64,
) -> LossParts {
    let fwd = forward_for(model, b, p);
    let main = match &p.target {
        PreparedTarget::Class(label) => b.g.cross_entropy(fwd.logits, vec![*label], vec![T::ONE]),
        PreparedTarget::Reads { positions, targets } => {
            let (n, _) = b.g.dims(fwd.logits);
            let mut full_targets = vec![0usize; n];
            let mut weights = vec![T::ZERO; n];
            for (&pos, &tgt) in positions.iter().zip(targets) {
                full_targets[pos] = tgt;
                weights[pos] = T::ONE;
            }
            b.g.cross_entropy(fwd.logits, full_targets, weights)
        }
    };
    let total = match fwd.act {
        Some(act) if beta > 0.0 => {
            let weighted = b.g.affine_scalar(act, T::from_f64(beta), T::ZERO);
            b.g.add(main, weighted)
        }
        _ => main,
    };
    LossParts { total, main, fwd }
}

pub fn forward_for<T: Scalar>(model: &Model<T>, b: &mut Build<T>, p: &Prepared) -> Forward {
    let input = match (&p.input_b, &p.target) {
        (Some(hyp), _) => ModelInput::Siamese { premise: &p.input_a, hypothesis: hyp },
        (None, PreparedTarget::Reads { .. }) => ModelInput::Lm { tokens: &p.input_a },
        (None, PreparedTarget::Class(_)) => ModelInput::Classify { tokens: &p.input_a },
    };
    model.forward(b, &input)
}

#[derive(Debug, Clone)]
pub struct SampleEval {
    pub reads_total: usize,
    pub reads_correct: usize,
    pub last_read_correct: Option<bool>,
    pub class_correct: Option<bool>,
    pub main_loss: f64,
    pub act_loss: f64,
    pub mean_halt_layer: f64,
    pub depth: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct EvalSummary {
    /// Classification accuracy, or all-reads accuracy for flip-flop.
    pub accuracy: f64,
    /// Accuracy on the final read of each sequence (flip-flop only).
    pub last_read_accuracy: Option<f64>,
    pub main_loss: f64,
    pub act_loss: f64,
    pub mean_halt_layer: f64,
}

pub fn eval_sample<T: Scalar>(model: &Model<T>, p: &Prepared, beta: f64) -> SampleEval {
    let mut b = model.begin(false);
    let parts = build_loss(model, &mut b, p, beta);
    let logits = b.g.data(parts.fwd.logits);
    let (_, width) = b.g.dims(parts.fwd.logits);

    let mut out = SampleEval {
        reads_total: 0,
        reads_correct: 0,
        last_read_correct: None,
        class_correct: None,
        main_loss: b.g.scalar_value(parts.main).to_f64(),
        act_loss: parts
            .fwd
            .act
            .map(|a| b.g.scalar_value(a).to_f64())
            .unwrap_or(0.0),
        mean_halt_layer: if parts.fwd.traces.is_empty() {
            parts.fwd.layers_run as f64
        } else {
            let s: f64 = parts.fwd.traces.iter().map(|t| t.mean_halt_layer()).sum();
            s / parts.fwd.traces.len() as f64
        },
        depth: p.depth,
    };

    match &p.target {
        PreparedTarget::Class(label) => {
            let pred = argmax(&logits[..width]);
            out.class_correct = Some(pred == *label);
        }
        PreparedTarget::Reads { positions, targets } => {
            for (&pos, &tgt) in positions.iter().zip(targets) {
                let row = &logits[pos * width..(pos + 1) * width];
                let correct = argmax(row) == tgt;
                out.reads_total += 1;
                if correct {
                    out.reads_correct += 1;
                }
                out.last_read_correct = Some(correct);
            }
        }
    }
    out
}

pub fn evaluate_model<T: Scalar>(
    model: &Model<T>,
    prepared: &[Prepared],
    beta: f64,
    mode: ExecMode,
) -> (EvalSummary, Vec<SampleEval>) {
    let samples = ordered_map(mode, prepared.len(), |i| eval_sample(model, &prepared[i], beta));
    (summarize(&samples), samples)
}

pub fn summarize(samples: &[SampleEval]) -> EvalSummary {
    let n = samples.len().max(1) as f64;
    let class_seen = samples.iter().any(|s| s.class_correct.is_some());
    let accuracy = if class_seen {
        samples.iter().filter(|s| s.class_correct == Some(true)).count() as f64 / n
    } else {
        let total: usize = samples.iter().map(|s| s.reads_total).sum();
        let correct: usize = samples.iter().map(|s| s.reads_correct).sum();
        if total == 0 {
            0.0
        } else {
            correct as f64 / total as f64
        }
    };
    let last_read_accuracy = if class_seen {
        None
    } else {
        let counted: Vec<bool> = samples.iter().filter_map(|s| s.last_read_correct).collect();
        if counted.is_empty() {
            None
        } else {
            Some(counted.iter().filter(|&&c| c).count() as f64 / counted.len() as f64)
        }
    };
    EvalSummary {
        accuracy,
        last_read_accuracy,
        main_loss: samples.iter().map(|s| s.main_loss).sum::<f64>() / n,
        act_loss: samples.iter().map(|s| s.act_loss).sum::<f64>() / n,
        mean_halt_layer: samples.iter().map(|s| s.mean_halt_layer).sum::<f64>() / n,
    }
}

/// Argmax-label accuracy over aligned prediction/target pairs; feeding the
/// labels straight through scores exactly 1.
pub fn classification_accuracy(targets: &[usize], predictions: &[usize]) -> f64 {
    assert_eq!(targets.len(), predictions.len(), "misaligned predictions");
    if targets.is_empty() {
        return 0.0;
    }
    let hits = targets.iter().zip(predictions).filter(|(t, p)| t == p).count();
    hits as f64 / targets.len() as f64
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::RngStream;

    #[test]
    fn oracle_as_model_scores_one() {
        let labels: Vec<usize> = (0..100).map(|i| i % 10).collect();
        assert_eq!(classification_accuracy(&labels, &labels), 1.0);
    }

    #[test]
    fn uniform_random_predictor_sits_at_chance() {
        let mut rng = RngStream::new(77);
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(10)).collect();
        let acc = classification_accuracy(&labels, &preds);
        assert!((acc - 0.1).abs() < 0.01, "acc {acc}");
    }

    #[test]
    fn seven_class_chance_level() {
        let mut rng = RngStream::new(78);
        let n = 10_000;
        let labels: Vec<usize> = (0..n).map(|_| rng.below(7)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.below(7)).collect();
        let acc = classification_accuracy(&labels, &preds);
        assert!((acc - 1.0 / 7.0).abs() < 0.02, "acc {acc}");
    }
}

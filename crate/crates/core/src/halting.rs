//! The halting algebra shared by the depth-recurrent models: conditional to
//! unconditional probability conversion, output marginalization, early-stop
//! thresholding and the ACT penalty.
//!
//! Everything exists twice: as graph builders (differentiable, used inside
//! model forwards — gradients flow through the halting scores via the
//! marginalization and the ACT loss, no stop-gradient tricks) and as plain
//! probability functions over `f64` slices (used for traces, metrics and
//! tests).

use crate::tensor::{Graph, Scalar, Var};

/// Two-layer halting score head: `sigmoid(GeLU(x W_h1 + b_h1) W_h2 + b_h2)`.
/// Input width is d for token/global halting and 2d when transition-aware.
#[derive(Clone, Copy)]
pub struct HaltVars {
    pub wh1: Var,
    pub bh1: Var,
    pub wh2: Var,
    pub bh2: Var,
}

/// Strictly-inside-(0,1) halting probabilities for each input row.
pub fn halt_score<T: Scalar>(g: &mut Graph<T>, vars: &HaltVars, x: Var) -> Var {
    let (_, din) = g.dims(x);
    let (w_rows, _) = g.dims(vars.wh1);
    assert_eq!(din, w_rows, "halt_score: input width {din} does not match W_h1 rows {w_rows}");
    let h = g.matmul(x, vars.wh1);
    let h = g.add_row(h, vars.bh1);
    let h = g.gelu(h);
    let h = g.matmul(h, vars.wh2);
    let h = g.add_row(h, vars.bh2);
    g.sigmoid(h)
}

/// Conditional probabilities to unconditional:
/// `alpha_l = alpha_hat_l * prod_{l' < l} (1 - alpha_hat_l')`.
/// Works elementwise, so entries may be `[1,1]` (global) or `[n,1]`
/// (token-level) vars.
pub fn to_unconditional<T: Scalar>(g: &mut Graph<T>, alpha_hat: &[Var]) -> Vec<Var> {
    let mut out = Vec::with_capacity(alpha_hat.len());
    let mut remainder: Option<Var> = None;
    for &ah in alpha_hat {
        let alpha = match remainder {
            None => ah,
            Some(r) => g.mul(ah, r),
        };
        out.push(alpha);
        let keep = g.one_minus(ah);
        remainder = Some(match remainder {
            None => keep,
            Some(r) => g.mul(r, keep),
        });
    }
    out
}

/// Halting-probability-weighted mixture of layer outputs. Takes m alphas and
/// m+1 outputs; the residual mass `1 - sum(alpha)` goes to the last output,
/// so the implicit weight vector is a probability distribution.
///
/// Alphas may be `[1,1]` scalars (global halting) or `[n,1]` columns
/// (token-level halting with per-position mixing).
pub fn marginalize<T: Scalar>(g: &mut Graph<T>, outputs: &[Var], alphas: &[Var]) -> Var {
    assert_eq!(
        outputs.len(),
        alphas.len() + 1,
        "marginalize: need m alphas and m+1 outputs, got {} and {}",
        alphas.len(),
        outputs.len()
    );
    let mut acc: Option<Var> = None;
    let mut cum: Option<Var> = None;
    for (&h, &a) in outputs.iter().zip(alphas.iter()) {
        let weighted = weigh(g, h, a);
        acc = Some(match acc {
            None => weighted,
            Some(s) => g.add(s, weighted),
        });
        cum = Some(match cum {
            None => a,
            Some(c) => g.add(c, a),
        });
    }
    let last = *outputs.last().expect("outputs non-empty");
    let residual_part = match cum {
        None => last,
        Some(c) => {
            let residual = g.one_minus(c);
            weigh(g, last, residual)
        }
    };
    match acc {
        None => residual_part,
        Some(s) => g.add(s, residual_part),
    }
}

fn weigh<T: Scalar>(g: &mut Graph<T>, h: Var, a: Var) -> Var {
    let (ar, ac) = g.dims(a);
    assert_eq!(ac, 1, "halting weights must be column vectors or scalars");
    if ar == 1 {
        g.scale(h, a)
    } else {
        g.mul_col(h, a)
    }
}

/// ACT penalty from in-graph alphas, layer indices starting at 1 so halting
/// immediately costs 1. Token-level `[n,1]` alphas are averaged over
/// positions.
pub fn act_loss_graph<T: Scalar>(g: &mut Graph<T>, alphas: &[Var]) -> Var {
    let mut acc = g.scalar(T::ZERO);
    for (l, &a) in alphas.iter().enumerate() {
        let (rows, _) = g.dims(a);
        let pooled = if rows == 1 { a } else { g.mean_rows(a) };
        let weighted = g.affine_scalar(pooled, T::from_f64((l + 1) as f64), T::ZERO);
        acc = g.add(acc, weighted);
    }
    acc
}

/// Whether computation should proceed past the current layer: true while the
/// cumulative halting mass stays strictly below the threshold.
pub fn should_continue(cumulative: f64, alpha_thresh: f64) -> bool {
    assert!(
        alpha_thresh > 0.0 && alpha_thresh <= 1.0,
        "alpha_thresh must be in (0, 1], got {alpha_thresh}"
    );
    cumulative < alpha_thresh
}

/// Per-layer record of one halting process: conditional probabilities,
/// their unconditional form, the running mass and where the threshold was
/// crossed (if it was).
#[derive(Debug, Clone, Default)]
pub struct HaltTrace {
    pub alpha_hat: Vec<f64>,
    pub alpha: Vec<f64>,
    pub cumulative: Vec<f64>,
    pub halted_at: Option<usize>,
}

impl HaltTrace {
    pub fn push(&mut self, alpha_hat: f64, alpha_thresh: f64) {
        assert!((0.0..=1.0).contains(&alpha_hat), "alpha_hat out of [0,1]: {alpha_hat}");
        let prod: f64 = self.alpha_hat.iter().map(|&a| 1.0 - a).product();
        let alpha = alpha_hat * prod;
        let cum = self.cumulative.last().copied().unwrap_or(0.0) + alpha;
        self.alpha_hat.push(alpha_hat);
        self.alpha.push(alpha);
        self.cumulative.push(cum);
        if self.halted_at.is_none() && !should_continue(cum, alpha_thresh) {
            self.halted_at = Some(self.alpha.len() - 1);
        }
    }

    pub fn cumulative_mass(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }

    /// Expected halting layer (1-based) with the residual mass assigned to
    /// the last computed layer.
    pub fn mean_halt_layer(&self) -> f64 {
        if self.alpha.is_empty() {
            return 0.0;
        }
        let mut e = 0.0;
        for (l, &a) in self.alpha.iter().enumerate() {
            e += (l + 1) as f64 * a;
        }
        e + (1.0 - self.cumulative_mass()) * self.alpha.len() as f64
    }
}

/// Plain-probability version of [`to_unconditional`].
pub fn to_unconditional_values(alpha_hat: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(alpha_hat.len());
    let mut prod = 1.0;
    for &ah in alpha_hat {
        assert!((0.0..=1.0).contains(&ah), "alpha_hat out of [0,1]: {ah}");
        out.push(ah * prod);
        prod *= 1.0 - ah;
    }
    out
}

/// ACT penalty over unconditional probabilities, rows = positions,
/// layer weights 1..=L. With `positionwise` the row sums are averaged,
/// matching the 1/T in the token-level objective.
pub fn act_loss(alpha_rows: &[Vec<f64>], positionwise: bool) -> f64 {
    let mut total = 0.0;
    for row in alpha_rows {
        for (l, &a) in row.iter().enumerate() {
            total += (l + 1) as f64 * a;
        }
    }
    if positionwise && !alpha_rows.is_empty() {
        total / alpha_rows.len() as f64
    } else {
        total
    }
}

/// Halt-score head over plain data, for analysis oracles in tests.
pub fn halt_score_values(x: &[f64], wh1: &[Vec<f64>], bh1: &[f64], wh2: &[f64], bh2: f64) -> f64 {
    assert_eq!(x.len(), wh1.len(), "halt width mismatch");
    let d = bh1.len();
    let mut hidden = vec![0.0; d];
    for (j, h) in hidden.iter_mut().enumerate() {
        let mut s = bh1[j];
        for (i, &xi) in x.iter().enumerate() {
            s += xi * wh1[i][j];
        }
        let phi = 0.5 * (1.0 + libm::erf(s * std::f64::consts::FRAC_1_SQRT_2));
        *h = s * phi;
    }
    let mut logit = bh2;
    for (j, &h) in hidden.iter().enumerate() {
        logit += h * wh2[j];
    }
    1.0 / (1.0 + (-logit).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn to_unconditional_hand_cases() {
        let got = to_unconditional_values(&[0.5, 0.5]);
        assert!((got[0] - 0.5).abs() < 1e-15);
        assert!((got[1] - 0.25).abs() < 1e-15);

        let certain = to_unconditional_values(&[1.0, 0.7]);
        assert_eq!(certain, vec![1.0, 0.0]);

        let never = to_unconditional_values(&[0.0, 0.0, 0.0]);
        assert_eq!(never, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn graph_route_matches_value_route() {
        let hats = [0.3, 0.8, 0.15, 0.5];
        let mut g = Graph::<f64>::new();
        let hat_vars: Vec<Var> = hats.iter().map(|&h| g.scalar(h)).collect();
        let alphas = to_unconditional(&mut g, &hat_vars);
        let values = to_unconditional_values(&hats);
        for (v, expected) in alphas.iter().zip(values) {
            assert!((g.scalar_value(*v) - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn marginalize_examples() {
        let mut g = Graph::<f64>::new();
        let outs: Vec<Var> = [1.0, 2.0, 4.0].iter().map(|&v| g.scalar(v)).collect();

        // all mass at the first layer
        let a = [g.scalar(1.0), g.scalar(0.0)];
        let s = marginalize(&mut g, &outs, &a);
        assert_eq!(g.scalar_value(s), 1.0);

        // no mass: everything residual on the last output
        let a = [g.scalar(0.0), g.scalar(0.0)];
        let s = marginalize(&mut g, &outs, &a);
        assert_eq!(g.scalar_value(s), 4.0);

        // weighted-sum oracle: 0.5*1 + 0.25*2 + 0.25*4 = 2
        let a = [g.scalar(0.5), g.scalar(0.25)];
        let s = marginalize(&mut g, &outs, &a);
        assert!((g.scalar_value(s) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn marginalize_weights_form_distribution() {
        // read the implicit weights off scalar outputs set to indicator values
        let hats = [0.37, 0.62, 0.05, 0.91];
        let alphas = to_unconditional_values(&hats);
        let mut weights = alphas.clone();
        weights.push(1.0 - alphas.iter().sum::<f64>());
        assert!(weights.iter().all(|&w| w >= 0.0));
        assert!((weights.iter().sum::<f64>() - 1.0).abs() < 1e-7);
    }

    #[test]
    fn should_continue_boundary() {
        assert!(should_continue(0.998, 0.999));
        assert!(!should_continue(0.999, 0.999)); // strict <
        assert!(!should_continue(1.0, 0.999));
    }

    #[test]
    #[should_panic(expected = "alpha_thresh")]
    fn should_continue_rejects_bad_threshold() {
        should_continue(0.5, 0.0);
    }

    #[test]
    fn act_loss_examples() {
        // all mass at layer 1
        assert_eq!(act_loss(&[vec![1.0]], true), 1.0);
        // direct sum oracle: 0.5*1 + 0.25*2 = 1.0
        assert_eq!(act_loss(&[vec![0.5, 0.25]], true), 1.0);
        // linearity: moving mass eps one layer later adds exactly eps
        let base = act_loss(&[vec![0.5, 0.25, 0.0]], true);
        let shifted = act_loss(&[vec![0.5, 0.125, 0.125]], true);
        assert_eq!(shifted - base, 0.125);
    }

    #[test]
    fn act_loss_graph_matches_values() {
        let mut g = Graph::<f64>::new();
        let rows = vec![vec![0.2, 0.3, 0.1], vec![0.6, 0.05, 0.2]];
        // token-level: one [2,1] alpha per layer
        let mut vars = Vec::new();
        for l in 0..3 {
            let t = Tensor::matrix(2, 1, vec![rows[0][l], rows[1][l]]);
            vars.push(g.leaf(&t, false));
        }
        let loss = act_loss_graph(&mut g, &vars);
        assert!((g.scalar_value(loss) - act_loss(&rows, true)).abs() < 1e-12);
    }

    #[test]
    fn trace_tracks_threshold_crossing() {
        let mut t = HaltTrace::default();
        t.push(0.6, 0.9);
        assert_eq!(t.halted_at, None);
        t.push(0.9, 0.9);
        // cumulative = 0.6 + 0.9*0.4 = 0.96 >= 0.9
        assert_eq!(t.halted_at, Some(1));
        assert!((t.cumulative_mass() - 0.96).abs() < 1e-12);
        // expected layer: 1*0.6 + 2*0.36 + 2*0.04 = 1.4
        assert!((t.mean_halt_layer() - 1.4).abs() < 1e-12);
    }

    #[test]
    fn halt_score_monotone_in_bias_and_hand_value() {
        let mut g = Graph::<f64>::new();
        let d = 4;
        let mk = |g: &mut Graph<f64>, b2: f64| {
            let wh1 = g.constant(d, d, vec![0.0; d * d]);
            let bh1 = g.constant(1, d, vec![0.0; d]);
            let wh2 = g.constant(d, 1, vec![0.0; d]);
            let bh2 = g.constant(1, 1, vec![b2]);
            HaltVars { wh1, bh1, wh2, bh2 }
        };
        let x = g.leaf(&Tensor::matrix(1, d, vec![0.3, -0.9, 0.5, 0.1]), false);

        let zero = mk(&mut g, 0.0);
        let s0 = halt_score(&mut g, &zero, x);
        assert_eq!(g.data(s0)[0], 0.5);

        let sat = mk(&mut g, 20.0);
        let s1 = halt_score(&mut g, &sat, x);
        assert!((g.data(s1)[0] - 1.0).abs() < 1e-6);

        let ln3 = mk(&mut g, 3.0f64.ln());
        let s2 = halt_score(&mut g, &ln3, x);
        assert!((g.data(s2)[0] - 0.75).abs() < 1e-12);

        // monotone in b_h2 with everything else fixed
        let lo = mk(&mut g, -0.4);
        let hi = mk(&mut g, 0.3);
        let slo = halt_score(&mut g, &lo, x);
        let shi = halt_score(&mut g, &hi, x);
        assert!(g.data(slo)[0] < g.data(shi)[0]);
    }

    #[test]
    #[should_panic(expected = "width")]
    fn halt_score_width_mismatch_panics() {
        let mut g = Graph::<f64>::new();
        let wh1 = g.constant(4, 4, vec![0.0; 16]);
        let bh1 = g.constant(1, 4, vec![0.0; 4]);
        let wh2 = g.constant(4, 1, vec![0.0; 4]);
        let bh2 = g.constant(1, 1, vec![0.0]);
        let vars = HaltVars { wh1, bh1, wh2, bh2 };
        let x = g.leaf(&Tensor::matrix(1, 3, vec![0.0; 3]), false);
        let _ = halt_score(&mut g, &vars, x);
    }

    #[test]
    fn truncation_with_frozen_tail_is_exact() {
        // once the threshold is crossed at layer j, marginalizing the
        // truncated run equals marginalizing a full run whose later alphas
        // are zero and whose outputs stay frozen at H_j
        let hats = [0.4, 0.5, 0.9, 0.3, 0.2];
        let thresh = 0.9;
        let mut trace = HaltTrace::default();
        let mut j = hats.len() - 1;
        for (l, &h) in hats.iter().enumerate() {
            trace.push(h, thresh);
            if trace.halted_at == Some(l) {
                j = l;
                break;
            }
        }
        let outputs: Vec<f64> = (0..=hats.len()).map(|i| (i * i) as f64 + 1.0).collect();

        let weights_marg = |outs: &[f64], alphas: &[f64]| -> f64 {
            let mut s = 0.0;
            for (o, a) in outs.iter().zip(alphas.iter()) {
                s += o * a;
            }
            s + (1.0 - alphas.iter().sum::<f64>()) * outs.last().unwrap()
        };

        let truncated = weights_marg(&outputs[..=j + 1], &trace.alpha[..=j]);
        // frozen continuation: outputs after j stay at H_{j+1}, alphas are 0
        let mut frozen = outputs[..=j + 1].to_vec();
        let mut alphas = trace.alpha.clone();
        while frozen.len() < outputs.len() {
            frozen.push(outputs[j + 1]);
        }
        while alphas.len() < hats.len() {
            alphas.push(0.0);
        }
        let full = weights_marg(&frozen, &alphas);
        assert!((truncated - full).abs() < 1e-15);
    }
}

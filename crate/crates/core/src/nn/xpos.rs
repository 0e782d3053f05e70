use crate::tensor::{Graph, RopeId, RopeTable, Scalar, Var};

/// Rotary relative positions with per-dimension exponential decay.
///
/// Pair p of a head dimension d_k rotates at frequency
/// `theta_base^(-2p/d_k)` (positive, strictly decreasing across pairs) and
/// decays with base `zeta_p = (2p/d_k + gamma) / (1 + gamma)` raised to the
/// relative offset over `scale_base`. Decay is applied on |i - j| so
/// bidirectional encoders stay symmetric; under a causal mask only the
/// i >= j branch is ever used, which is the standard query/key asymmetric
/// form.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct XPosConfig {
    pub rotate: bool,
    pub decay: bool,
    pub theta_base: f64,
    pub scale_base: f64,
    pub gamma: f64,
}

impl Default for XPosConfig {
    fn default() -> Self {
        XPosConfig {
            rotate: true,
            decay: true,
            theta_base: 10_000.0,
            scale_base: 512.0,
            gamma: 0.4,
        }
    }
}

impl XPosConfig {
    pub fn disabled() -> Self {
        XPosConfig { rotate: false, decay: false, ..Self::default() }
    }

    /// Rotation-only variant (plain RoPE).
    pub fn no_decay() -> Self {
        XPosConfig { decay: false, ..Self::default() }
    }

    pub fn frequencies(&self, dk: usize) -> Vec<f64> {
        assert!(dk >= 2 && dk % 2 == 0, "head dim must be even for rotation, got {dk}");
        (0..dk / 2)
            .map(|p| self.theta_base.powf(-(2.0 * p as f64) / dk as f64))
            .collect()
    }

    pub fn decay_bases(&self, dk: usize) -> Vec<f64> {
        (0..dk / 2)
            .map(|p| (2.0 * p as f64 / dk as f64 + self.gamma) / (1.0 + self.gamma))
            .collect()
    }
}

/// Per-sequence tables registered on a graph: the rotation table plus the
/// two decay scalings (`zeta^(+i/s)` and `zeta^(-i/s)`) as constants.
pub struct XPosTables {
    pub rope: Option<RopeId>,
    pub zpos: Option<Var>,
    pub zneg: Option<Var>,
}

/// Build tables for positions `offset .. offset + n` of a head width d_k.
pub fn build_tables<T: Scalar>(
    g: &mut Graph<T>,
    n: usize,
    dk: usize,
    offset: usize,
    cfg: &XPosConfig,
) -> XPosTables {
    let half = dk / 2;
    let rope = if cfg.rotate {
        let freqs = cfg.frequencies(dk);
        let mut cos = Vec::with_capacity(n * half);
        let mut sin = Vec::with_capacity(n * half);
        for i in 0..n {
            let pos = (offset + i) as f64;
            for &f in &freqs {
                let angle = pos * f;
                cos.push(T::from_f64(angle.cos()));
                sin.push(T::from_f64(angle.sin()));
            }
        }
        Some(g.rope_table(RopeTable { n, half, cos, sin }))
    } else {
        None
    };

    let (zpos, zneg) = if cfg.decay {
        let bases = cfg.decay_bases(dk);
        let mut zp = Vec::with_capacity(n * dk);
        let mut zn = Vec::with_capacity(n * dk);
        for i in 0..n {
            let e = (offset + i) as f64 / cfg.scale_base;
            for &b in &bases {
                let up = b.powf(e);
                let down = b.powf(-e);
                zp.push(T::from_f64(up));
                zp.push(T::from_f64(up));
                zn.push(T::from_f64(down));
                zn.push(T::from_f64(down));
            }
        }
        (Some(g.constant(n, dk, zp)), Some(g.constant(n, dk, zn)))
    } else {
        (None, None)
    };

    XPosTables { rope, zpos, zneg }
}

fn rotate(v: &[f64], pos: usize, freqs: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; v.len()];
    for (p, &f) in freqs.iter().enumerate() {
        let angle = pos as f64 * f;
        let (sn, cs) = angle.sin_cos();
        let a = v[2 * p];
        let b = v[2 * p + 1];
        out[2 * p] = a * cs - b * sn;
        out[2 * p + 1] = a * sn + b * cs;
    }
    out
}

/// Unscaled attention logit between a query at position i and a key at
/// position j. Depends on (q, k, i - j) only: the rotation is exactly
/// relative and the decay pairs as `zeta^(i) * zeta^(-j) = zeta^(i-j)`.
pub fn xpos_logit(q: &[f64], k: &[f64], i: usize, j: usize, cfg: &XPosConfig) -> f64 {
    assert_eq!(q.len(), k.len(), "xpos_logit: width mismatch");
    let dk = q.len();
    let (qr, kr) = if cfg.rotate {
        let freqs = cfg.frequencies(dk);
        (rotate(q, i, &freqs), rotate(k, j, &freqs))
    } else {
        (q.to_vec(), k.to_vec())
    };
    let decays = if cfg.decay {
        let e = (i as f64 - j as f64).abs() / cfg.scale_base;
        cfg.decay_bases(dk).iter().map(|b| b.powf(e)).collect()
    } else {
        vec![1.0; dk / 2]
    };
    let mut logit = 0.0;
    for p in 0..dk / 2 {
        logit += decays[p] * (qr[2 * p] * kr[2 * p] + qr[2 * p + 1] * kr[2 * p + 1]);
    }
    logit
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecs() -> (Vec<f64>, Vec<f64>) {
        (
            vec![0.3, -1.1, 0.7, 0.2, -0.5, 0.9, 1.3, -0.4],
            vec![-0.2, 0.8, 0.1, -0.9, 0.6, 0.4, -1.0, 0.5],
        )
    }

    #[test]
    fn zero_offset_positions_agree() {
        let (q, k) = vecs();
        let cfg = XPosConfig::default();
        let a = xpos_logit(&q, &k, 5, 5, &cfg);
        let b = xpos_logit(&q, &k, 9, 9, &cfg);
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn equal_offsets_agree() {
        let (q, k) = vecs();
        let cfg = XPosConfig::default();
        let a = xpos_logit(&q, &k, 7, 3, &cfg);
        let b = xpos_logit(&q, &k, 14, 10, &cfg);
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }

    #[test]
    fn single_frequency_reduces_to_2d_rotation() {
        // zeta = 1 and one pair: logit must equal the hand-computed rotary
        // dot product of two 2-D vectors.
        let cfg = XPosConfig { decay: false, ..Default::default() };
        let q = vec![1.0, 2.0];
        let k = vec![-0.5, 0.25];
        let (i, j) = (6usize, 2usize);
        // theta_0 = 1.0
        let ti = i as f64;
        let tj = j as f64;
        let qr = [q[0] * ti.cos() - q[1] * ti.sin(), q[0] * ti.sin() + q[1] * ti.cos()];
        let kr = [k[0] * tj.cos() - k[1] * tj.sin(), k[0] * tj.sin() + k[1] * tj.cos()];
        let expected = qr[0] * kr[0] + qr[1] * kr[1];
        let got = xpos_logit(&q, &k, i, j, &cfg);
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn frequencies_strictly_decreasing() {
        let cfg = XPosConfig::default();
        let f = cfg.frequencies(16);
        for w in f.windows(2) {
            assert!(w[0] > w[1] && w[1] > 0.0);
        }
    }
}

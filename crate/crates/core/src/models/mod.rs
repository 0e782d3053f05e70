//! The model assemblies: vanilla Transformer, Universal Transformer with
//! token-level halting, Gated Universal Transformer with global
//! transition-aware halting (plus its ablations and runtime-benchmark
//! variants), Temporal Latent Bottleneck, GUTLB, and TLB with a fixed number
//! of recurrent steps. Classification, Siamese and causal-LM heads live here
//! too, along with the checkpoint container.

mod checkpoint;
mod config;
mod store;
mod tlb;

#[cfg(test)]
mod tests;

pub use config::{HaltVariant, ModelConfig, ModelKind, Pooling};
pub use store::{Build, Init, Param, ParamId, ParamStore};
pub use tlb::{ChunkPlan, MemoryState};

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::halting::{self, HaltTrace, HaltVars};
use crate::nn::{self, AttentionVars, FeedForwardVars, GateVars, LayerNormVars, XPosTables};
use crate::tensor::{AttnMask, Scalar, Var};

#[derive(Debug, Clone, Copy)]
pub struct LnIds {
    gamma: ParamId,
    beta: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnIds {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    ln_q: LnIds,
    ln_kv: LnIds,
}

#[derive(Debug, Clone, Copy)]
pub struct FfIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln: LnIds,
}

#[derive(Debug, Clone, Copy)]
pub struct GateIds {
    wg1: ParamId,
    bg1: ParamId,
    wg2: ParamId,
    bg2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct HaltIds {
    wh1: ParamId,
    bh1: ParamId,
    wh2: ParamId,
    bh2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct TlbLayerIds {
    self_attn: AttnIds,
    mem_attn: AttnIds,
    ff: FfIds,
}

enum Blocks {
    Transformer {
        layers: Vec<(AttnIds, FfIds)>,
    },
    Ut {
        attn: AttnIds,
        ff: FfIds,
        halt: HaltIds,
    },
    Gut {
        attn: AttnIds,
        ff: FfIds,
        gate: Option<GateIds>,
        halt: Option<HaltIds>,
    },
    Tlb {
        cell: Vec<TlbLayerIds>,
        mem_update: Vec<(AttnIds, FfIds)>,
        m0: ParamId,
    },
    Gutlb {
        self_attn: AttnIds,
        mem_attn: AttnIds,
        ff: FfIds,
        gate: Option<GateIds>,
        halt: Option<HaltIds>,
        mem_update: Vec<(AttnIds, FfIds)>,
        m0: ParamId,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadSpec {
    /// Pooled representation through one affine to `num_classes` logits.
    Classify,
    /// Weight-shared encoder over two sequences; the pooled pair feeds
    /// `[u; v; u.v; |u-v|]` into affine - GeLU - affine.
    Siamese,
    /// Per-position next-token logits over the vocabulary.
    Lm,
}

enum Head {
    Classify { w: ParamId, b: ParamId },
    Siamese { w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId },
    Lm { w: ParamId, b: ParamId },
}

pub enum ModelInput<'a> {
    Classify { tokens: &'a [u32] },
    Siamese { premise: &'a [u32], hypothesis: &'a [u32] },
    Lm { tokens: &'a [u32] },
}

/// Result of one forward build: logits, the in-graph ACT penalty (when the
/// model halts), the data-side halting traces (one per position, chunk, or a
/// single global one) and how many block applications actually ran.
pub struct Forward {
    pub logits: Var,
    pub act: Option<Var>,
    pub traces: Vec<HaltTrace>,
    pub layers_run: usize,
    /// Final recurrent memory for the chunk-recurrent kinds.
    pub memory: Option<Var>,
}

pub(crate) struct Encoded {
    pub seq: Var,
    pub act: Option<Var>,
    pub traces: Vec<HaltTrace>,
    pub layers_run: usize,
    pub memory: Option<Var>,
}

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub head_spec: HeadSpec,
    /// Task tag recorded in checkpoints; evaluation refuses mismatches.
    pub task_tag: String,
    pub seed: u64,
    store: ParamStore<T>,
    embed: ParamId,
    blocks: Blocks,
    head: Head,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, head_spec: HeadSpec, task_tag: &str, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let mut store = ParamStore::new(seed);
        let embed = store.add("embed", cfg.vocab_size, cfg.d, Init::UniformFanIn);
        let blocks = Self::alloc_blocks(&cfg, &mut store);
        let head = match head_spec {
            HeadSpec::Classify => Head::Classify {
                w: store.add("head.w", cfg.d, cfg.num_classes, Init::UniformFanIn),
                b: store.add("head.b", 1, cfg.num_classes, Init::Zeros),
            },
            HeadSpec::Siamese => Head::Siamese {
                w1: store.add("siamese.w1", 4 * cfg.d, cfg.d, Init::UniformFanIn),
                b1: store.add("siamese.b1", 1, cfg.d, Init::Zeros),
                w2: store.add("siamese.w2", cfg.d, cfg.num_classes, Init::UniformFanIn),
                b2: store.add("siamese.b2", 1, cfg.num_classes, Init::Zeros),
            },
            HeadSpec::Lm => Head::Lm {
                w: store.add("lm.w", cfg.d, cfg.vocab_size, Init::UniformFanIn),
                b: store.add("lm.b", 1, cfg.vocab_size, Init::Zeros),
            },
        };
        Model {
            cfg,
            head_spec,
            task_tag: task_tag.to_string(),
            seed,
            store,
            embed,
            blocks,
            head,
        }
    }

    fn alloc_blocks(cfg: &ModelConfig, store: &mut ParamStore<T>) -> Blocks {
        let d = cfg.d;
        match cfg.kind {
            ModelKind::Transformer => {
                let layers = (0..cfg.upperbound_layers)
                    .map(|i| {
                        (
                            Self::alloc_attn(store, &format!("layer{i}.attn"), d),
                            Self::alloc_ff(store, &format!("layer{i}.ff"), d, cfg.d_ff),
                        )
                    })
                    .collect();
                Blocks::Transformer { layers }
            }
            ModelKind::Ut => Blocks::Ut {
                attn: Self::alloc_attn(store, "block.attn", d),
                ff: Self::alloc_ff(store, "block.ff", d, cfg.d_ff),
                halt: Self::alloc_halt(store, "block.halt", d, d),
            },
            ModelKind::Gut => {
                let halt_width = if cfg.transition { 2 * d } else { d };
                Blocks::Gut {
                    attn: Self::alloc_attn(store, "block.attn", d),
                    ff: Self::alloc_ff(store, "block.ff", d, cfg.d_ff),
                    gate: cfg
                        .gate
                        .then(|| Self::alloc_gate(store, "block.gate", d, cfg.d_gff)),
                    halt: (cfg.halt_variant != HaltVariant::NoHalt)
                        .then(|| Self::alloc_halt(store, "block.halt", halt_width, d)),
                }
            }
            ModelKind::Tlb | ModelKind::TlbFixed => {
                let cell = (0..cfg.upperbound_layers)
                    .map(|l| TlbLayerIds {
                        self_attn: Self::alloc_attn(store, &format!("cell{l}.self"), d),
                        mem_attn: Self::alloc_attn(store, &format!("cell{l}.mem"), d),
                        ff: Self::alloc_ff(store, &format!("cell{l}.ff"), d, cfg.d_ff),
                    })
                    .collect();
                let mem_update = (0..cfg.memory_update_layers)
                    .map(|u| {
                        (
                            Self::alloc_attn(store, &format!("memupd{u}.attn"), d),
                            Self::alloc_ff(store, &format!("memupd{u}.ff"), d, cfg.d_ff),
                        )
                    })
                    .collect();
                let m0 = store.add("memory.init", cfg.memory_slots, d, Init::UniformFanIn);
                Blocks::Tlb { cell, mem_update, m0 }
            }
            ModelKind::Gutlb => {
                let halt_width = if cfg.transition { 2 * d } else { d };
                let mem_update = (0..cfg.memory_update_layers)
                    .map(|u| {
                        (
                            Self::alloc_attn(store, &format!("memupd{u}.attn"), d),
                            Self::alloc_ff(store, &format!("memupd{u}.ff"), d, cfg.d_ff),
                        )
                    })
                    .collect();
                Blocks::Gutlb {
                    self_attn: Self::alloc_attn(store, "cell.self", d),
                    mem_attn: Self::alloc_attn(store, "cell.mem", d),
                    ff: Self::alloc_ff(store, "cell.ff", d, cfg.d_ff),
                    gate: cfg
                        .gate
                        .then(|| Self::alloc_gate(store, "cell.gate", d, cfg.d_gff)),
                    halt: (cfg.halt_variant != HaltVariant::NoHalt)
                        .then(|| Self::alloc_halt(store, "cell.halt", halt_width, d)),
                    mem_update,
                    m0: store.add("memory.init", cfg.memory_slots, d, Init::UniformFanIn),
                }
            }
        }
    }

    fn alloc_ln(store: &mut ParamStore<T>, prefix: &str, d: usize) -> LnIds {
        LnIds {
            gamma: store.add(&format!("{prefix}.gamma"), 1, d, Init::Ones),
            beta: store.add(&format!("{prefix}.beta"), 1, d, Init::Zeros),
        }
    }

    fn alloc_attn(store: &mut ParamStore<T>, prefix: &str, d: usize) -> AttnIds {
        AttnIds {
            wq: store.add(&format!("{prefix}.wq"), d, d, Init::UniformFanIn),
            wk: store.add(&format!("{prefix}.wk"), d, d, Init::UniformFanIn),
            wv: store.add(&format!("{prefix}.wv"), d, d, Init::UniformFanIn),
            wo: store.add(&format!("{prefix}.wo"), d, d, Init::UniformFanIn),
            ln_q: Self::alloc_ln(store, &format!("{prefix}.lnq"), d),
            ln_kv: Self::alloc_ln(store, &format!("{prefix}.lnkv"), d),
        }
    }

    fn alloc_ff(store: &mut ParamStore<T>, prefix: &str, d: usize, d_ff: usize) -> FfIds {
        FfIds {
            w1: store.add(&format!("{prefix}.w1"), d, d_ff, Init::UniformFanIn),
            b1: store.add(&format!("{prefix}.b1"), 1, d_ff, Init::Zeros),
            w2: store.add(&format!("{prefix}.w2"), d_ff, d, Init::UniformFanIn),
            b2: store.add(&format!("{prefix}.b2"), 1, d, Init::Zeros),
            ln: Self::alloc_ln(store, &format!("{prefix}.ln"), d),
        }
    }

    fn alloc_gate(store: &mut ParamStore<T>, prefix: &str, d: usize, d_gff: usize) -> GateIds {
        GateIds {
            wg1: store.add(&format!("{prefix}.wg1"), d, d_gff, Init::UniformFanIn),
            bg1: store.add(&format!("{prefix}.bg1"), 1, d_gff, Init::Zeros),
            wg2: store.add(&format!("{prefix}.wg2"), d_gff, d, Init::UniformFanIn),
            bg2: store.add(&format!("{prefix}.bg2"), 1, d, Init::Zeros),
        }
    }

    fn alloc_halt(store: &mut ParamStore<T>, prefix: &str, din: usize, d: usize) -> HaltIds {
        HaltIds {
            wh1: store.add(&format!("{prefix}.wh1"), din, d, Init::UniformFanIn),
            bh1: store.add(&format!("{prefix}.bh1"), 1, d, Init::Zeros),
            wh2: store.add(&format!("{prefix}.wh2"), d, 1, Init::UniformFanIn),
            bh2: store.add(&format!("{prefix}.bh2"), 1, 1, Init::Zeros),
        }
    }

    // ---- binding ---------------------------------------------------------

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn begin(&self, train: bool) -> Build<T> {
        Build::new(&self.store, train)
    }

    pub fn apply_grads(&mut self, build: &Build<T>) {
        build.flush_grads(&mut self.store);
    }

    fn bind_ln(&self, b: &mut Build<T>, ids: &LnIds) -> LayerNormVars {
        LayerNormVars {
            gamma: b.p(&self.store, ids.gamma),
            beta: b.p(&self.store, ids.beta),
        }
    }

    fn bind_attn(&self, b: &mut Build<T>, ids: &AttnIds) -> AttentionVars {
        AttentionVars {
            wq: b.p(&self.store, ids.wq),
            wk: b.p(&self.store, ids.wk),
            wv: b.p(&self.store, ids.wv),
            wo: b.p(&self.store, ids.wo),
            ln_q: self.bind_ln(b, &ids.ln_q),
            ln_kv: self.bind_ln(b, &ids.ln_kv),
            heads: self.cfg.heads,
        }
    }

    fn bind_ff(&self, b: &mut Build<T>, ids: &FfIds) -> FeedForwardVars {
        FeedForwardVars {
            w1: b.p(&self.store, ids.w1),
            b1: b.p(&self.store, ids.b1),
            w2: b.p(&self.store, ids.w2),
            b2: b.p(&self.store, ids.b2),
            ln: self.bind_ln(b, &ids.ln),
        }
    }

    fn bind_gate(&self, b: &mut Build<T>, ids: &GateIds) -> GateVars {
        GateVars {
            wg1: b.p(&self.store, ids.wg1),
            bg1: b.p(&self.store, ids.bg1),
            wg2: b.p(&self.store, ids.wg2),
            bg2: b.p(&self.store, ids.bg2),
        }
    }

    fn bind_halt(&self, b: &mut Build<T>, ids: &HaltIds) -> HaltVars {
        HaltVars {
            wh1: b.p(&self.store, ids.wh1),
            bh1: b.p(&self.store, ids.bh1),
            wh2: b.p(&self.store, ids.wh2),
            bh2: b.p(&self.store, ids.bh2),
        }
    }

    fn embed(&self, b: &mut Build<T>, tokens: &[u32]) -> Var {
        assert!(!tokens.is_empty(), "cannot embed an empty sequence");
        let table = b.p(&self.store, self.embed);
        let idx: Vec<usize> = tokens
            .iter()
            .map(|&t| {
                let t = t as usize;
                assert!(t < self.cfg.vocab_size, "token id {t} out of vocabulary");
                t
            })
            .collect();
        b.g.gather_rows(table, idx)
    }

    fn tables(&self, b: &mut Build<T>, n: usize) -> Option<XPosTables> {
        if self.cfg.xpos.rotate || self.cfg.xpos.decay {
            Some(nn::build_tables(
                &mut b.g,
                n,
                self.cfg.d / self.cfg.heads,
                0,
                &self.cfg.xpos,
            ))
        } else {
            None
        }
    }

    // ---- forward ---------------------------------------------------------

    pub fn forward(&self, b: &mut Build<T>, input: &ModelInput) -> Forward {
        match (&self.head, input) {
            (Head::Classify { w, b: bias }, ModelInput::Classify { tokens }) => {
                let enc = self.encode(b, tokens, false);
                let pooled = self.pool(b, enc.seq, tokens.len());
                let w = b.p(&self.store, *w);
                let bias = b.p(&self.store, *bias);
                let logits = b.g.matmul(pooled, w);
                let logits = b.g.add_row(logits, bias);
                Forward {
                    logits,
                    act: enc.act,
                    traces: enc.traces,
                    layers_run: enc.layers_run,
                    memory: enc.memory,
                }
            }
            (Head::Siamese { w1, b1, w2, b2 }, ModelInput::Siamese { premise, hypothesis }) => {
                let enc_p = self.encode(b, premise, false);
                let enc_h = self.encode(b, hypothesis, false);
                let u = self.pool(b, enc_p.seq, premise.len());
                let v = self.pool(b, enc_h.seq, hypothesis.len());
                let uv = b.g.mul(u, v);
                let diff = b.g.sub(u, v);
                let dist = b.g.abs(diff);
                let feats = b.g.concat_cols(&[u, v, uv, dist]);
                let w1 = b.p(&self.store, *w1);
                let b1v = b.p(&self.store, *b1);
                let w2 = b.p(&self.store, *w2);
                let b2v = b.p(&self.store, *b2);
                let h = b.g.matmul(feats, w1);
                let h = b.g.add_row(h, b1v);
                let h = b.g.gelu(h);
                let logits = b.g.matmul(h, w2);
                let logits = b.g.add_row(logits, b2v);
                let act = match (enc_p.act, enc_h.act) {
                    (Some(a), Some(c)) => {
                        let s = b.g.add(a, c);
                        Some(b.g.affine_scalar(s, T::from_f64(0.5), T::ZERO))
                    }
                    (a, c) => a.or(c),
                };
                let mut traces = enc_p.traces;
                traces.extend(enc_h.traces);
                Forward {
                    logits,
                    act,
                    traces,
                    layers_run: enc_p.layers_run + enc_h.layers_run,
                    memory: None,
                }
            }
            (Head::Lm { w, b: bias }, ModelInput::Lm { tokens }) => {
                let enc = self.encode(b, tokens, true);
                let w = b.p(&self.store, *w);
                let bias = b.p(&self.store, *bias);
                let logits = b.g.matmul(enc.seq, w);
                let logits = b.g.add_row(logits, bias);
                Forward {
                    logits,
                    act: enc.act,
                    traces: enc.traces,
                    layers_run: enc.layers_run,
                    memory: enc.memory,
                }
            }
            _ => panic!("model head does not accept this input kind"),
        }
    }

    fn pool(&self, b: &mut Build<T>, seq: Var, n: usize) -> Var {
        match self.cfg.pooling {
            Pooling::Mean => b.g.mean_rows(seq),
            Pooling::EndToken => b.g.gather_rows(seq, vec![n - 1]),
        }
    }

    pub(crate) fn encode(&self, b: &mut Build<T>, tokens: &[u32], causal: bool) -> Encoded {
        let h0 = self.embed(b, tokens);
        let n = tokens.len();
        match &self.blocks {
            Blocks::Transformer { layers } => self.encode_transformer(b, layers, h0, n, causal),
            Blocks::Ut { attn, ff, halt } => self.encode_ut(b, (attn, ff, halt), h0, n, causal),
            Blocks::Gut { attn, ff, gate, halt } => {
                self.encode_gut(b, (attn, ff, gate.as_ref(), halt.as_ref()), h0, n, causal)
            }
            Blocks::Tlb { cell, mem_update, m0 } => {
                self.encode_tlb(b, cell, mem_update, *m0, h0, n, causal)
            }
            Blocks::Gutlb {
                self_attn,
                mem_attn,
                ff,
                gate,
                halt,
                mem_update,
                m0,
            } => self.encode_gutlb(
                b,
                (self_attn, mem_attn, ff, gate.as_ref(), halt.as_ref()),
                mem_update,
                *m0,
                h0,
                n,
                causal,
            ),
        }
    }

    fn encode_transformer(
        &self,
        b: &mut Build<T>,
        layers: &[(AttnIds, FfIds)],
        h0: Var,
        n: usize,
        causal: bool,
    ) -> Encoded {
        let mask = if causal { AttnMask::Causal } else { AttnMask::Full };
        let tables = self.tables(b, n);
        let mut h = h0;
        for (attn_ids, ff_ids) in layers {
            let attn = self.bind_attn(b, attn_ids);
            let ff = self.bind_ff(b, ff_ids);
            let a = nn::attention(&mut b.g, &attn, h, h, &mask, tables.as_ref());
            h = nn::feed_forward(&mut b.g, &ff, a);
        }
        Encoded {
            seq: h,
            act: None,
            traces: Vec::new(),
            layers_run: layers.len(),
            memory: None,
        }
    }

    /// Token-level halting with per-position freezing; the attention reads
    /// K = V = S (the running marginalized mix) while queries track H.
    fn encode_ut(
        &self,
        b: &mut Build<T>,
        ids: (&AttnIds, &FfIds, &HaltIds),
        h0: Var,
        n: usize,
        causal: bool,
    ) -> Encoded {
        let (attn_ids, ff_ids, halt_ids) = ids;
        let attn = self.bind_attn(b, attn_ids);
        let ff = self.bind_ff(b, ff_ids);
        let halt = self.bind_halt(b, halt_ids);
        let mask = if causal { AttnMask::Causal } else { AttnMask::Full };
        let tables = self.tables(b, n);
        let thresh = self.cfg.alpha_thresh;

        let mut h = h0;
        let mut s = h0;
        let mut traces = vec![HaltTrace::default(); n];
        let mut alphas: Vec<Var> = Vec::new();
        let mut remainder: Option<Var> = None;
        let mut running: Option<Var> = None;
        let mut cum: Option<Var> = None;
        let mut layers_run = 0;

        for _ in 0..self.cfg.upperbound_layers {
            let active: Vec<bool> = traces.iter().map(|t| t.halted_at.is_none()).collect();
            if !active.iter().any(|&a| a) {
                break;
            }
            layers_run += 1;

            let a = nn::attention(&mut b.g, &attn, h, s, &mask, tables.as_ref());
            let h_new = nn::feed_forward(&mut b.g, &ff, a);
            // halting score from the pre-update state
            let score = halting::halt_score(&mut b.g, &halt, h);
            let score_vals: Vec<f64> = b.g.data(score).iter().map(|v| v.to_f64()).collect();

            let active_rc = Rc::new(active.clone());
            let zeros = b.g.constant(n, 1, vec![T::ZERO; n]);
            let ahat = b.g.select_rows(active_rc.clone(), score, zeros);
            let alpha = match remainder {
                None => ahat,
                Some(r) => b.g.mul(ahat, r),
            };
            let keep = b.g.one_minus(ahat);
            remainder = Some(match remainder {
                None => keep,
                Some(r) => b.g.mul(r, keep),
            });

            h = b.g.select_rows(active_rc.clone(), h_new, h);
            let weighted = b.g.mul_col(h, alpha);
            running = Some(match running {
                None => weighted,
                Some(r) => b.g.add(r, weighted),
            });
            cum = Some(match cum {
                None => alpha,
                Some(c) => b.g.add(c, alpha),
            });
            let resid = b.g.one_minus(cum.expect("set above"));
            let tail = b.g.mul_col(h, resid);
            let s_new = b.g.add(running.expect("set above"), tail);
            s = b.g.select_rows(active_rc, s_new, s);

            alphas.push(alpha);
            for (t, trace) in traces.iter_mut().enumerate() {
                if active[t] {
                    trace.push(score_vals[t], thresh);
                }
            }
        }

        let act = halting::act_loss_graph(&mut b.g, &alphas);
        Encoded {
            seq: s,
            act: Some(act),
            traces,
            layers_run,
            memory: None,
        }
    }

    /// The gated block with global (or ablated) halting. Returns the
    /// marginalized output over computed layers.
    fn encode_gut(
        &self,
        b: &mut Build<T>,
        ids: (&AttnIds, &FfIds, Option<&GateIds>, Option<&HaltIds>),
        h0: Var,
        n: usize,
        causal: bool,
    ) -> Encoded {
        let (attn_ids, ff_ids, gate_ids, halt_ids) = ids;
        let attn = self.bind_attn(b, attn_ids);
        let ff = self.bind_ff(b, ff_ids);
        let gate = gate_ids.map(|g| self.bind_gate(b, g));
        let mask = if causal { AttnMask::Causal } else { AttnMask::Full };
        let tables = self.tables(b, n);
        let upper = self.cfg.upperbound_layers;

        let Some(halt_ids) = halt_ids else {
            // no halting function at all: run to the upperbound, return H_L
            let mut h = h0;
            for _ in 0..upper {
                let a = nn::attention(&mut b.g, &attn, h, h, &mask, tables.as_ref());
                h = match &gate {
                    Some(gv) => nn::gated_feed_forward(&mut b.g, &ff, gv, h, a),
                    None => nn::feed_forward(&mut b.g, &ff, a),
                };
            }
            return Encoded {
                seq: h,
                act: None,
                traces: Vec::new(),
                layers_run: upper,
                memory: None,
            };
        };
        let halt = self.bind_halt(b, halt_ids);
        let mode = if self.cfg.global_halt {
            if causal {
                ScoreMode::Prefix
            } else {
                ScoreMode::Global
            }
        } else {
            ScoreMode::Token
        };

        let mut ctx = HaltCtx::new(mode, n, self.cfg.alpha_thresh, self.cfg.transition, halt);
        let mut h = h0;
        let mut layers_run = 0;
        for _ in 0..upper {
            if ctx.all_halted() {
                match self.cfg.halt_variant {
                    HaltVariant::Dynamic => break,
                    HaltVariant::UpperboundNoBreak => {
                        // redundant computation: layers keep running but the
                        // trace and the marginalization stay frozen
                        layers_run += 1;
                        let a = nn::attention(&mut b.g, &attn, h, h, &mask, tables.as_ref());
                        h = match &gate {
                            Some(gv) => nn::gated_feed_forward(&mut b.g, &ff, gv, h, a),
                            None => nn::feed_forward(&mut b.g, &ff, a),
                        };
                        continue;
                    }
                    HaltVariant::NoHalt => unreachable!("handled above"),
                }
            }
            layers_run += 1;
            let a = nn::attention(&mut b.g, &attn, h, h, &mask, tables.as_ref());
            let h_new = match &gate {
                Some(gv) => nn::gated_feed_forward(&mut b.g, &ff, gv, h, a),
                None => nn::feed_forward(&mut b.g, &ff, a),
            };
            h = ctx.step(b, h, h_new);
        }

        let (seq, act, traces) = ctx.finish(b);
        Encoded {
            seq,
            act: Some(act),
            traces,
            layers_run,
            memory: None,
        }
    }

    pub fn param_scalar_count(&self) -> usize {
        self.store.total_len()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum ScoreMode {
    /// One halting probability per layer from the mean-pooled sequence.
    Global,
    /// Per-position halting from causal prefix means (LM mode).
    Prefix,
    /// Per-position halting from the position's own state (token ablation).
    Token,
}

/// Shared halting bookkeeping for the GUT-style blocks (also reused per
/// chunk by GUTLB): collects layer outputs and unconditional probabilities,
/// freezes halted rows, and marginalizes at the end.
pub(crate) struct HaltCtx<T: Scalar> {
    mode: ScoreMode,
    n: usize,
    thresh: f64,
    transition: bool,
    halt: HaltVars,
    outputs: Vec<Var>,
    alphas: Vec<Var>,
    remainder: Option<Var>,
    pub traces: Vec<HaltTrace>,
    _marker: std::marker::PhantomData<T>,
}

impl<T: Scalar> HaltCtx<T> {
    pub(crate) fn new(
        mode: ScoreMode,
        n: usize,
        thresh: f64,
        transition: bool,
        halt: HaltVars,
    ) -> Self {
        let traces = match mode {
            ScoreMode::Global => vec![HaltTrace::default()],
            _ => vec![HaltTrace::default(); n],
        };
        HaltCtx {
            mode,
            n,
            thresh,
            transition,
            halt,
            outputs: Vec::new(),
            alphas: Vec::new(),
            remainder: None,
            traces,
            _marker: std::marker::PhantomData,
        }
    }

    pub(crate) fn all_halted(&self) -> bool {
        self.traces.iter().all(|t| t.halted_at.is_some())
    }

    /// Record one computed layer. Returns the (possibly row-frozen) state to
    /// carry into the next layer.
    pub(crate) fn step(&mut self, b: &mut Build<T>, h_prev: Var, h_new: Var) -> Var {
        let score_input = match self.mode {
            ScoreMode::Global => {
                let prev = b.g.mean_rows(h_prev);
                if self.transition {
                    let new = b.g.mean_rows(h_new);
                    b.g.concat_cols(&[prev, new])
                } else {
                    prev
                }
            }
            ScoreMode::Prefix => {
                let prev = b.g.prefix_mean_rows(h_prev);
                if self.transition {
                    let new = b.g.prefix_mean_rows(h_new);
                    b.g.concat_cols(&[prev, new])
                } else {
                    prev
                }
            }
            ScoreMode::Token => {
                if self.transition {
                    b.g.concat_cols(&[h_prev, h_new])
                } else {
                    h_prev
                }
            }
        };
        let score = halting::halt_score(&mut b.g, &self.halt, score_input);
        let score_vals: Vec<f64> = b.g.data(score).iter().map(|v| v.to_f64()).collect();

        let (h_next, ahat) = match self.mode {
            ScoreMode::Global => (h_new, score),
            _ => {
                let active: Vec<bool> =
                    self.traces.iter().map(|t| t.halted_at.is_none()).collect();
                let active_rc = Rc::new(active);
                let zeros = b.g.constant(self.n, 1, vec![T::ZERO; self.n]);
                let ahat = b.g.select_rows(active_rc.clone(), score, zeros);
                let h_next = b.g.select_rows(active_rc, h_new, h_prev);
                (h_next, ahat)
            }
        };

        let alpha = match self.remainder {
            None => ahat,
            Some(r) => b.g.mul(ahat, r),
        };
        let keep = b.g.one_minus(ahat);
        self.remainder = Some(match self.remainder {
            None => keep,
            Some(r) => b.g.mul(r, keep),
        });

        self.outputs.push(h_next);
        self.alphas.push(alpha);
        match self.mode {
            ScoreMode::Global => self.traces[0].push(score_vals[0], self.thresh),
            _ => {
                for (t, trace) in self.traces.iter_mut().enumerate() {
                    if trace.halted_at.is_none() {
                        trace.push(score_vals[t], self.thresh);
                    }
                }
            }
        }
        h_next
    }

    /// Marginalize the collected outputs (residual mass on the last computed
    /// layer) and build the ACT penalty over all recorded alphas.
    pub(crate) fn finish(self, b: &mut Build<T>) -> (Var, Var, Vec<HaltTrace>) {
        assert!(!self.outputs.is_empty(), "halting context saw no layers");
        let m = self.outputs.len() - 1;
        // the last alpha is absorbed by the residual-mass convention: the
        // residual 1 - sum(alpha_0..alpha_{m-1}) equals alpha_m plus the true
        // leftover mass, and both weigh the same (last) output
        let seq = halting::marginalize(&mut b.g, &self.outputs, &self.alphas[..m]);
        let act = halting::act_loss_graph(&mut b.g, &self.alphas);
        (seq, act, self.traces)
    }
}

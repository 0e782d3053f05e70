use crate::halting::HaltTrace;
use crate::nn::{self, XPosTables};
use crate::tensor::{AttnMask, Scalar, Tensor, Var};

use super::{AttnIds, Build, Encoded, FfIds, GateIds, HaltCtx, HaltIds, HaltVariant, Model, ParamId, ScoreMode, TlbLayerIds};

/// Partition of a length-n sequence into contiguous chunks. Every span has
/// length `chunk_size` except possibly the last, and the spans cover [0, n).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkPlan {
    pub n: usize,
    pub chunk_size: usize,
    pub spans: Vec<(usize, usize)>,
}

impl ChunkPlan {
    /// k = ceil(n / g) chunks of size g (last one possibly shorter).
    pub fn by_size(n: usize, g: usize) -> Self {
        assert!(n >= 1 && g >= 1, "chunk plan needs n >= 1 and g >= 1");
        let mut spans = Vec::with_capacity(n.div_ceil(g));
        let mut start = 0;
        while start < n {
            let end = (start + g).min(n);
            spans.push((start, end));
            start = end;
        }
        let plan = ChunkPlan { n, chunk_size: g, spans };
        plan.check();
        plan
    }

    /// Fixed number of recurrent steps: g = ceil(n / k). Inputs shorter than
    /// k degrade to n chunks of length 1.
    pub fn fixed_count(n: usize, k: usize) -> Self {
        assert!(n >= 1 && k >= 1, "chunk plan needs n >= 1 and k >= 1");
        let k = k.min(n);
        let g = n.div_ceil(k);
        let plan = Self::by_size(n, g);
        assert_eq!(plan.chunk_count(), k, "fixed-count arithmetic drifted");
        plan
    }

    pub fn chunk_count(&self) -> usize {
        self.spans.len()
    }

    fn check(&self) {
        assert!(!self.spans.is_empty());
        assert_eq!(self.spans[0].0, 0);
        assert_eq!(self.spans.last().unwrap().1, self.n);
        for w in self.spans.windows(2) {
            assert_eq!(w[0].1, w[1].0, "spans must be contiguous");
        }
        for (i, (s, e)) in self.spans.iter().enumerate() {
            let len = e - s;
            if i + 1 < self.spans.len() {
                assert_eq!(len, self.chunk_size);
            } else {
                assert!(len >= 1 && len <= self.chunk_size);
            }
        }
    }
}

/// Fixed-slot recurrent memory snapshot.
#[derive(Debug, Clone)]
pub struct MemoryState<T> {
    pub slots: usize,
    pub m: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    fn plan(&self, n: usize) -> ChunkPlan {
        match self.cfg.kind {
            super::ModelKind::TlbFixed => ChunkPlan::fixed_count(n, self.cfg.fixed_chunk_count),
            _ => ChunkPlan::by_size(n, self.cfg.chunk_size),
        }
    }

    fn chunk_tables(
        &self,
        b: &mut Build<T>,
        cache: &mut Vec<(usize, XPosTables)>,
        len: usize,
    ) -> Option<usize> {
        if !(self.cfg.xpos.rotate || self.cfg.xpos.decay) {
            return None;
        }
        if let Some(i) = cache.iter().position(|(l, _)| *l == len) {
            return Some(i);
        }
        let t = nn::build_tables(&mut b.g, len, self.cfg.d / self.cfg.heads, 0, &self.cfg.xpos);
        cache.push((len, t));
        Some(cache.len() - 1)
    }

    /// Chunk-recurrent encoder: per chunk, L unshared layers of
    /// (self-attention, cross-attention into memory, feed-forward), then U
    /// unshared memory-update layers attending from the slots to the chunk
    /// output. Memory evolves strictly left to right.
    pub(crate) fn encode_tlb(
        &self,
        b: &mut Build<T>,
        cell: &[TlbLayerIds],
        mem_update: &[(AttnIds, FfIds)],
        m0: ParamId,
        h0: Var,
        n: usize,
        causal: bool,
    ) -> Encoded {
        let plan = self.plan(n);
        let mask = if causal { AttnMask::Causal } else { AttnMask::Full };
        let mut table_cache: Vec<(usize, XPosTables)> = Vec::new();

        let mut memory = b.p(&self.store, m0);
        let mut chunk_outs = Vec::with_capacity(plan.chunk_count());
        for &(start, end) in &plan.spans {
            let len = end - start;
            let mut c = b.g.slice_rows(h0, start, len);
            let table_idx = self.chunk_tables(b, &mut table_cache, len);
            for layer in cell {
                let self_attn = self.bind_attn(b, &layer.self_attn);
                let mem_attn = self.bind_attn(b, &layer.mem_attn);
                let ff = self.bind_ff(b, &layer.ff);
                let pos = table_idx.map(|i| &table_cache[i].1);
                let a = nn::attention(&mut b.g, &self_attn, c, c, &mask, pos);
                // integrate past memory; slots carry no positions
                let a = nn::attention(&mut b.g, &mem_attn, a, memory, &AttnMask::Full, None);
                c = nn::feed_forward(&mut b.g, &ff, a);
            }
            chunk_outs.push(c);
            memory = self.update_memory(b, mem_update, memory, c);
        }

        let seq = if chunk_outs.len() == 1 { chunk_outs[0] } else { b.g.concat_rows(&chunk_outs) };
        Encoded {
            seq,
            act: None,
            traces: Vec::new(),
            layers_run: plan.chunk_count() * (cell.len() + mem_update.len()),
            memory: Some(memory),
        }
    }

    pub(crate) fn update_memory(
        &self,
        b: &mut Build<T>,
        mem_update: &[(AttnIds, FfIds)],
        memory: Var,
        chunk_out: Var,
    ) -> Var {
        let mut m = memory;
        for (attn_ids, ff_ids) in mem_update {
            let attn = self.bind_attn(b, attn_ids);
            let ff = self.bind_ff(b, ff_ids);
            let a = nn::attention(&mut b.g, &attn, m, chunk_out, &AttnMask::Full, None);
            m = nn::feed_forward(&mut b.g, &ff, a);
        }
        m
    }

    /// TLB whose recurrent cell is a GUT block: parameters shared across
    /// layers inside the chunk loop, a halting trace reset per chunk, and the
    /// memory update attending to the marginalized chunk output.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn encode_gutlb(
        &self,
        b: &mut Build<T>,
        ids: (&AttnIds, &AttnIds, &FfIds, Option<&GateIds>, Option<&HaltIds>),
        mem_update: &[(AttnIds, FfIds)],
        m0: ParamId,
        h0: Var,
        n: usize,
        causal: bool,
    ) -> Encoded {
        let (self_ids, mem_ids, ff_ids, gate_ids, halt_ids) = ids;
        let self_attn = self.bind_attn(b, self_ids);
        let mem_attn = self.bind_attn(b, mem_ids);
        let ff = self.bind_ff(b, ff_ids);
        let gate = gate_ids.map(|g| self.bind_gate(b, g));
        let halt = halt_ids.map(|h| self.bind_halt(b, h));
        let plan = self.plan(n);
        let mask = if causal { AttnMask::Causal } else { AttnMask::Full };
        let mut table_cache: Vec<(usize, XPosTables)> = Vec::new();
        let upper = self.cfg.upperbound_layers;

        let mut memory = b.p(&self.store, m0);
        let mut chunk_outs = Vec::with_capacity(plan.chunk_count());
        let mut acts: Vec<Var> = Vec::new();
        let mut traces: Vec<HaltTrace> = Vec::new();
        let mut layers_run = 0;

        for &(start, end) in &plan.spans {
            let len = end - start;
            let mut c = b.g.slice_rows(h0, start, len);
            let table_idx = self.chunk_tables(b, &mut table_cache, len);

            let step_layer = |b: &mut Build<T>,
                              c: Var,
                              table_cache: &Vec<(usize, XPosTables)>,
                              memory: Var| {
                let pos = table_idx.map(|i| &table_cache[i].1);
                let a = nn::attention(&mut b.g, &self_attn, c, c, &mask, pos);
                let a = nn::attention(&mut b.g, &mem_attn, a, memory, &AttnMask::Full, None);
                match &gate {
                    Some(gv) => nn::gated_feed_forward(&mut b.g, &ff, gv, c, a),
                    None => nn::feed_forward(&mut b.g, &ff, a),
                }
            };

            let chunk_out = match &halt {
                None => {
                    // NoHalt variant: plain fixed-depth cell
                    for _ in 0..upper {
                        layers_run += 1;
                        c = step_layer(b, c, &table_cache, memory);
                    }
                    c
                }
                Some(halt_vars) => {
                    let mode = if self.cfg.global_halt {
                        if causal {
                            ScoreMode::Prefix
                        } else {
                            ScoreMode::Global
                        }
                    } else {
                        ScoreMode::Token
                    };
                    // halting trace is reset per chunk
                    let mut ctx = HaltCtx::new(
                        mode,
                        len,
                        self.cfg.alpha_thresh,
                        self.cfg.transition,
                        *halt_vars,
                    );
                    for _ in 0..upper {
                        if ctx.all_halted() {
                            match self.cfg.halt_variant {
                                HaltVariant::Dynamic => break,
                                HaltVariant::UpperboundNoBreak => {
                                    layers_run += 1;
                                    c = step_layer(b, c, &table_cache, memory);
                                    continue;
                                }
                                HaltVariant::NoHalt => unreachable!(),
                            }
                        }
                        layers_run += 1;
                        let c_new = step_layer(b, c, &table_cache, memory);
                        c = ctx.step(b, c, c_new);
                    }
                    let (s, act, chunk_traces) = ctx.finish(b);
                    acts.push(act);
                    traces.extend(chunk_traces);
                    s
                }
            };

            chunk_outs.push(chunk_out);
            // memory update consumes the last computed marginalized output
            memory = self.update_memory(b, mem_update, memory, chunk_out);
            layers_run += mem_update.len();
        }

        let seq = if chunk_outs.len() == 1 { chunk_outs[0] } else { b.g.concat_rows(&chunk_outs) };
        let act = if acts.is_empty() {
            None
        } else {
            // averaged over chunks so the penalty scale is length-invariant
            let mut total = acts[0];
            for a in &acts[1..] {
                total = b.g.add(total, *a);
            }
            Some(b.g.affine_scalar(total, T::from_f64(1.0 / acts.len() as f64), T::ZERO))
        };
        Encoded {
            seq,
            act,
            traces,
            layers_run,
            memory: Some(memory),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn by_size_examples() {
        let p = ChunkPlan::by_size(25, 10);
        assert_eq!(p.chunk_count(), 3);
        assert_eq!(p.spans, vec![(0, 10), (10, 20), (20, 25)]);

        let one = ChunkPlan::by_size(7, 10);
        assert_eq!(one.chunk_count(), 1);
        assert_eq!(one.spans, vec![(0, 7)]);
    }

    #[test]
    fn fixed_count_examples() {
        let p = ChunkPlan::fixed_count(25, 5);
        assert_eq!(p.chunk_count(), 5);
        assert_eq!(p.chunk_size, 5);

        let long = ChunkPlan::fixed_count(1024, 5);
        assert_eq!(long.chunk_count(), 5);
        assert_eq!(long.chunk_size, 205);

        let tiny = ChunkPlan::fixed_count(3, 5);
        assert_eq!(tiny.chunk_count(), 3);
        assert_eq!(tiny.chunk_size, 1);
    }
}

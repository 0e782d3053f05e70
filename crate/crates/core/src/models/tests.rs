use std::path::PathBuf;

use super::*;
use crate::nn::XPosConfig;

fn cfg(kind: ModelKind) -> ModelConfig {
    let mut c = ModelConfig::base(kind, 12, 10);
    c.d = 8;
    c.d_ff = 12;
    c.d_gff = 12;
    c.heads = 2;
    c.upperbound_layers = 3;
    c
}

fn zero_params(model: &mut Model<f64>, needles: &[&str]) {
    for p in model.store_mut().iter_mut() {
        if needles.iter().any(|n| p.name.contains(n)) {
            let (r, c) = p.value.dims2();
            p.value = Tensor::matrix(r, c, vec![0.0; r * c]);
        }
    }
}

fn set_scalar_param(model: &mut Model<f64>, name: &str, v: f64) {
    for p in model.store_mut().iter_mut() {
        if p.name == name {
            let (r, c) = p.value.dims2();
            p.value = Tensor::matrix(r, c, vec![v; r * c]);
            return;
        }
    }
    panic!("no param named {name}");
}

fn encode_seq(model: &Model<f64>, tokens: &[u32], causal: bool) -> (Vec<f64>, Vec<HaltTrace>) {
    let mut b = model.begin(false);
    let enc = model.encode(&mut b, tokens, causal);
    (b.g.data(enc.seq).to_vec(), enc.traces)
}

use crate::tensor::Tensor;

#[test]
fn transformer_with_no_layers_is_the_embedding() {
    let mut c = cfg(ModelKind::Transformer);
    c.upperbound_layers = 0;
    let model = Model::<f64>::new(c, HeadSpec::Classify, "listops", 3);
    let tokens = [1u32, 4, 7];
    let mut b = model.begin(false);
    let h0 = model.embed(&mut b, &tokens);
    let enc = model.encode(&mut b, &tokens, false);
    assert_eq!(b.g.data(enc.seq), b.g.data(h0));
}

#[test]
fn transformer_zero_projections_is_identity() {
    let mut model = Model::<f64>::new(cfg(ModelKind::Transformer), HeadSpec::Classify, "listops", 3);
    zero_params(&mut model, &[".wq", ".wk", ".wv", ".wo", ".w1", ".w2", ".b1", ".b2"]);
    let tokens = [2u32, 9, 5, 0];
    let mut b = model.begin(false);
    let h0 = model.embed(&mut b, &tokens);
    let enc = model.encode(&mut b, &tokens, false);
    let (want, got) = (b.g.data(h0).to_vec(), b.g.data(enc.seq).to_vec());
    assert_eq!(want, got);
}

#[test]
fn transformer_single_layer_matches_manual_composition() {
    let mut c = cfg(ModelKind::Transformer);
    c.upperbound_layers = 1;
    let model = Model::<f64>::new(c, HeadSpec::Classify, "listops", 5);
    let tokens = [3u32, 1, 8, 8, 2];
    let mut b = model.begin(false);
    let h0 = model.embed(&mut b, &tokens);
    let enc = model.encode(&mut b, &tokens, false);

    let Blocks::Transformer { layers } = &model.blocks else { unreachable!() };
    let attn = model.bind_attn(&mut b, &layers[0].0);
    let ff = model.bind_ff(&mut b, &layers[0].1);
    let tables = model.tables(&mut b, tokens.len());
    let a = nn::attention(&mut b.g, &attn, h0, h0, &AttnMask::Full, tables.as_ref());
    let manual = nn::feed_forward(&mut b.g, &ff, a);
    assert_eq!(b.g.data(enc.seq), b.g.data(manual));
}

#[test]
fn ut_with_suppressed_halting_matches_weight_shared_stack() {
    let mut model = Model::<f64>::new(cfg(ModelKind::Ut), HeadSpec::Classify, "listops", 7);
    zero_params(&mut model, &["block.halt.wh1", "block.halt.wh2", "block.halt.bh1"]);
    set_scalar_param(&mut model, "block.halt.bh2", -20.0);
    let tokens = [1u32, 6, 3, 11];
    let (got, traces) = encode_seq(&model, &tokens, false);
    assert!(traces.iter().all(|t| t.halted_at.is_none()));

    // reference: plain weight-shared stack, K = V = H
    let mut b = model.begin(false);
    let mut h = model.embed(&mut b, &tokens);
    let Blocks::Ut { attn, ff, .. } = &model.blocks else { unreachable!() };
    let attn = model.bind_attn(&mut b, attn);
    let ff = model.bind_ff(&mut b, ff);
    let tables = model.tables(&mut b, tokens.len());
    for _ in 0..model.cfg.upperbound_layers {
        let a = nn::attention(&mut b.g, &attn, h, h, &AttnMask::Full, tables.as_ref());
        h = nn::feed_forward(&mut b.g, &ff, a);
    }
    let want = b.g.data(h);
    for (x, y) in got.iter().zip(want) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn ut_with_immediate_halting_is_single_application() {
    let mut model = Model::<f64>::new(cfg(ModelKind::Ut), HeadSpec::Classify, "listops", 7);
    zero_params(&mut model, &["block.halt.wh1", "block.halt.wh2", "block.halt.bh1"]);
    set_scalar_param(&mut model, "block.halt.bh2", 20.0);
    let tokens = [4u32, 0, 9];
    let (got, traces) = encode_seq(&model, &tokens, false);
    assert!(traces.iter().all(|t| t.halted_at == Some(0)));

    let mut b = model.begin(false);
    let h0 = model.embed(&mut b, &tokens);
    let Blocks::Ut { attn, ff, .. } = &model.blocks else { unreachable!() };
    let attn = model.bind_attn(&mut b, attn);
    let ff = model.bind_ff(&mut b, ff);
    let tables = model.tables(&mut b, tokens.len());
    let a = nn::attention(&mut b.g, &attn, h0, h0, &AttnMask::Full, tables.as_ref());
    let h1 = nn::feed_forward(&mut b.g, &ff, a);
    for (x, y) in got.iter().zip(b.g.data(h1)) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn ut_half_halting_mixes_layers_per_marginalization() {
    let mut c = cfg(ModelKind::Ut);
    c.upperbound_layers = 2;
    let mut model = Model::<f64>::new(c, HeadSpec::Classify, "listops", 9);
    zero_params(&mut model, &["block.halt.wh1", "block.halt.wh2", "block.halt.bh1", "block.halt.bh2"]);
    // sigmoid(0) = 0.5 at every layer
    let tokens = [5u32];
    let (got, traces) = encode_seq(&model, &tokens, false);
    assert!((traces[0].alpha_hat[0] - 0.5).abs() < 1e-12);

    // S = 0.5 H1 + 0.25 H2 + 0.25 H2 (residual on the last computed layer)
    let mut b = model.begin(false);
    let h0 = model.embed(&mut b, &tokens);
    let Blocks::Ut { attn, ff, .. } = &model.blocks else { unreachable!() };
    let attn = model.bind_attn(&mut b, attn);
    let ff = model.bind_ff(&mut b, ff);
    let tables = model.tables(&mut b, 1);
    let a1 = nn::attention(&mut b.g, &attn, h0, h0, &AttnMask::Full, tables.as_ref());
    let h1 = nn::feed_forward(&mut b.g, &ff, a1);
    // second layer queries h1 against s1 = h1 (since with one token and
    // alpha 0.5, s1 = 0.5 h1 + 0.5 h1)
    let a2 = nn::attention(&mut b.g, &attn, h1, h1, &AttnMask::Full, tables.as_ref());
    let h2 = nn::feed_forward(&mut b.g, &ff, a2);
    let (h1d, h2d) = (b.g.data(h1).to_vec(), b.g.data(h2).to_vec());
    for i in 0..got.len() {
        let want = 0.5 * h1d[i] + 0.5 * h2d[i];
        assert!((got[i] - want).abs() < 1e-9, "{} vs {want}", got[i]);
    }
}

#[test]
fn gut_gate_closed_and_inert_attention_preserves_input() {
    let mut c = cfg(ModelKind::Gut);
    c.upperbound_layers = 4;
    let mut model = Model::<f64>::new(c, HeadSpec::Classify, "listops", 11);
    zero_params(&mut model, &[".wq", ".wk", ".wv", ".wo"]);
    set_scalar_param(&mut model, "block.gate.bg2", -20.0);
    // leave the halt head at its seeded values; the state never changes so
    // whatever mixture the halting produces, every mixed term is H0
    let tokens = [1u32, 2, 3];
    let (got, _) = encode_seq(&model, &tokens, false);
    let mut b = model.begin(false);
    let h0 = model.embed(&mut b, &tokens);
    for (x, y) in got.iter().zip(b.g.data(h0)) {
        assert!((x - y).abs() < 1e-6, "{x} vs {y}");
    }
}

#[test]
fn gut_immediate_halt_returns_first_layer() {
    let mut model = Model::<f64>::new(cfg(ModelKind::Gut), HeadSpec::Classify, "listops", 13);
    zero_params(&mut model, &["block.halt.wh1", "block.halt.wh2", "block.halt.bh1"]);
    set_scalar_param(&mut model, "block.halt.bh2", 20.0);
    let tokens = [7u32, 2, 0, 4];
    let (got, traces) = encode_seq(&model, &tokens, false);
    assert_eq!(traces.len(), 1);
    assert_eq!(traces[0].halted_at, Some(0));

    let mut b = model.begin(false);
    let h0 = model.embed(&mut b, &tokens);
    let Blocks::Gut { attn, ff, gate, .. } = &model.blocks else { unreachable!() };
    let attn = model.bind_attn(&mut b, attn);
    let ff = model.bind_ff(&mut b, ff);
    let gate = model.bind_gate(&mut b, gate.as_ref().unwrap());
    let tables = model.tables(&mut b, tokens.len());
    let a = nn::attention(&mut b.g, &attn, h0, h0, &AttnMask::Full, tables.as_ref());
    let h1 = nn::gated_feed_forward(&mut b.g, &ff, &gate, h0, a);
    for (x, y) in got.iter().zip(b.g.data(h1)) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn gut_permutation_equivariance_without_positions() {
    let mut c = cfg(ModelKind::Gut);
    c.xpos = XPosConfig::disabled();
    let model = Model::<f64>::new(c, HeadSpec::Classify, "listops", 17);
    let tokens = [3u32, 8, 1, 6];
    let perm = [2usize, 0, 3, 1];
    let permuted: Vec<u32> = perm.iter().map(|&i| tokens[i]).collect();

    let (out_a, traces_a) = encode_seq(&model, &tokens, false);
    let (out_b, traces_b) = encode_seq(&model, &permuted, false);

    let d = model.cfg.d;
    for (new_row, &old_row) in perm.iter().enumerate() {
        for j in 0..d {
            let a = out_a[old_row * d + j];
            let b = out_b[new_row * d + j];
            assert!((a - b).abs() < 1e-9, "row {old_row}->{new_row} col {j}: {a} vs {b}");
        }
    }
    for (ta, tb) in traces_a[0].alpha_hat.iter().zip(&traces_b[0].alpha_hat) {
        assert!((ta - tb).abs() < 1e-12);
    }
}

#[test]
fn gut_break_and_upperbound_no_break_are_equivalent() {
    let mut c = cfg(ModelKind::Gut);
    c.upperbound_layers = 6;
    // bias the halt head so the threshold is crossed after ~2 layers
    let mut dynamic = Model::<f64>::new(c.clone(), HeadSpec::Classify, "listops", 19);
    zero_params(&mut dynamic, &["block.halt.wh1", "block.halt.wh2", "block.halt.bh1"]);
    set_scalar_param(&mut dynamic, "block.halt.bh2", 3.0);

    c.halt_variant = HaltVariant::UpperboundNoBreak;
    let mut upperbound = Model::<f64>::new(c, HeadSpec::Classify, "listops", 19);
    zero_params(&mut upperbound, &["block.halt.wh1", "block.halt.wh2", "block.halt.bh1"]);
    set_scalar_param(&mut upperbound, "block.halt.bh2", 3.0);

    let tokens = [2u32, 10, 4, 4, 1];
    let mut b_dyn = dynamic.begin(false);
    let enc_dyn = dynamic.encode(&mut b_dyn, &tokens, false);
    let mut b_up = upperbound.begin(false);
    let enc_up = upperbound.encode(&mut b_up, &tokens, false);

    assert!(enc_up.layers_run as f64 > enc_dyn.layers_run as f64);
    assert_eq!(enc_up.layers_run, 6);
    let a = b_dyn.g.data(enc_dyn.seq);
    let b = b_up.g.data(enc_up.seq);
    assert_eq!(a, b, "no-break output must match the dynamic output exactly");
}

#[test]
fn gut_ablated_to_token_halting_matches_ut_parameter_shapes() {
    let mut c = cfg(ModelKind::Gut);
    c.gate = false;
    c.global_halt = false;
    c.transition = false;
    let gut = Model::<f64>::new(c, HeadSpec::Classify, "listops", 23);
    let ut = Model::<f64>::new(cfg(ModelKind::Ut), HeadSpec::Classify, "listops", 23);
    let shapes = |m: &Model<f64>| {
        m.store()
            .iter()
            .map(|p| (p.name.clone(), p.value.dims2()))
            .collect::<Vec<_>>()
    };
    assert_eq!(shapes(&gut), shapes(&ut));
}

#[test]
fn ut_and_gut_parameter_count_is_depth_independent() {
    for kind in [ModelKind::Ut, ModelKind::Gut] {
        let mut a = cfg(kind);
        a.upperbound_layers = 2;
        let mut b = cfg(kind);
        b.upperbound_layers = 9;
        let ma = Model::<f64>::new(a, HeadSpec::Classify, "listops", 1);
        let mb = Model::<f64>::new(b, HeadSpec::Classify, "listops", 1);
        assert_eq!(ma.param_scalar_count(), mb.param_scalar_count());
    }
    // the vanilla transformer does grow with depth
    let mut a = cfg(ModelKind::Transformer);
    a.upperbound_layers = 2;
    let mut b = cfg(ModelKind::Transformer);
    b.upperbound_layers = 4;
    let ma = Model::<f64>::new(a, HeadSpec::Classify, "listops", 1);
    let mb = Model::<f64>::new(b, HeadSpec::Classify, "listops", 1);
    assert!(mb.param_scalar_count() > ma.param_scalar_count());
}

#[test]
fn tlb_chunk_causality_is_bit_exact() {
    let mut c = cfg(ModelKind::Tlb);
    c.chunk_size = 3;
    c.memory_slots = 2;
    c.memory_update_layers = 1;
    c.upperbound_layers = 2;
    let model = Model::<f64>::new(c, HeadSpec::Classify, "listops", 29);
    let tokens_a = [1u32, 2, 3, 4, 5, 6, 7, 8];
    let mut tokens_b = tokens_a;
    tokens_b[6] = 11; // chunk 2 (positions 6..8)
    tokens_b[7] = 0;

    let (out_a, _) = encode_seq(&model, &tokens_a, false);
    let (out_b, _) = encode_seq(&model, &tokens_b, false);
    let d = model.cfg.d;
    // chunks 0 and 1 cover positions 0..6
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&out_a[..6 * d]), bits(&out_b[..6 * d]));
    assert_ne!(bits(&out_a[6 * d..]), bits(&out_b[6 * d..]));
}

#[test]
fn gutlb_single_layer_upperbound_matches_manual_composition() {
    let mut c = cfg(ModelKind::Gutlb);
    c.upperbound_layers = 1;
    c.chunk_size = 3;
    c.memory_slots = 2;
    c.memory_update_layers = 1;
    let model = Model::<f64>::new(c, HeadSpec::Classify, "listops", 31);
    let tokens = [5u32, 3, 1, 0, 2, 9, 7];
    let (got, _) = encode_seq(&model, &tokens, false);

    // manual: per chunk one gated layer (S_1 = H_1 exactly), then the memory
    // update against that chunk output
    let Blocks::Gutlb { self_attn, mem_attn, ff, gate, mem_update, m0, .. } = &model.blocks else {
        unreachable!()
    };
    let mut b = model.begin(false);
    let h0 = model.embed(&mut b, &tokens);
    let self_attn = model.bind_attn(&mut b, self_attn);
    let mem_attn = model.bind_attn(&mut b, mem_attn);
    let ff = model.bind_ff(&mut b, ff);
    let gate = model.bind_gate(&mut b, gate.as_ref().unwrap());
    let mut memory = b.p(&model.store, *m0);
    let plan = ChunkPlan::by_size(tokens.len(), 3);
    let mut outs = Vec::new();
    for &(s, e) in &plan.spans {
        let c0 = b.g.slice_rows(h0, s, e - s);
        let tables = nn::build_tables(&mut b.g, e - s, model.cfg.d / model.cfg.heads, 0, &model.cfg.xpos);
        let a = nn::attention(&mut b.g, &self_attn, c0, c0, &AttnMask::Full, Some(&tables));
        let a = nn::attention(&mut b.g, &mem_attn, a, memory, &AttnMask::Full, None);
        let c1 = nn::gated_feed_forward(&mut b.g, &ff, &gate, c0, a);
        outs.push(c1);
        memory = model.update_memory(&mut b, mem_update, memory, c1);
    }
    let manual = b.g.concat_rows(&outs);
    let want = b.g.data(manual);
    assert_eq!(got.len(), want.len());
    for (x, y) in got.iter().zip(want) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
}

#[test]
fn gutlb_immediate_halt_equals_single_layer_run() {
    let mut c = cfg(ModelKind::Gutlb);
    c.upperbound_layers = 3;
    c.chunk_size = 3;
    c.memory_slots = 2;
    c.memory_update_layers = 1;
    let mut deep = Model::<f64>::new(c.clone(), HeadSpec::Classify, "listops", 37);
    zero_params(&mut deep, &["cell.halt.wh1", "cell.halt.wh2", "cell.halt.bh1"]);
    set_scalar_param(&mut deep, "cell.halt.bh2", 20.0);

    c.upperbound_layers = 1;
    let mut shallow = Model::<f64>::new(c, HeadSpec::Classify, "listops", 37);
    zero_params(&mut shallow, &["cell.halt.wh1", "cell.halt.wh2", "cell.halt.bh1"]);
    set_scalar_param(&mut shallow, "cell.halt.bh2", 20.0);

    let tokens = [5u32, 3, 1, 0, 2, 9, 7];
    let (a, _) = encode_seq(&deep, &tokens, false);
    let (b, _) = encode_seq(&shallow, &tokens, false);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn gutlb_single_chunk_with_inert_memory_reduces_to_gut() {
    let mut cg = cfg(ModelKind::Gutlb);
    cg.upperbound_layers = 3;
    cg.chunk_size = 16; // one chunk for short inputs
    cg.memory_slots = 2;
    cg.memory_update_layers = 1;
    let mut gutlb = Model::<f64>::new(cg, HeadSpec::Classify, "listops", 41);

    let cu = cfg(ModelKind::Gut);
    let gut = Model::<f64>::new(cu, HeadSpec::Classify, "listops", 43);

    // align gutlb's cell with gut's block, then make the memory read a no-op
    let pairs = [
        ("cell.self", "block.attn"),
        ("cell.ff", "block.ff"),
        ("cell.gate", "block.gate"),
        ("cell.halt", "block.halt"),
        ("embed", "embed"),
    ];
    for (dst_prefix, src_prefix) in pairs {
        let src: Vec<(String, Tensor<f64>)> = gut
            .store()
            .iter()
            .filter(|p| p.name.starts_with(src_prefix))
            .map(|p| (p.name.replacen(src_prefix, dst_prefix, 1), p.value.clone()))
            .collect();
        for (name, value) in src {
            for p in gutlb.store_mut().iter_mut() {
                if p.name == name {
                    p.value = value.clone();
                }
            }
        }
    }
    zero_params(&mut gutlb, &["cell.mem.wo"]);

    let tokens = [4u32, 9, 2, 6, 1];
    let (a, traces_a) = encode_seq(&gutlb, &tokens, false);
    let (b, traces_b) = encode_seq(&gut, &tokens, false);
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5, "{x} vs {y}");
    }
    assert_eq!(traces_a.len(), traces_b.len());
    for (ta, tb) in traces_a.iter().zip(&traces_b) {
        for (x, y) in ta.alpha_hat.iter().zip(&tb.alpha_hat) {
            assert!((x - y).abs() < 1e-9);
        }
    }
}

#[test]
fn classify_pooling_semantics() {
    let mut c = cfg(ModelKind::Transformer);
    c.upperbound_layers = 0;
    c.num_classes = 4;
    // mean pooling over identical rows equals either row; end pooling reads
    // the final row
    let model_mean = Model::<f64>::new(c.clone(), HeadSpec::Classify, "listops", 47);
    c.pooling = Pooling::EndToken;
    let model_end = Model::<f64>::new(c, HeadSpec::Classify, "listops", 47);

    let mut b = model_mean.begin(false);
    let f_same = model_mean.forward(&mut b, &ModelInput::Classify { tokens: &[3, 3] });
    let mut b2 = model_mean.begin(false);
    let f_single = model_mean.forward(&mut b2, &ModelInput::Classify { tokens: &[3] });
    assert_eq!(b.g.data(f_same.logits), b2.g.data(f_single.logits));

    let mut b3 = model_end.begin(false);
    let f_end = model_end.forward(&mut b3, &ModelInput::Classify { tokens: &[7, 1, 3] });
    let mut b4 = model_end.begin(false);
    let f_end_single = model_end.forward(&mut b4, &ModelInput::Classify { tokens: &[3] });
    // with zero layers the end representation is the embedding of the last
    // token, so both inputs ending in token 3 agree
    assert_eq!(b3.g.data(f_end.logits), b4.g.data(f_end_single.logits));
}

#[test]
fn lm_logits_are_causal_for_every_kind() {
    for kind in [
        ModelKind::Transformer,
        ModelKind::Ut,
        ModelKind::Gut,
        ModelKind::Tlb,
        ModelKind::Gutlb,
        ModelKind::TlbFixed,
    ] {
        let mut c = cfg(kind);
        c.vocab_size = 5;
        c.chunk_size = 3;
        c.memory_slots = 2;
        c.memory_update_layers = 1;
        c.upperbound_layers = 2;
        c.fixed_chunk_count = 3;
        let model = Model::<f64>::new(c, HeadSpec::Lm, "flipflop", 53);
        let tokens_a = [0u32, 2, 1, 3, 0, 1, 2, 4];
        let mut tokens_b = tokens_a;
        let t = 5;
        tokens_b[t] = 4;

        let mut ba = model.begin(false);
        let fa = model.forward(&mut ba, &ModelInput::Lm { tokens: &tokens_a });
        let mut bb = model.begin(false);
        let fb = model.forward(&mut bb, &ModelInput::Lm { tokens: &tokens_b });
        let v = model.cfg.vocab_size;
        let a = &ba.g.data(fa.logits)[..t * v];
        let b = &bb.g.data(fb.logits)[..t * v];
        let bits = |x: &[f64]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "kind {:?} leaked future tokens", kind);
    }
}

#[test]
fn siamese_features_are_symmetric_under_equal_inputs() {
    let mut c = cfg(ModelKind::Transformer);
    c.num_classes = 7;
    let model = Model::<f64>::new(c, HeadSpec::Siamese, "logic", 59);
    let p = [1u32, 4, 2];
    let mut b = model.begin(false);
    let f_eq = model.forward(&mut b, &ModelInput::Siamese { premise: &p, hypothesis: &p });
    let mut b2 = model.begin(false);
    let f_swap = model.forward(&mut b2, &ModelInput::Siamese { premise: &p, hypothesis: &p });
    assert_eq!(b.g.data(f_eq.logits), b2.g.data(f_swap.logits));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let model = Model::<f32>::new(cfg(ModelKind::Gut), HeadSpec::Classify, "listops", 61);
    let dir = std::env::temp_dir().join(format!("recurt-test-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path: PathBuf = dir.join("model.rckp");
    model.save(&path).unwrap();
    let loaded = Model::<f32>::load(&path).unwrap();
    assert_eq!(loaded.task_tag, "listops");
    assert_eq!(loaded.cfg, model.cfg);
    for (a, b) in model.store().iter().zip(loaded.store().iter()) {
        assert_eq!(a.name, b.name);
        let ab: Vec<u32> = a.value.data().iter().map(|v| v.to_bits()).collect();
        let bb: Vec<u32> = b.value.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(ab, bb, "param {} not bit-exact", a.name);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn full_model_gradients_pass_finite_difference_check() {
    use crate::tensor::grad_check_store;

    // toy sizes: n <= 4, d = 8; alpha_thresh = 1.0 keeps the control flow
    // off the perturbation path
    for kind in [ModelKind::Ut, ModelKind::Gut] {
        let mut c = cfg(kind);
        c.upperbound_layers = 2;
        c.alpha_thresh = 1.0;
        let mut model = Model::<f64>::new(c, HeadSpec::Classify, "listops", 67);
        let tokens = [1u32, 5, 3, 4];
        let label = 2usize;
        let beta = 0.1;

        let loss_of = |m: &Model<f64>| -> f64 {
            let mut b = m.begin(false);
            let f = m.forward(&mut b, &ModelInput::Classify { tokens: &tokens });
            let main = b.g.cross_entropy(f.logits, vec![label], vec![1.0]);
            let total = match f.act {
                Some(act) => {
                    let weighted = b.g.affine_scalar(act, beta, 0.0);
                    b.g.add(main, weighted)
                }
                None => main,
            };
            b.g.scalar_value(total)
        };

        // analytic gradients
        let mut b = model.begin(true);
        let f = model.forward(&mut b, &ModelInput::Classify { tokens: &tokens });
        let main = b.g.cross_entropy(f.logits, vec![label], vec![1.0]);
        let total = match f.act {
            Some(act) => {
                let weighted = b.g.affine_scalar(act, beta, 0.0);
                b.g.add(main, weighted)
            }
            None => main,
        };
        b.g.backward(total).unwrap();
        let analytic = b.grads(model.store());

        let mut tensors: Vec<Tensor<f64>> =
            model.store().iter().map(|p| p.value.clone()).collect();
        let names: Vec<String> = model.store().iter().map(|p| p.name.clone()).collect();
        let err = grad_check_store(
            &mut tensors,
            &analytic,
            |ts| {
                for (i, t) in ts.iter().enumerate() {
                    let _ = &names[i];
                    model.store_mut().get_mut(ParamId(i)).value = t.clone();
                }
                loss_of(&model)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-3, "{kind:?} grad err = {err}");
    }
}

#[test]
fn halting_traces_report_mean_halt_layer() {
    let mut c = cfg(ModelKind::Gut);
    c.upperbound_layers = 5;
    let mut model = Model::<f64>::new(c, HeadSpec::Classify, "listops", 71);
    zero_params(&mut model, &["block.halt.wh1", "block.halt.wh2", "block.halt.bh1"]);
    set_scalar_param(&mut model, "block.halt.bh2", 2.0);
    let (_, traces) = encode_seq(&model, &[1, 2, 3], false);
    assert_eq!(traces.len(), 1);
    let m = traces[0].mean_halt_layer();
    assert!(m >= 1.0 && m <= 5.0, "mean halt layer {m}");
}

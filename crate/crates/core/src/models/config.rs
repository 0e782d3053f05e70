use serde::{Deserialize, Serialize};

use crate::nn::XPosConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Transformer,
    Ut,
    Gut,
    Tlb,
    Gutlb,
    TlbFixed,
}

impl ModelKind {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "transformer" => ModelKind::Transformer,
            "ut" => ModelKind::Ut,
            "gut" => ModelKind::Gut,
            "tlb" => ModelKind::Tlb,
            "gutlb" => ModelKind::Gutlb,
            "tlb_fixed" => ModelKind::TlbFixed,
            _ => return None,
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::Transformer => "transformer",
            ModelKind::Ut => "ut",
            ModelKind::Gut => "gut",
            ModelKind::Tlb => "tlb",
            ModelKind::Gutlb => "gutlb",
            ModelKind::TlbFixed => "tlb_fixed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Mean,
    EndToken,
}

/// Runtime-benchmark halting variants. `UpperboundNoBreak` keeps the same
/// halting trace and output as `Dynamic` but runs every layer to the
/// upperbound; `NoHalt` drops the halting computation entirely and returns
/// the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HaltVariant {
    Dynamic,
    UpperboundNoBreak,
    NoHalt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub d: usize,
    pub d_ff: usize,
    pub d_gff: usize,
    pub heads: usize,
    /// Hard cap on recurrent depth (L); dynamic halting may stop earlier.
    pub upperbound_layers: usize,
    pub alpha_thresh: f64,
    /// Ablation switches; only meaningful for gut/gutlb.
    pub global_halt: bool,
    pub gate: bool,
    pub transition: bool,
    pub halt_variant: HaltVariant,
    /// Chunk size g for tlb/gutlb; tlb_fixed ignores it.
    pub chunk_size: usize,
    pub memory_slots: usize,
    /// Memory-update depth U.
    pub memory_update_layers: usize,
    /// tlb_fixed only: number of chunks, truncated to n for short inputs.
    pub fixed_chunk_count: usize,
    pub pooling: Pooling,
    pub xpos: XPosConfig,
}

impl ModelConfig {
    /// Desk-scale defaults; the appendix-scale settings stay expressible by
    /// overriding fields (upperbound 15, chunk 10, slots 10, alpha 0.999 are
    /// already the paper values).
    pub fn base(kind: ModelKind, vocab_size: usize, num_classes: usize) -> Self {
        let d = 64;
        ModelConfig {
            kind,
            vocab_size,
            num_classes,
            d,
            d_ff: 2 * d,
            d_gff: 2 * d, // d_gff = d_ff by default
            heads: 4,
            upperbound_layers: match kind {
                ModelKind::Transformer => 4,
                ModelKind::Ut | ModelKind::Gut => 8,
                ModelKind::Tlb | ModelKind::Gutlb | ModelKind::TlbFixed => 2,
            },
            alpha_thresh: 0.999,
            global_halt: true,
            gate: true,
            transition: true,
            halt_variant: HaltVariant::Dynamic,
            chunk_size: 10,
            memory_slots: 10,
            memory_update_layers: 2,
            fixed_chunk_count: 5,
            pooling: match kind {
                ModelKind::Gut | ModelKind::Gutlb => Pooling::EndToken,
                _ => Pooling::Mean,
            },
            xpos: XPosConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.d % self.heads != 0 {
            return Err(format!("heads {} must divide d {}", self.heads, self.d));
        }
        if self.xpos.rotate && (self.d / self.heads) % 2 != 0 {
            return Err("head width must be even for rotary positions".into());
        }
        if !(0.0 < self.alpha_thresh && self.alpha_thresh <= 1.0) {
            return Err(format!("alpha_thresh must be in (0,1], got {}", self.alpha_thresh));
        }
        if self.upperbound_layers == 0 && self.kind != ModelKind::Transformer {
            return Err("upperbound_layers must be >= 1".into());
        }
        match self.kind {
            ModelKind::Tlb | ModelKind::Gutlb => {
                if self.chunk_size == 0 || self.memory_slots == 0 || self.memory_update_layers == 0 {
                    return Err("tlb/gutlb need chunk_size, memory_slots, memory_update_layers >= 1".into());
                }
            }
            ModelKind::TlbFixed => {
                if self.fixed_chunk_count == 0 || self.memory_slots == 0 {
                    return Err("tlb_fixed needs fixed_chunk_count and memory_slots >= 1".into());
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// True when this configuration computes halting probabilities at all.
    pub fn has_halting(&self) -> bool {
        matches!(self.kind, ModelKind::Ut | ModelKind::Gut | ModelKind::Gutlb)
            && self.halt_variant != HaltVariant::NoHalt
    }
}

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::HarnessError;
use crate::exec::ExecMode;
use crate::models::{HaltVariant, Model};
use crate::tensor::Scalar;

use super::config::RunConfig;
use super::data::LoadedSplit;
use super::train::{batch_plan, head_spec_for, train_step, AdamW};

/// Halting-runtime benchmark over the three variants: the dynamic model,
/// the same model without the hard stop, and the model with the halting
/// machinery removed entirely.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub run: RunConfig,
    pub upperbounds: Vec<usize>,
    /// Training epochs timed per setting; the summary reports their mean.
    pub epochs: usize,
    /// Optional cap on samples per epoch so desk-scale timings stay short.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples_per_epoch: Option<usize>,
}

pub const BENCH_VARIANTS: [(&str, HaltVariant); 3] = [
    ("gut", HaltVariant::Dynamic),
    ("gut_upperbound", HaltVariant::UpperboundNoBreak),
    ("gut_nohalt", HaltVariant::NoHalt),
];

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub variant: String,
    pub upperbound: usize,
    pub epoch: usize,
    pub seconds: f64,
    pub mean_layers_run: f64,
    pub batch_hash: u64,
}

#[derive(Debug, Clone)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    /// Mean epoch seconds for one (variant, upperbound) cell.
    pub fn mean_seconds(&self, variant: &str, upperbound: usize) -> f64 {
        let cells: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.variant == variant && r.upperbound == upperbound)
            .map(|r| r.seconds)
            .collect();
        cells.iter().sum::<f64>() / cells.len().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,upperbound,epoch,seconds,mean_layers_run,batch_hash\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.3},{}\n",
                r.variant, r.upperbound, r.epoch, r.seconds, r.mean_layers_run, r.batch_hash
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Run the benchmark. All variants at all upperbounds consume identical
/// batch streams (asserted by hash); non-halting parameters are identical
/// across variants because initialization is keyed by parameter name.
pub fn bench_halt<T: Scalar>(cfg: &BenchConfig, train_data: &LoadedSplit) -> Result<BenchTable, HarnessError> {
    cfg.run.validate()?;
    let n = cfg
        .samples_per_epoch
        .unwrap_or(train_data.prepared.len())
        .min(train_data.prepared.len());
    let samples = &train_data.prepared[..n];
    let mode = if cfg.run.deterministic { ExecMode::Sequential } else { ExecMode::Parallel };

    let mut rows = Vec::new();
    let mut reference_hashes: Option<Vec<u64>> = None;
    for &upper in &cfg.upperbounds {
        for (name, variant) in BENCH_VARIANTS {
            let mut run = cfg.run.clone();
            run.model.upperbound_layers = upper;
            run.model.halt_variant = variant;
            let mut model = Model::<T>::new(
                run.model.clone(),
                head_spec_for(run.task),
                run.task.name(),
                run.seed,
            );
            let mut opt = AdamW::new(model.store());
            let mut step = 0usize;
            let mut hashes = Vec::with_capacity(cfg.epochs);
            for epoch in 0..cfg.epochs {
                let (batches, hash) = batch_plan(n, run.batch_size, run.seed, epoch as u64);
                hashes.push(hash);
                let t0 = Instant::now();
                let mut layer_sum = 0.0;
                let mut layer_count = 0usize;
                for batch in &batches {
                    step += 1;
                    train_step(&mut model, &mut opt, &run, samples, batch, step, mode)?;
                    // cheap proxy for adaptive depth: re-measure on the first
                    // batch element
                    let p = &samples[batch[0]];
                    let mut b = model.begin(false);
                    let fwd = super::evaluate::forward_for(&model, &mut b, p);
                    layer_sum += fwd.layers_run as f64;
                    layer_count += 1;
                }
                let seconds = t0.elapsed().as_secs_f64();
                rows.push(BenchRow {
                    variant: name.to_string(),
                    upperbound: upper,
                    epoch,
                    seconds,
                    mean_layers_run: layer_sum / layer_count.max(1) as f64,
                    batch_hash: hash,
                });
            }
            match &reference_hashes {
                None => reference_hashes = Some(hashes),
                Some(reference) => assert_eq!(
                    reference, &hashes,
                    "benchmark variants must consume identical batch streams"
                ),
            }
        }
    }
    Ok(BenchTable { rows })
}

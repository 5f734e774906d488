//! Input-ablation matrix: one training run per variant with identical seeds.

use std::fmt::Write as _;
use std::path::Path;

use serde_json::{json, Value};

use super::dataset::load_split;
use super::evaluate::{evaluate_params, EvalOptions};
use super::train::{train, TrainConfig};
use crate::error::Result;
use crate::io;
use crate::metrics::{delta_key, MetricsReport};
use crate::nn::Variant;

pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: MetricsReport,
    /// Batch hashes of every epoch, flattened; equal across rows when the data order matches.
    pub batch_hashes: Vec<String>,
    pub checkpoint_sha256: String,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub split: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,rmse_m,rel,mae_m");
        if let Some(r) = self.rows.first() {
            for d in &r.metrics.delta {
                write!(s, ",{}", delta_key(d.threshold)).unwrap();
            }
        }
        s.push_str(",pixel_count\n");
        for r in &self.rows {
            let m = &r.metrics;
            write!(s, "{},{},{},{}", r.variant.name(), m.rmse, m.rel, m.mae).unwrap();
            for d in &m.delta {
                write!(s, ",{}", d.percent).unwrap();
            }
            writeln!(s, ",{}", m.pixel_count).unwrap();
        }
        s
    }

    pub fn to_json(&self) -> Value {
        json!({
            "split": self.split,
            "rows": self.rows.iter().map(|r| json!({
                "variant": r.variant.name(),
                "metrics": r.metrics.to_json(),
                "checkpoint_sha256": r.checkpoint_sha256,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Trains and evaluates every variant of `base` on `base.eval_split`. Each run
/// writes into `out_dir/<variant>`; the table goes to `out_dir`.
pub fn ablate(base: &TrainConfig, out_dir: &Path) -> Result<AblationTable> {
    base.validate()?;
    let eval_set = load_split(&base.dataset, &base.eval_split, &base.rel)?;
    let mut rows = Vec::with_capacity(Variant::ALL.len());
    for variant in Variant::ALL {
        let config = TrainConfig {
            variant,
            output_dir: out_dir.join(variant.name()),
            ..base.clone()
        };
        let outcome = train(&config)?;
        let opts = EvalOptions {
            split: base.eval_split.clone(),
            region: base.eval_region,
            variant,
            rel: base.rel,
            ..EvalOptions::default()
        };
        let metrics = evaluate_params(&outcome.params, &eval_set, &opts)?.aggregate;
        log::info!("ablation {}: rmse {:.5}", variant.name(), metrics.rmse);
        rows.push(AblationRow {
            variant,
            metrics,
            batch_hashes: outcome
                .manifest
                .epochs
                .iter()
                .flat_map(|e| e.batch_hashes.iter().cloned())
                .collect(),
            checkpoint_sha256: outcome.manifest.checkpoint_sha256,
        });
    }
    let table = AblationTable {
        split: base.eval_split.clone(),
        rows,
    };
    io::atomic_write(&out_dir.join(ABLATION_CSV), table.csv().as_bytes())?;
    io::write_json(&out_dir.join(ABLATION_JSON), &table.to_json())?;
    Ok(table)
}

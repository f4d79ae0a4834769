//! Per-utterance evaluation of a model on a manifest split.

use std::io::Write;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetManifest, ManifestItem, Split};
use crate::error::{invalid, Result};
use crate::metrics::{seg_snr, si_sdr, vad_metrics};
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

pub const VAD_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub si_sdr_db: f64,
    pub si_sdr_improvement_db: f64,
    pub seg_snr_db: f64,
    pub vad_accuracy: f64,
    pub vad_auc: Option<f64>,
}

/// Means over rows; the AUC mean skips rows where it is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub utterances: usize,
    pub si_sdr_db: f64,
    pub si_sdr_improvement_db: f64,
    pub seg_snr_db: f64,
    pub vad_accuracy: f64,
    pub vad_auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub checkpoint_id: String,
    pub rows: Vec<EvalRow>,
    pub summary: EvalSummary,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(config: &ModelConfig) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))
}

impl EvalSummary {
    pub fn from_rows(rows: &[EvalRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(invalid!("nothing to summarize"));
        }
        let n = rows.len() as f64;
        let mean = |f: fn(&EvalRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
        let aucs: Vec<f64> = rows.iter().filter_map(|r| r.vad_auc).collect();
        Ok(Self {
            utterances: rows.len(),
            si_sdr_db: mean(|r| r.si_sdr_db),
            si_sdr_improvement_db: mean(|r| r.si_sdr_improvement_db),
            seg_snr_db: mean(|r| r.seg_snr_db),
            vad_accuracy: mean(|r| r.vad_accuracy),
            vad_auc: (!aucs.is_empty()).then(|| aucs.iter().sum::<f64>() / aucs.len() as f64),
        })
    }
}

impl EvalReport {
    /// One JSON line per utterance followed by a summary line.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> Result<()> {
        for row in &self.rows {
            let mut v = serde_json::to_value(row)?;
            v["kind"] = "utterance".into();
            serde_json::to_writer(&mut out, &v)?;
            out.write_all(b"\n")?;
        }
        let mut v = serde_json::to_value(&self.summary)?;
        v["kind"] = "summary".into();
        v["config_hash"] = self.config_hash.clone().into();
        v["checkpoint_id"] = self.checkpoint_id.clone().into();
        serde_json::to_writer(&mut out, &v)?;
        out.write_all(b"\n")?;
        Ok(())
    }
}

/// Evaluates `model` on every item of `split`, in manifest order.
pub fn evaluate<S: Scalar>(
    model: &ModelParams<S>,
    manifest: &DatasetManifest,
    split: Split,
    checkpoint_id: &str,
) -> Result<EvalReport> {
    let frame = model.config.frame_config()?;
    let items: Vec<&ManifestItem> = manifest.split(split).collect();
    let row = |item: &ManifestItem| -> Result<EvalRow> {
        let ex = manifest.load(item, &frame, model.config.mask_clip)?;
        let (enhanced, vad) = model.enhance(&ex.noisy)?;
        let before = si_sdr(&ex.clean.samples, &ex.noisy.samples)?;
        let after = si_sdr(&ex.clean.samples, &enhanced.samples)?;
        let vm = vad_metrics(&ex.vad, &vad.0, VAD_THRESHOLD)?;
        Ok(EvalRow {
            id: item.id.clone(),
            si_sdr_db: after,
            si_sdr_improvement_db: after - before,
            seg_snr_db: seg_snr(&ex.clean.samples, &enhanced.samples)?,
            vad_accuracy: vm.accuracy,
            vad_auc: vm.auc,
        })
    };
    // Workers take interleaved items; rows are reassembled in manifest order.
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len()).max(1);
    let mut slots: Vec<Option<Result<EvalRow>>> = (0..items.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let (items, row) = (&items, &row);
                scope.spawn(move || (w..items.len()).step_by(workers).map(|i| (i, row(items[i]))).collect::<Vec<_>>())
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    let rows = slots.into_iter().map(|r| r.expect("every item evaluated")).collect::<Result<Vec<_>>>()?;
    if rows.is_empty() {
        return Err(invalid!("split {split:?} of the manifest is empty"));
    }
    Ok(EvalReport {
        config_hash: config_hash(&model.config),
        checkpoint_id: checkpoint_id.to_string(),
        summary: EvalSummary::from_rows(&rows)?,
        rows,
    })
}

//! Training runs, evaluation and ablation sweeps over a dataset.

use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::config::{DataConfig, RunConfig};
use crate::data::{load_dataset, split_sequences, synth_dataset, Dataset, VideoSequence};
use crate::error::{Error, Result};
use crate::metrics::{format_row, segmentation_metrics, FrameMetrics, MetricsReport, SequenceMetrics};
use crate::model::{ModelConfig, Stpfnet};
use crate::msff::Pooling;
use crate::propagation::propagate;
use crate::tensor::Tensor;
use crate::train::{sampler_seed, train, TrainReport};

/// Loads `cfg.root`, or generates the synthetic benchmark when no root is set,
/// and pads every sequence to multiples of `stride`.
pub fn load_data(cfg: &DataConfig, stride: usize) -> Result<Dataset> {
    let mut data = match &cfg.root {
        Some(root) => load_dataset(root, stride)?,
        None => {
            let synth = synth_dataset(&cfg.synth)?;
            Dataset {
                sequences: synth
                    .sequences
                    .into_iter()
                    .map(|s| s.pad_to(stride))
                    .collect::<Result<_>>()?,
                train: synth.train,
                val: synth.val,
                warnings: Vec::new(),
            }
        }
    };
    if cfg.resplit || (data.train.is_empty() && data.val.is_empty()) {
        let names: Vec<String> = data.sequences.iter().map(|s| s.name.clone()).collect();
        let (train, val) = split_sequences(&names, cfg.split_ratio, cfg.split_seed)?;
        data.train = train;
        data.val = val;
    }
    Ok(data)
}

/// Builds a model from `cfg`, trains it on the training split and captures it.
pub fn train_run(cfg: &RunConfig, data: &Dataset, dump_dir: Option<&Path>) -> Result<(Checkpoint, TrainReport)> {
    let mut model = Stpfnet::new(&cfg.model, cfg.seed)?;
    let seqs = data.subset(&data.train);
    if seqs.is_empty() && cfg.train.steps > 0 {
        return Err(Error::validation("the training split is empty"));
    }
    let report = train(&mut model, &seqs, &cfg.train, cfg.seed, dump_dir)?;
    let ck = Checkpoint::new(&model, cfg, report.losses.len(), sampler_seed(cfg.seed), report.rng_word_pos);
    Ok((ck, report))
}

/// Metrics and the predictions behind them.
pub struct Evaluation {
    pub report: MetricsReport,
    /// Per sequence: probability maps of frames `2..=N` at original resolution.
    pub predictions: Vec<(String, Vec<Tensor>)>,
}

/// Propagates each sequence from its first ground-truth mask and scores
/// frames `2..=N`.
pub fn evaluate(model: &Stpfnet, sequences: &[&VideoSequence], threshold: f64, method: &str) -> Result<Evaluation> {
    if sequences.is_empty() {
        return Err(Error::validation("nothing to evaluate: the split is empty"));
    }
    let mut rows = Vec::with_capacity(sequences.len());
    let mut predictions = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let gts = seq
            .original_masks()
            .ok_or_else(|| Error::validation(format!("sequence {} has no ground truth", seq.name)))??;
        let preds = propagate(model, seq)?;
        let frames = preds
            .iter()
            .zip(&gts[1..])
            .map(|(p, g)| segmentation_metrics(p, g, threshold))
            .collect::<Result<Vec<_>>>()?;
        rows.push(SequenceMetrics {
            name: seq.name.clone(),
            frames: frames.len(),
            metrics: FrameMetrics::mean(&frames).expect("at least one predicted frame"),
        });
        predictions.push((seq.name.clone(), preds));
    }
    Ok(Evaluation {
        report: MetricsReport::new(method, rows),
        predictions,
    })
}

/// Trains with `cfg` and evaluates on the validation split.
pub fn train_and_evaluate(cfg: &RunConfig, data: &Dataset, method: &str) -> Result<(Checkpoint, TrainReport, MetricsReport)> {
    let (ck, report) = train_run(cfg, data, None)?;
    let eval = evaluate(&ck.model()?, &data.subset(&data.val), cfg.eval.threshold, method)?;
    Ok((ck, report, eval.report))
}

/// One configuration of an ablation sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Variant {
    pub label: String,
    pub model: ModelConfig,
}

fn variant(label: &str, base: &ModelConfig, edit: impl FnOnce(&mut ModelConfig)) -> Variant {
    let mut model = base.clone();
    edit(&mut model);
    Variant {
        label: label.to_string(),
        model,
    }
}

/// Variants along a named axis:
///
/// - `modules`: baseline, +msff, +sfm, full
/// - `pooling`: max, avg, both
/// - `tap`: encoder taps 2, 3, 4
/// - `mask`: prior-mask mapping off and on
pub fn axis_variants(axis: &str, base: &ModelConfig) -> Result<Vec<Variant>> {
    Ok(match axis {
        "modules" => [(false, false), (false, true), (true, false), (true, true)]
            .into_iter()
            .map(|(sfm, msff)| {
                let mut m = base.clone();
                m.sfm = sfm;
                m.msff = msff;
                variant(m.variant_name(), &m, |_| {})
            })
            .collect(),
        "pooling" => [Pooling::Max, Pooling::Avg, Pooling::Both]
            .into_iter()
            .map(|p| variant(&format!("pool-{p}"), base, |m| m.pooling = p))
            .collect(),
        "tap" => (2..=4).map(|t| variant(&format!("+{t}"), base, |m| m.encoder_tap = t)).collect(),
        "mask" => [false, true]
            .into_iter()
            .map(|on| variant(if on { "*mask" } else { "no-mask" }, base, |m| m.prior_mask_mapping = on))
            .collect(),
        other => {
            return Err(Error::validation(format!(
                "unknown ablation axis {other:?} (expected modules, pooling, tap or mask)"
            )))
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: Variant,
    /// Macro metrics of each seed's run.
    pub per_seed: Vec<FrameMetrics>,
    /// Mean over seeds.
    pub mean: FrameMetrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant.label == label)
    }

    /// Toggle columns followed by the four metrics.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("Variant\tSFM\tMSFF\tPooling\tTap\tMask\tDice\tIou\tRecall\tMAE\n");
        let yes = |b: bool| if b { "yes" } else { "no" };
        for r in &self.rows {
            let m = &r.variant.model;
            let label = format!(
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.variant.label,
                yes(m.sfm),
                yes(m.msff),
                m.pooling,
                m.encoder_tap,
                yes(m.prior_mask_mapping)
            );
            out.push_str(&format_row(&label, &r.mean));
            out.push('\n');
        }
        out
    }
}

/// Trains and evaluates every variant once per seed. Each seed sets the run
/// seed; for a generated benchmark it also offsets the benchmark seed, so
/// every seed sees a fresh draw of sequences.
pub fn ablate(base: &RunConfig, variants: &[Variant], seeds: &[u64]) -> Result<AblationTable> {
    ablate_with(base, variants, seeds, |cfg, data, label| {
        train_and_evaluate(cfg, data, label).map(|(_, _, report)| report)
    })
}

/// [`ablate`] with a caller-supplied train-and-evaluate step, e.g. one that
/// reuses results of identical configurations.
pub fn ablate_with<F>(base: &RunConfig, variants: &[Variant], seeds: &[u64], mut run: F) -> Result<AblationTable>
where
    F: FnMut(&RunConfig, &Dataset, &str) -> Result<MetricsReport>,
{
    if seeds.is_empty() || variants.is_empty() {
        return Err(Error::validation("ablation needs at least one seed and one variant"));
    }
    let mut rows: Vec<AblationRow> = variants
        .iter()
        .map(|v| AblationRow {
            variant: v.clone(),
            per_seed: Vec::new(),
            mean: FrameMetrics::default(),
        })
        .collect();
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.seed = seed;
        if cfg.data.root.is_none() {
            cfg.data.synth.seed = base.data.synth.seed.wrapping_add(seed);
        }
        let data = load_data(&cfg.data, cfg.model.encoder.total_stride())?;
        for row in &mut rows {
            cfg.model = row.variant.model.clone();
            log::info!("ablation: {} seed {seed}", row.variant.label);
            row.per_seed.push(run(&cfg, &data, &row.variant.label)?.mean);
        }
    }
    for row in &mut rows {
        row.mean = FrameMetrics::mean(&row.per_seed).expect("seeds non-empty");
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_have_expected_rows() {
        let base = ModelConfig::default();
        let labels = |axis| {
            axis_variants(axis, &base)
                .unwrap()
                .into_iter()
                .map(|v| v.label)
                .collect::<Vec<_>>()
        };
        assert_eq!(labels("modules"), ["baseline", "+msff", "+sfm", "full"]);
        assert_eq!(labels("pooling"), ["pool-max", "pool-avg", "pool-both"]);
        assert_eq!(labels("tap"), ["+2", "+3", "+4"]);
        assert_eq!(labels("mask"), ["no-mask", "*mask"]);
        assert!(axis_variants("bogus", &base).is_err());
    }
}

//! Per-slot accuracy, confusion analysis and latency benchmarking.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::corpus::Sample;
use crate::gloss::frame_to_gloss;
use crate::model::{Layout, Model, ModelError, Predictor};
use crate::schema::{index_to_label, vocabulary, CsfFrame, SlotName};
use crate::tensor::{num_threads, set_num_threads};
use crate::tokenizer::{Encoding, TokenizerModel};

pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation set is empty")]
    Empty,
    #[error("{gold} gold frames but {predicted} predictions")]
    LengthMismatch { gold: usize, predicted: usize },
    #[error("benchmark needs at least 2 runs, got {0}")]
    TooFewRuns(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Per-slot accuracy in canonical slot order.
    pub accuracies: [f64; 9],
    pub average: f64,
    /// `confusion[slot][gold][predicted]` counts.
    pub confusion: Vec<Vec<Vec<u64>>>,
}

/// One off-diagonal confusion cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusedPair {
    pub gold: &'static str,
    pub predicted: &'static str,
    pub count: u64,
}

impl EvalReport {
    pub fn from_predictions(gold: &[CsfFrame], predicted: &[CsfFrame]) -> Result<Self, EvalError> {
        if gold.is_empty() {
            return Err(EvalError::Empty);
        }
        if gold.len() != predicted.len() {
            return Err(EvalError::LengthMismatch {
                gold: gold.len(),
                predicted: predicted.len(),
            });
        }
        let mut confusion: Vec<Vec<Vec<u64>>> = SlotName::ALL
            .iter()
            .map(|s| vec![vec![0; s.num_classes()]; s.num_classes()])
            .collect();
        for (g, p) in gold.iter().zip(predicted) {
            for slot in SlotName::ALL {
                confusion[slot.index()][g.index(slot)][p.index(slot)] += 1;
            }
        }
        let n = gold.len() as f64;
        let accuracies: [f64; 9] = std::array::from_fn(|s| {
            let m = &confusion[s];
            (0..m.len()).map(|i| m[i][i]).sum::<u64>() as f64 / n
        });
        let average = accuracies.iter().sum::<f64>() / 9.0;
        Ok(EvalReport {
            samples: gold.len(),
            accuracies,
            average,
            confusion,
        })
    }

    pub fn accuracy(&self, slot: SlotName) -> f64 {
        self.accuracies[slot.index()]
    }

    /// The `k` largest off-diagonal cells of `slot`, by count descending and
    /// then by (gold, predicted) label order.
    pub fn confusion_pairs(&self, slot: SlotName, k: usize) -> Vec<ConfusedPair> {
        let m = &self.confusion[slot.index()];
        let mut cells: Vec<(u64, usize, usize)> = Vec::new();
        for (g, row) in m.iter().enumerate() {
            for (p, &c) in row.iter().enumerate() {
                if g != p && c > 0 {
                    cells.push((c, g, p));
                }
            }
        }
        cells.sort_by(|a, b| b.0.cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
        cells
            .into_iter()
            .take(k)
            .map(|(count, g, p)| ConfusedPair {
                gold: index_to_label(slot, g).expect("confusion index"),
                predicted: index_to_label(slot, p).expect("confusion index"),
                count,
            })
            .collect()
    }

    /// Aligned per-slot accuracy table followed by the top confusions.
    pub fn render_text(&self, top_k: usize) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10} {:>7} {:>9}", "slot", "classes", "accuracy");
        for slot in SlotName::ALL {
            let _ = writeln!(
                out,
                "{:<10} {:>7} {:>8.2}%",
                slot.as_str(),
                vocabulary(slot).len(),
                100.0 * self.accuracy(slot)
            );
        }
        let total: usize = SlotName::ALL.iter().map(|s| s.num_classes()).sum();
        let _ = writeln!(out, "{:<10} {:>7} {:>8.2}%", "average", total, 100.0 * self.average);
        let _ = writeln!(out, "samples: {}", self.samples);
        for slot in SlotName::ALL {
            let pairs = self.confusion_pairs(slot, top_k);
            if pairs.is_empty() {
                continue;
            }
            let list: Vec<String> = pairs
                .iter()
                .map(|p| format!("{}->{} ({})", p.gold, p.predicted, p.count))
                .collect();
            let _ = writeln!(out, "confused {}: {}", slot.as_str(), list.join(", "));
        }
        out
    }
}

/// Predicted frames for `encodings`, batched.
pub fn predict_encoded(model: &Model, encodings: &[Encoding]) -> Result<Vec<CsfFrame>, EvalError> {
    let mut out = Vec::with_capacity(encodings.len());
    for chunk in encodings.chunks(EVAL_BATCH) {
        let fwd = model.forward(chunk, Layout::Trimmed)?;
        for r in 0..chunk.len() {
            out.push(fwd.frame(r).map_err(ModelError::from)?);
        }
    }
    Ok(out)
}

pub fn evaluate(model: &Model, tokenizer: &TokenizerModel, samples: &[Sample]) -> Result<EvalReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty);
    }
    let max_len = model.config().max_len;
    let encodings: Vec<Encoding> = samples.iter().map(|s| tokenizer.encode(&s.text, max_len)).collect();
    let predicted = predict_encoded(model, &encodings)?;
    let gold: Vec<CsfFrame> = samples.iter().map(|s| s.labels).collect();
    EvalReport::from_predictions(&gold, &predicted)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub runs: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub std_ms: f64,
    pub throughput_per_s: f64,
}

/// Nearest-rank percentile: the sorted sample at index `ceil(p/100 * n) - 1`.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let rank = ((p / 100.0) * n as f64).ceil() as usize;
    sorted[rank.clamp(1, n) - 1]
}

impl BenchReport {
    /// Statistics over per-run durations; `std` uses the population formula.
    pub fn from_durations(durations: &[Duration]) -> Result<Self, EvalError> {
        if durations.len() < 2 {
            return Err(EvalError::TooFewRuns(durations.len()));
        }
        let mut ms: Vec<f64> = durations.iter().map(|d| d.as_secs_f64() * 1e3).collect();
        let n = ms.len() as f64;
        let total: f64 = ms.iter().sum();
        let mean = total / n;
        let var = ms.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        ms.sort_by(f64::total_cmp);
        Ok(BenchReport {
            runs: ms.len(),
            mean_ms: mean,
            p50_ms: nearest_rank(&ms, 50.0),
            p95_ms: nearest_rank(&ms, 95.0),
            std_ms: var.sqrt(),
            throughput_per_s: if total > 0.0 { n / (total / 1e3) } else { f64::INFINITY },
        })
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>12}", "metric", "value");
        let _ = writeln!(out, "{:<12} {:>9.3} ms", "mean", self.mean_ms);
        let _ = writeln!(out, "{:<12} {:>9.3} ms", "p50", self.p50_ms);
        let _ = writeln!(out, "{:<12} {:>9.3} ms", "p95", self.p95_ms);
        let _ = writeln!(out, "{:<12} {:>9.3} ms", "std", self.std_ms);
        let _ = writeln!(out, "{:<12} {:>9.1} /s", "throughput", self.throughput_per_s);
        let _ = writeln!(out, "{:<12} {:>12}", "runs", self.runs);
        out
    }
}

/// What each timed benchmark run covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BenchScope {
    /// Encode, forward, argmax and GLOSS conversion.
    EndToEnd,
    /// Forward and argmax on a pre-encoded input.
    ForwardOnly,
}

/// Times `runs` single-threaded inferences on `text` after `warmup`
/// untimed ones.
pub fn benchmark(
    predictor: &Predictor,
    text: &str,
    runs: usize,
    warmup: usize,
    scope: BenchScope,
) -> Result<BenchReport, EvalError> {
    if runs < 2 {
        return Err(EvalError::TooFewRuns(runs));
    }
    let saved = num_threads();
    set_num_threads(1);
    let encoded = predictor.encode(text);
    let once = || -> Result<(), EvalError> {
        match scope {
            BenchScope::EndToEnd => {
                let frame = predictor.predict(text)?;
                std::hint::black_box(frame_to_gloss(&frame));
            }
            BenchScope::ForwardOnly => {
                let out = predictor.model().forward(std::slice::from_ref(&encoded), Layout::Trimmed)?;
                std::hint::black_box(out.argmax(0));
            }
        }
        Ok(())
    };
    let result = (|| {
        for _ in 0..warmup {
            once()?;
        }
        let mut durations = Vec::with_capacity(runs);
        for _ in 0..runs {
            let start = Instant::now();
            once()?;
            durations.push(start.elapsed());
        }
        BenchReport::from_durations(&durations)
    })();
    set_num_threads(saved);
    result
}

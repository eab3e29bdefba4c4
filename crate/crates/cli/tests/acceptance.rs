//! One PASS/FAIL line per acceptance criterion. Runs as a plain binary
//! (`harness = false`) and exits non-zero if any criterion fails.
//!
//! Set `CSF_FULL_SCALE=1` to also train the default-size model on the full
//! dataset (hours on one core); otherwise that line reports SKIP and the
//! persistence check runs on the desk model.

use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use csf_core::corpus::{expand, DatasetSplit, ExpandConfig, TemplateBank, REFERENCE_SENTENCES};
use csf_core::eval::{benchmark, BenchReport, BenchScope};
use csf_core::gloss::frame_to_gloss;
use csf_core::model::{Model, ModelConfig, Predictor};
use csf_core::schema::{CsfFrame, SlotName};
use csf_core::store::{self, Precision};
use csf_core::tensor::gradcheck::{run_suite, TOLERANCE_F32, TOLERANCE_F64, TRIALS};
use csf_core::tokenizer::{self, TokenizerModel, UNK};
use csf_core::trainer::{train, TrainConfig, TrainOutcome};

enum Verdict {
    Pass,
    Fail,
    Skip,
}

struct Ledger {
    failed: usize,
}

impl Ledger {
    fn report(&mut self, name: &str, verdict: Verdict, detail: String) {
        let tag = match verdict {
            Verdict::Pass => "PASS",
            Verdict::Fail => {
                self.failed += 1;
                "FAIL"
            }
            Verdict::Skip => "SKIP",
        };
        println!("{tag} {name}: {detail}");
    }

    fn check(&mut self, name: &str, ok: bool, detail: String) {
        self.report(name, if ok { Verdict::Pass } else { Verdict::Fail }, detail);
    }
}

fn gradcheck(l: &mut Ledger) {
    let start = Instant::now();
    let f32s = run_suite::<f32>(TRIALS, 1);
    let f64s = run_suite::<f64>(TRIALS, 2);
    let elapsed = start.elapsed();
    let worst = |r: &[csf_core::tensor::gradcheck::CaseResult]| {
        r.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).map(|c| (c.name, c.worst)).unwrap()
    };
    let (n32, w32) = worst(&f32s);
    let (n64, w64) = worst(&f64s);
    let trials_ok = f32s.iter().chain(&f64s).all(|c| c.trials >= 20);
    l.check(
        "gradcheck",
        w32 < TOLERANCE_F32 && w64 < TOLERANCE_F64 && trials_ok && elapsed < Duration::from_secs(60),
        format!(
            "{} ops x {TRIALS} trials; worst f32 {w32:.2e} ({n32}), worst f64 {w64:.2e} ({n64}); {:.1}s",
            f32s.len(),
            elapsed.as_secs_f64()
        ),
    );
}

fn overfit(l: &mut Ledger, desk: &DatasetSplit) {
    let start = Instant::now();
    let samples = desk.train[..50].to_vec();
    let toy = DatasetSplit {
        train: samples.clone(),
        val: samples,
    };
    let texts: Vec<&str> = toy.train.iter().map(|s| s.text.as_str()).collect();
    let tok = tokenizer::train(&texts, 1000).unwrap().model;
    let model = ModelConfig {
        vocab: 1000,
        ..ModelConfig::desk()
    };
    let cfg = TrainConfig {
        batch: 10,
        max_lr: 1e-3,
        epochs: 30,
        ..TrainConfig::default()
    };
    let out = train(&model, &cfg, &toy, &tok, &mut |_| {}).unwrap();
    let elapsed = start.elapsed();
    let first = out.history.epochs.iter().position(|r| r.average == 1.0).map(|i| i + 1);
    l.check(
        "overfit",
        first.is_some() && elapsed < Duration::from_secs(120),
        format!(
            "50 samples, first 100% epoch {first:?} of 30, best average {:.4}; {:.1}s",
            out.best_report.average,
            elapsed.as_secs_f64()
        ),
    );
}

fn dataset(l: &mut Ledger, full: &DatasetSplit) {
    let mut ok = full.train.len() == 16_996 && full.val.len() == 1_889;
    let mut parts = vec![format!("train {} / val {}", full.train.len(), full.val.len())];
    for (name, split) in [("train", &full.train), ("val", &full.val)] {
        let none = split.iter().filter(|s| s.labels.is_default(SlotName::Condition)).count();
        let pct = 100.0 * none as f64 / split.len() as f64;
        ok &= (pct - 22.6).abs() <= 0.5;
        parts.push(format!("{name} NONE {pct:.2}%"));
    }
    l.check("dataset", ok, parts.join(", "));
}

fn tokenizer_check(l: &mut Ledger, full: &DatasetSplit) -> TokenizerModel {
    let start = Instant::now();
    let texts: Vec<&str> = full.train.iter().chain(&full.val).map(|s| s.text.as_str()).collect();
    let report = tokenizer::train(&texts, 8000).unwrap();
    let tok = report.model;
    let unseen = [
        "Ça va? 你好, мир! 🙂",
        "Tôi sẽ đi chợ nếu trời đẹp.",
        "明日は雨かもしれません。",
        "\u{0}\u{7f} tab\tnewline\n",
    ];
    let mut unk = 0usize;
    let mut broken = 0usize;
    // Corpus sentences must come back exactly. Unseen text only up to
    // whitespace, which the pretokenizer collapses to single spaces.
    let cases = texts
        .iter()
        .map(|t| (*t, t.to_string()))
        .chain(unseen.iter().map(|t| (*t, t.split_whitespace().collect::<Vec<_>>().join(" "))));
    for (text, expected) in cases {
        let ids = tok.tokenize(text);
        unk += ids.iter().filter(|&&id| id == UNK).count();
        if tok.decode(&ids).ok() != Some(expected) {
            broken += 1;
        }
    }
    let bytes = tok.to_json().len();
    l.check(
        "tokenizer",
        tok.vocab_size() == 8000 && report.shortfall.is_none() && unk == 0 && broken == 0 && bytes <= 400 * 1024,
        format!(
            "vocab {}, {unk} UNK, {broken} roundtrip failures over {} texts, file {:.1} KB; {:.1}s",
            tok.vocab_size(),
            texts.len() + unseen.len(),
            bytes as f64 / 1024.0,
            start.elapsed().as_secs_f64()
        ),
    );
    tok
}

fn gloss_goldens(l: &mut Ledger) {
    let bank = TemplateBank::default_bank();
    let mut cases: Vec<(CsfFrame, &str, String)> = Vec::new();
    for (lang, text, gloss) in REFERENCE_SENTENCES {
        match bank.language(lang).and_then(|b| b.generates(text).ok().flatten()) {
            Some(frame) => cases.push((frame, gloss, text.to_string())),
            None => {
                l.check("gloss goldens", false, format!("`{text}` has no labelled frame in the bank"));
                return;
            }
        }
    }
    let worked = CsfFrame::from_labels(&[
        (SlotName::Time, "TOMORROW"),
        (SlotName::Condition, "IF_RAIN"),
        (SlotName::Location, "HOME"),
        (SlotName::Event, "STAY"),
    ])
    .unwrap();
    cases.push((worked, "TOMORROW IF_RAIN HOME STAY", "worked example".into()));
    let wrong: Vec<String> = cases
        .iter()
        .filter(|(f, g, _)| frame_to_gloss(f).render() != *g)
        .map(|(f, g, t)| format!("{t}: got `{}` want `{g}`", frame_to_gloss(f).render()))
        .collect();
    l.check(
        "gloss goldens",
        wrong.is_empty(),
        if wrong.is_empty() {
            format!("{} of {} match", cases.len(), cases.len())
        } else {
            wrong.join("; ")
        },
    );
}

fn schedule(l: &mut Ledger, full: &DatasetSplit, tok: &TokenizerModel) {
    let start = Instant::now();
    let model = ModelConfig {
        hidden: 8,
        layers: 1,
        ffn: 16,
        max_len: 16,
        ..ModelConfig::default()
    };
    let cfg = TrainConfig::default();
    let out = train(&model, &cfg, full, tok, &mut |_| {}).unwrap();
    let trace = &out.history.lr_trace;
    let (peak_at, peak) = trace
        .iter()
        .copied()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    l.check(
        "schedule",
        out.steps == 3990 && trace.len() == 3990 && peak == 2e-4 && peak_at == 399,
        format!(
            "{} steps (batch {}, {} epochs), peak {peak:e} at step {peak_at}, last {:.3e}; {:.1}s",
            out.steps,
            cfg.batch,
            cfg.epochs,
            trace.last().unwrap(),
            start.elapsed().as_secs_f64()
        ),
    );
}

fn desk_run(l: &mut Ledger, desk: &DatasetSplit, tok: &TokenizerModel) -> TrainOutcome {
    let start = Instant::now();
    let model = ModelConfig::desk();
    let cfg = TrainConfig::desk();
    let out = train(&model, &cfg, desk, tok, &mut |r| {
        eprintln!(
            "  desk epoch {} loss {:.4} average {:.4} condition {:.4} ({:.0}s)",
            r.epoch,
            r.loss,
            r.average,
            r.accuracies[SlotName::Condition.index()],
            start.elapsed().as_secs_f64()
        )
    })
    .unwrap();
    let elapsed = start.elapsed();
    let r = &out.best_report;
    let condition = r.accuracy(SlotName::Condition);
    l.check(
        "desk scale",
        r.average >= 0.90 && condition >= 0.88 && elapsed < Duration::from_secs(30 * 60),
        format!(
            "{} train / {} val, hidden {} layers {}, {} epochs: average {:.4}, condition {condition:.4}; {:.0}s",
            desk.train.len(),
            desk.val.len(),
            model.hidden,
            model.layers,
            cfg.epochs,
            r.average,
            elapsed.as_secs_f64()
        ),
    );
    out
}

fn full_scale(l: &mut Ledger, full: &DatasetSplit, tok: &TokenizerModel) -> Option<TrainOutcome> {
    if std::env::var("CSF_FULL_SCALE").as_deref() != Ok("1") {
        l.report("full scale", Verdict::Skip, "set CSF_FULL_SCALE=1 to train the default model".into());
        return None;
    }
    let start = Instant::now();
    let out = train(&ModelConfig::default(), &TrainConfig::default(), full, tok, &mut |r| {
        eprintln!("  full epoch {} average {:.4}", r.epoch, r.average)
    })
    .unwrap();
    let r = &out.best_report;
    l.check(
        "full scale",
        r.average >= 0.95,
        format!(
            "average {:.4}, condition {:.4}; {:.0}s",
            r.average,
            r.accuracy(SlotName::Condition),
            start.elapsed().as_secs_f64()
        ),
    );
    Some(out)
}

fn bench(l: &mut Ledger, predictor: &Predictor) {
    let ms = |v: &[u64]| v.iter().map(|&m| Duration::from_millis(m)).collect::<Vec<_>>();
    let oracle = BenchReport::from_durations(&ms(&[1, 2, 3, 4, 5])).unwrap();
    let oracle_ok = (oracle.mean_ms - 3.0).abs() < 1e-9
        && oracle.p50_ms == 3.0
        && oracle.p95_ms == 5.0
        && (oracle.std_ms - 2f64.sqrt()).abs() < 1e-9;
    let r = benchmark(predictor, "I go to school tomorrow.", 100, 10, BenchScope::EndToEnd).unwrap();
    let ratio = r.p95_ms / r.p50_ms;
    l.check(
        "benchmark",
        oracle_ok && r.mean_ms <= 15.0 && ratio <= 1.5,
        format!(
            "injected-timing oracle {}; desk model mean {:.3} ms, p50 {:.3}, p95 {:.3} (p95/p50 {ratio:.2}) over {} runs",
            if oracle_ok { "ok" } else { "WRONG" },
            r.mean_ms,
            r.p50_ms,
            r.p95_ms,
            r.runs
        ),
    );
}

fn bits(m: &Model) -> Vec<u32> {
    m.params().iter().flat_map(|t| t.data().iter().map(|v| v.to_bits())).collect()
}

fn persistence(l: &mut Ledger, which: &str, model: &Model, tok: &TokenizerModel) {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("best.bin");
    store::save_checkpoint(model, &ckpt, Precision::F32).unwrap();
    let back = store::load_checkpoint(&ckpt).unwrap();
    let ckpt_ok = bits(&back) == bits(model) && back.config() == model.config();
    let pkg = dir.path().join("package");
    store::build_package(model, tok, &pkg, Precision::F32).unwrap();
    let loaded = store::load_package(&pkg).unwrap();
    let pkg_ok = bits(loaded.model()) == bits(model) && loaded.tokenizer() == tok;

    let direct = Predictor::new(model.clone(), tok.clone()).unwrap();
    let mut same = 0;
    let mut golden = 0;
    let mut misses = Vec::new();
    for (_, text, gloss) in REFERENCE_SENTENCES {
        let out = Command::new(env!("CARGO_BIN_EXE_csf"))
            .args(["infer", "--package", pkg.to_str().unwrap(), "--text", text, "--format", "records"])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap();
        let Ok(record) = serde_json::from_slice::<serde_json::Value>(&out.stdout) else {
            misses.push(format!("`{text}`: no record ({})", String::from_utf8_lossy(&out.stderr).trim()));
            continue;
        };
        let frame = direct.predict(text).unwrap();
        if record["slots"] == serde_json::to_value(frame).unwrap() {
            same += 1;
        }
        let got = record["gloss"].as_str().unwrap_or_default();
        if got == gloss {
            golden += 1;
        } else {
            misses.push(format!("`{text}` -> `{got}` (want `{gloss}`)"));
        }
    }
    let n = REFERENCE_SENTENCES.len();
    let mut detail = format!(
        "{which} model: checkpoint {}, package {}, fresh-process frames identical {same}/{n}, reference GLOSS {golden}/{n}",
        if ckpt_ok { "bit-identical" } else { "DIFFERS" },
        if pkg_ok { "bit-identical" } else { "DIFFERS" },
    );
    if !misses.is_empty() {
        detail.push_str(&format!("; {}", misses.join("; ")));
    }
    l.check("persistence", ckpt_ok && pkg_ok && same == n && golden == n, detail);
}

fn main() -> ExitCode {
    let mut l = Ledger { failed: 0 };
    let bank = TemplateBank::default_bank();
    let full = expand(&bank, &ExpandConfig::default()).unwrap();
    let desk = expand(
        &bank,
        &ExpandConfig {
            target_train: 8000,
            target_val: 900,
            ..ExpandConfig::default()
        },
    )
    .unwrap();

    gradcheck(&mut l);
    overfit(&mut l, &desk);
    dataset(&mut l, &full);
    let tok = tokenizer_check(&mut l, &full);
    gloss_goldens(&mut l);
    schedule(&mut l, &full, &tok);
    let outcome = desk_run(&mut l, &desk, &tok);
    let full_outcome = full_scale(&mut l, &full, &tok);
    let predictor = Predictor::new(outcome.best_model.clone(), tok.clone()).unwrap();
    bench(&mut l, &predictor);
    // The reference outputs come from a fully trained model, so the full-scale
    // model is used when it was trained.
    match &full_outcome {
        Some(f) => persistence(&mut l, "full-scale", &f.best_model, &tok),
        None => persistence(&mut l, "desk", &outcome.best_model, &tok),
    }

    if l.failed == 0 {
        println!("all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("{} criteria failed", l.failed);
        ExitCode::FAILURE
    }
}

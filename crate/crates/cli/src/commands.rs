use std::fs;
use std::io::BufRead;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use serde_json::{json, Value};

use csf_core::corpus::{expand, read_dataset, write_dataset, ExpandConfig, Sample, TemplateBank};
use csf_core::eval::{benchmark, evaluate, BenchScope, EvalReport};
use csf_core::gloss::frame_to_gloss;
use csf_core::model::{Model, ModelConfig, Predictor};
use csf_core::schema::{CsfFrame, SlotName};
use csf_core::store::{self, Precision};
use csf_core::tokenizer::{self, TokenizerModel};
use csf_core::trainer::{train, TrainConfig};

use crate::{
    BenchArgs, Cli, Command, EvalArgs, Format, GenDataArgs, InferArgs, ModelSource, PackageArgs, PrecisionArg,
    ScopeArg, SplitArg, TrainArgs, TrainTokenizerArgs,
};

pub fn run(cli: Cli) -> Result<()> {
    let threads = cli.threads;
    match cli.command {
        Command::GenData(a) => gen_data(a, threads),
        Command::TrainTokenizer(a) => train_tokenizer(a, threads),
        Command::Train(a) => train_model(a, threads),
        Command::Eval(a) => eval(a, threads),
        Command::Infer(a) => infer(a, threads),
        Command::Bench(a) => bench(a, threads),
        Command::Package(a) => package(a, threads),
    }
}

/// Every run echoes its fully resolved settings on stderr, so stdout stays
/// machine-readable.
fn print_config(command: &str, threads: u16, mut config: Value) {
    config["command"] = json!(command);
    config["threads"] = json!(threads);
    eprintln!("config: {config}");
}

fn path_str(p: &Path) -> String {
    p.display().to_string()
}

fn gen_data(a: GenDataArgs, threads: u16) -> Result<()> {
    let cfg = ExpandConfig {
        target_train: a.train,
        target_val: a.val,
        none_fraction: a.none_fraction,
        seed: a.seed,
    };
    print_config(
        "gen-data",
        threads,
        json!({"seed": a.seed, "train": a.train, "val": a.val, "none_fraction": a.none_fraction, "out": path_str(&a.out)}),
    );
    let data = expand(&TemplateBank::default_bank(), &cfg).context("generating dataset")?;
    write_dataset(&data, &a.out).with_context(|| format!("writing dataset to {}", a.out.display()))?;
    for (name, split) in [("train", &data.train), ("val", &data.val)] {
        let none = split.iter().filter(|s| s.labels.is_default(SlotName::Condition)).count();
        println!(
            "{name}: {} records, condition NONE {:.2}%",
            split.len(),
            100.0 * none as f64 / split.len().max(1) as f64
        );
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn train_tokenizer(a: TrainTokenizerArgs, threads: u16) -> Result<()> {
    print_config(
        "train-tokenizer",
        threads,
        json!({"data": path_str(&a.data), "vocab": a.vocab, "max_token_bytes": a.max_token_bytes, "out": path_str(&a.out)}),
    );
    let data = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let texts: Vec<&str> = data.train.iter().chain(&data.val).map(|s| s.text.as_str()).collect();
    let report = tokenizer::train_with_limit(&texts, a.vocab, a.max_token_bytes).context("training tokenizer")?;
    if let Some(missing) = report.shortfall {
        log::warn!(
            "corpus supports only {} of the {} requested entries ({missing} short)",
            report.model.vocab_size(),
            a.vocab
        );
    }
    report.model.save(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let size = fs::metadata(&a.out).map(|m| m.len()).unwrap_or(0);
    println!(
        "vocab {} ({} merges), {:.1} KB written to {}",
        report.model.vocab_size(),
        report.model.merges().len(),
        size as f64 / 1024.0,
        a.out.display()
    );
    Ok(())
}

fn train_model(a: TrainArgs, threads: u16) -> Result<()> {
    let model_cfg = ModelConfig {
        hidden: a.hidden,
        heads: a.heads,
        layers: a.layers,
        ffn: a.ffn,
        vocab: a.vocab,
        max_len: a.max_len,
        dropout: a.dropout,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        batch: a.batch,
        max_lr: a.lr,
        epochs: a.epochs,
        weight_decay: a.weight_decay,
        warmup_fraction: a.warmup,
        seed: a.seed,
        clip_norm: a.clip_norm,
    };
    print_config(
        "train",
        threads,
        json!({
            "data": path_str(&a.data), "tokenizer": path_str(&a.tokenizer), "out": path_str(&a.out),
            "model": model_cfg, "train": train_cfg,
        }),
    );
    model_cfg.validate().context("model configuration")?;
    let data = read_dataset(&a.data).with_context(|| format!("reading dataset {}", a.data.display()))?;
    let tok = TokenizerModel::load(&a.tokenizer).with_context(|| format!("loading {}", a.tokenizer.display()))?;
    let steps = train_cfg.total_steps(data.train.len());
    println!(
        "{} parameters, {} train / {} val samples, {steps} optimizer steps",
        Model::init(model_cfg.clone(), a.seed)?.num_params(),
        data.train.len(),
        data.val.len()
    );
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let start = Instant::now();
    let outcome = train(&model_cfg, &train_cfg, &data, &tok, &mut |r| {
        println!(
            "epoch {:>3}  loss {:.4}  lr {:.2e}  val average {:.4}  condition {:.4}  ({:.0}s)",
            r.epoch,
            r.loss,
            r.lr,
            r.average,
            r.accuracies[SlotName::Condition.index()],
            start.elapsed().as_secs_f64()
        );
    })
    .context("training")?;
    let best = a.out.join("best.bin");
    let last = a.out.join("final.bin");
    let history = a.out.join("history.jsonl");
    store::save_checkpoint(&outcome.best_model, &best, Precision::F32)?;
    store::save_checkpoint(&outcome.final_model, &last, Precision::F32)?;
    outcome.history.write_jsonl(&history).context("writing history")?;
    println!(
        "{} steps; best epoch {} (average {:.4}); wrote {}, {}, {}",
        outcome.steps,
        outcome.best_epoch,
        outcome.best_report.average,
        best.display(),
        last.display(),
        history.display()
    );
    print!("{}", outcome.best_report.render_text(3));
    Ok(())
}

fn source_config(s: &ModelSource) -> Value {
    json!({
        "package": s.package.as_deref().map(path_str),
        "checkpoint": s.checkpoint.as_deref().map(path_str),
        "tokenizer": s.tokenizer.as_deref().map(path_str),
    })
}

fn load_predictor(s: &ModelSource) -> Result<Predictor> {
    match (&s.package, &s.checkpoint, &s.tokenizer) {
        (Some(dir), _, _) => store::load_package(dir).with_context(|| format!("loading package {}", dir.display())),
        (None, Some(ckpt), Some(tok)) => {
            let model = store::load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let tok = TokenizerModel::load(tok).with_context(|| format!("loading {}", tok.display()))?;
            Ok(Predictor::new(model, tok)?)
        }
        _ => bail!("a package or a checkpoint with a tokenizer is required"),
    }
}

fn load_split(dir: &Path, split: SplitArg) -> Result<Vec<Sample>> {
    let data = read_dataset(dir).with_context(|| format!("reading dataset {}", dir.display()))?;
    Ok(match split {
        SplitArg::Train => data.train,
        SplitArg::Val => data.val,
    })
}

fn accuracy_map(r: &EvalReport) -> Value {
    SlotName::ALL
        .iter()
        .map(|&s| (s.as_str().to_string(), json!(r.accuracy(s))))
        .collect::<serde_json::Map<_, _>>()
        .into()
}

fn eval(a: EvalArgs, threads: u16) -> Result<()> {
    let mut cfg = source_config(&a.source);
    cfg["data"] = json!(path_str(&a.data));
    cfg["split"] = json!(format!("{:?}", a.split).to_lowercase());
    cfg["top_k"] = json!(a.top_k);
    cfg["format"] = json!(format!("{:?}", a.format).to_lowercase());
    print_config("eval", threads, cfg);
    let predictor = load_predictor(&a.source)?;
    let samples = load_split(&a.data, a.split)?;
    let report = evaluate(predictor.model(), predictor.tokenizer(), &samples).context("evaluating")?;
    match a.format {
        Format::Text => print!("{}", report.render_text(a.top_k)),
        Format::Records => {
            let confusions: serde_json::Map<String, Value> = SlotName::ALL
                .iter()
                .map(|&s| (s.as_str().to_string(), json!(report.confusion_pairs(s, a.top_k))))
                .collect();
            let record = json!({
                "samples": report.samples,
                "accuracies": accuracy_map(&report),
                "average": report.average,
                "confusions": confusions,
            });
            println!("{record}");
        }
    }
    Ok(())
}

fn read_stdin_line() -> Result<String> {
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line).context("reading standard input")?;
    let line = line.trim_end_matches(['\n', '\r']).to_string();
    if line.trim().is_empty() {
        bail!("no input text: pass --text or write one line to standard input");
    }
    Ok(line)
}

fn infer(a: InferArgs, threads: u16) -> Result<()> {
    let mut cfg = source_config(&a.source);
    cfg["text"] = json!(a.text.as_deref().unwrap_or("<stdin>"));
    cfg["format"] = json!(format!("{:?}", a.format).to_lowercase());
    print_config("infer", threads, cfg);
    let predictor = load_predictor(&a.source)?;
    let text = match a.text {
        Some(t) => t,
        None => read_stdin_line()?,
    };
    let start = Instant::now();
    let frame = predictor.predict(&text).context("predicting")?;
    let gloss = frame_to_gloss(&frame).render();
    let latency_ms = start.elapsed().as_secs_f64() * 1e3;
    match a.format {
        Format::Text => print!("{}", render_frame(&text, &frame, &gloss, latency_ms)),
        Format::Records => {
            let record = json!({"text": text, "slots": frame, "gloss": gloss, "latency_ms": latency_ms});
            println!("{record}");
        }
    }
    Ok(())
}

fn render_frame(text: &str, frame: &CsfFrame, gloss: &str, latency_ms: f64) -> String {
    let mut out = format!("{:<10} {text}\n", "text");
    for slot in SlotName::ALL {
        out.push_str(&format!("{:<10} {}\n", slot.as_str(), frame.label(slot)));
    }
    out.push_str(&format!("{:<10} {gloss}\n", "gloss"));
    out.push_str(&format!("{:<10} {latency_ms:.3} ms\n", "latency"));
    out
}

fn bench(a: BenchArgs, threads: u16) -> Result<()> {
    let mut cfg = source_config(&a.source);
    cfg["text"] = json!(a.text);
    cfg["runs"] = json!(a.runs);
    cfg["warmup"] = json!(a.warmup);
    cfg["scope"] = json!(format!("{:?}", a.scope));
    cfg["format"] = json!(format!("{:?}", a.format).to_lowercase());
    print_config("bench", threads, cfg);
    let predictor = load_predictor(&a.source)?;
    let scope = match a.scope {
        ScopeArg::EndToEnd => BenchScope::EndToEnd,
        ScopeArg::ForwardOnly => BenchScope::ForwardOnly,
    };
    let report = benchmark(&predictor, &a.text, a.runs, a.warmup, scope).context("benchmarking")?;
    match a.format {
        Format::Text => print!("{}", report.render_text()),
        Format::Records => println!("{}", serde_json::to_string(&report)?),
    }
    Ok(())
}

fn package(a: PackageArgs, threads: u16) -> Result<()> {
    let precision = match a.precision {
        PrecisionArg::F32 => Precision::F32,
        PrecisionArg::F16 => Precision::F16,
    };
    print_config(
        "package",
        threads,
        json!({
            "checkpoint": path_str(&a.checkpoint), "tokenizer": path_str(&a.tokenizer), "out": path_str(&a.out),
            "precision": precision, "data": a.data.as_deref().map(path_str),
        }),
    );
    let model = store::load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let tok = TokenizerModel::load(&a.tokenizer).with_context(|| format!("loading {}", a.tokenizer.display()))?;
    let report = store::build_package(&model, &tok, &a.out, precision).context("building package")?;
    print!("{}", report.render_text());
    if let Some(data) = &a.data {
        let samples = load_split(data, SplitArg::Val)?;
        let full = evaluate(&model, &tok, &samples).context("evaluating f32 weights")?;
        let packed = store::load_package(&a.out).context("reloading package")?;
        let stored = evaluate(packed.model(), packed.tokenizer(), &samples).context("evaluating packaged weights")?;
        println!(
            "val average: f32 {:.4}, packaged ({:?}) {:.4}, change {:+.4}",
            full.average,
            precision,
            stored.average,
            stored.average - full.average
        );
    }
    Ok(())
}

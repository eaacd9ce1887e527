//! `clinpeft`: synthesize data, pretrain, fine-tune, screen, evaluate and
//! gradient-check from the command line.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clinpeft_core::data::{
    generate_negation_samples, holdout_positives, keyword_screen, load_jsonl, pretraining_corpus,
    synth_corpus, NoteRecord, SynthOptions, TemplateSet, TermList, Vocab, HOLDOUT_TERMS,
};
use clinpeft_core::eval::{evaluate, render_report, ReportEntry};
use clinpeft_core::models::{Checkpoint, EncoderConfig, EncoderModel, Model};
use clinpeft_core::pipeline::{
    build_vocab, encode_all, finetune, negation_pool, to_samples, FinetuneOptions,
};
use clinpeft_core::training::{pretrain_mlm, Method, PretrainConfig, TrainConfig};
use clinpeft_core::verify::{run_gradcheck, Component};
use clinpeft_core::{Error, Result};
use rand::SeedableRng;
use serde::Serialize;

use manifest::{sidecar, to_json, to_jsonl, Run};

#[derive(Parser, Debug)]
#[command(
    name = "clinpeft",
    version,
    about = "Clinical note classification with adapters and prompts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic train/test/holdout notes and a pretraining corpus.
    Synth(SynthArgs),
    /// Masked-token pretraining of an encoder on a text corpus.
    Pretrain(PretrainArgs),
    /// Fine-tune a classifier (full, adapter, prompt or recurrent baseline).
    Finetune(FinetuneArgs),
    /// Generate negated-term negative samples.
    Augment(AugmentArgs),
    /// Score a model checkpoint on a labelled test set.
    Evaluate(EvaluateArgs),
    /// Partition notes by the cancer keyword screen.
    Screen(ScreenArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
}

fn positive(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be positive".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn component(s: &str) -> std::result::Result<String, String> {
    Component::select(s)
        .map(|_| s.to_string())
        .map_err(|e| e.to_string())
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6000, value_parser = positive)]
    train_size: usize,
    #[arg(long, default_value_t = 1000, value_parser = positive)]
    test_size: usize,
    #[arg(long, default_value_t = 31)]
    test_positives: usize,
    /// Sentences in the unlabelled pretraining corpus.
    #[arg(long, default_value_t = 20_000)]
    pretrain_size: usize,
    /// Positive notes built only from held-out terms.
    #[arg(long, default_value_t = 200)]
    holdout_size: usize,
    #[arg(long, default_value_t = 0.05)]
    misspell_rate: f64,
    /// Term list (defaults to the bundled list).
    #[arg(long)]
    terms: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PretrainArgs {
    /// tiny or base-like.
    #[arg(long, default_value = "tiny")]
    config: String,
    /// Text file, one sentence per line.
    #[arg(long)]
    corpus: PathBuf,
    /// Record files whose text also feeds the vocabulary.
    #[arg(long)]
    vocab_text: Vec<PathBuf>,
    #[arg(long, default_value_t = 2000)]
    steps: usize,
    #[arg(long, default_value_t = 0.15)]
    mask_rate: f64,
    #[arg(long, default_value_t = 32, value_parser = positive)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 100)]
    warmup_steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct FinetuneArgs {
    /// full, adapter, prompt, rnn or rnn:<bilstm|cnn_bilstm|cnn_bilstm_att>.
    #[arg(long, value_parser = method)]
    method: Method,
    /// Pretrained encoder; optional for recurrent baselines.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    train: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    valid_frac: f64,
    #[arg(long, default_value_t = 3, value_parser = positive)]
    runs: usize,
    /// Use the method's preset epochs and learning rate.
    #[arg(long, conflicts_with_all = ["epochs", "lr"])]
    preset_hparams: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 64, value_parser = positive)]
    batch_size: usize,
    #[arg(long, default_value_t = 16)]
    reduction: usize,
    #[arg(long, default_value_t = 30)]
    prompt_size: usize,
    /// Generated negation samples appended to the training data.
    #[arg(long, default_value_t = 0)]
    negation_aug: usize,
    /// Also train layer norms in adapter mode.
    #[arg(long)]
    train_layer_norm: bool,
    #[arg(long)]
    terms: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct AugmentArgs {
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    terms: Option<PathBuf>,
    #[arg(long)]
    templates: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    report_out: PathBuf,
    /// Row label; defaults to the checkpoint's model kind.
    #[arg(long)]
    architecture: Option<String>,
    /// Row label; defaults to the checkpoint's fine-tuning method.
    #[arg(long)]
    approach: Option<String>,
}

#[derive(Args, Debug, Serialize)]
struct ScreenArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    terms: Option<PathBuf>,
    #[arg(long)]
    out_matched: PathBuf,
    #[arg(long)]
    out_unmatched: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct GradcheckArgs {
    /// all, attention, adapter, lstm, conv, layernorm or encoder.
    #[arg(long, default_value = "all", value_parser = component)]
    component: String,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the manifest (printed to stderr otherwise).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Corrupt every analytic gradient before comparison.
    #[arg(long, hide = true)]
    inject_fault: bool,
}

fn flags<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn terms_from(run: &mut Run, path: &Option<PathBuf>) -> Result<TermList> {
    match path {
        Some(p) => TermList::parse(&utf8(p, run.read_input(p)?)?),
        None => Ok(TermList::standard()),
    }
}

fn templates_from(run: &mut Run, path: &Option<PathBuf>) -> Result<TemplateSet> {
    match path {
        Some(p) => TemplateSet::parse(&utf8(p, run.read_input(p)?)?),
        None => Ok(TemplateSet::standard()),
    }
}

fn utf8(path: &Path, bytes: Vec<u8>) -> Result<String> {
    String::from_utf8(bytes).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}

fn records_from(run: &mut Run, path: &Path) -> Result<Vec<NoteRecord>> {
    run.read_input(path)?;
    load_jsonl(path)
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.test_positives > a.test_size {
        return Err(Error::Config(format!(
            "{} test positives exceed the test size {}",
            a.test_positives, a.test_size
        )));
    }
    let mut run = Run::start("synth", flags(&a), Some(a.seed));
    let terms = terms_from(&mut run, &a.terms)?;
    let opts = SynthOptions {
        n_train: a.train_size,
        n_test: a.test_size,
        test_positives: a.test_positives,
        misspell_rate: a.misspell_rate,
        ..SynthOptions::default()
    };
    let split = synth_corpus(a.seed, &opts, &terms);
    let holdout = holdout_positives(a.seed, a.holdout_size, &terms, &HOLDOUT_TERMS);
    let mut corpus = pretraining_corpus(a.seed, a.pretrain_size, &terms).join("\n");
    corpus.push('\n');
    run.output(a.out_dir.join("train.jsonl"), to_jsonl(&split.train)?);
    run.output(a.out_dir.join("test.jsonl"), to_jsonl(&split.test)?);
    run.output(a.out_dir.join("holdout.jsonl"), to_jsonl(&holdout)?);
    run.output(a.out_dir.join("pretrain.txt"), corpus.into_bytes());
    run.finish(Some(&a.out_dir.join("manifest.json")))?;
    println!(
        "wrote {} train, {} test ({} positive), {} holdout notes and {} pretraining sentences to {}",
        split.train.len(),
        split.test.len(),
        a.test_positives,
        holdout.len(),
        a.pretrain_size,
        a.out_dir.display()
    );
    Ok(())
}

fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut run = Run::start("pretrain", flags(&a), Some(a.seed));
    let text = utf8(&a.corpus, run.read_input(&a.corpus)?)?;
    let lines: Vec<&str> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::Config(format!(
            "corpus {} is empty",
            a.corpus.display()
        )));
    }
    let mut extra = Vec::new();
    for p in &a.vocab_text {
        extra.extend(records_from(&mut run, p)?.into_iter().map(|r| r.text));
    }
    let vocab = build_vocab(
        lines
            .iter()
            .copied()
            .chain(extra.iter().map(String::as_str)),
    );
    let config = EncoderConfig::preset(&a.config, vocab.len())?;
    let cfg = PretrainConfig {
        steps: a.steps,
        batch_size: a.batch_size,
        lr: a.lr,
        warmup_steps: a.warmup_steps,
        mask_rate: a.mask_rate,
        seed: a.seed,
        ..PretrainConfig::default()
    };
    run.config("encoder", &config)?;
    run.config("pretrain", &cfg)?;
    log::info!(
        "vocabulary {} tokens, corpus {} sentences",
        vocab.len(),
        lines.len()
    );
    let mut model = EncoderModel::new(config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(a.seed))?;
    let out = pretrain_mlm(&mut model, &encode_all(&vocab, lines.iter().copied()), &cfg)?;
    let ckpt = Checkpoint {
        model: Model::Encoder(model),
        vocab: vocab.tokens().to_vec(),
    };
    run.output(a.out.join("model.ckpt"), ckpt.to_bytes()?);
    run.output(
        a.out.join("pretrain_history.jsonl"),
        to_jsonl(&out.history)?,
    );
    run.finish(Some(&a.out.join("manifest.json")))?;
    let (first, last) = (out.history.first(), out.history.last());
    if let (Some(f), Some(l)) = (first, last) {
        println!(
            "pretrained {} steps: loss {:.4} -> {:.4}",
            out.history.len(),
            f.loss,
            l.loss
        );
    } else {
        println!("pretrained 0 steps");
    }
    Ok(())
}

#[derive(Serialize)]
struct RunsFile<'a> {
    best: usize,
    runs: &'a [clinpeft_core::training::RunSummary],
    valid_report: Option<&'a clinpeft_core::eval::MetricsReport>,
    n_train: usize,
    n_valid: usize,
    n_augmented: usize,
}

fn finetune_cmd(a: FinetuneArgs) -> Result<()> {
    let mut run = Run::start("finetune", flags(&a), Some(a.seed));
    let records = records_from(&mut run, &a.train)?;
    let terms = terms_from(&mut run, &a.terms)?;
    let templates = templates_from(&mut run, &a.templates)?;
    let checkpoint = match &a.checkpoint {
        Some(p) => Some(Checkpoint::from_bytes(&run.read_input(p)?)?),
        None => None,
    };
    let vocab = match &checkpoint {
        Some(c) => Vocab::from_tokens(c.vocab.clone())?,
        None => build_vocab(records.iter().map(|r| r.text.as_str())),
    };
    let (preset_epochs, preset_lr) = a.method.preset();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(preset_epochs),
        base_lr: a.lr.unwrap_or(preset_lr),
        batch_size: a.batch_size,
        ..TrainConfig::preset(a.method, a.seed)
    };
    let opts = FinetuneOptions {
        reduction_factor: a.reduction,
        prompt_size: a.prompt_size,
        runs: a.runs,
        valid_frac: a.valid_frac,
        negation_aug: a.negation_aug,
        train_layer_norm: a.train_layer_norm,
    };
    run.config("train", &cfg)?;
    let res = finetune(
        checkpoint.as_ref(),
        &vocab,
        &records,
        &cfg,
        &opts,
        &terms,
        &templates,
    )?;
    let best = &res.best;
    let runs = RunsFile {
        best: best.best,
        runs: &best.runs,
        valid_report: best.valid_report.as_ref(),
        n_train: res.n_train,
        n_valid: res.n_valid,
        n_augmented: res.n_augmented,
    };
    let ckpt = Checkpoint {
        model: best.model.clone(),
        vocab: vocab.tokens().to_vec(),
    };
    run.output(a.out.join("model.ckpt"), ckpt.to_bytes()?);
    run.output(
        a.out.join("history.jsonl"),
        to_jsonl(&best.outcome.history)?,
    );
    run.output(a.out.join("runs.json"), to_json(&runs)?.into_bytes());
    run.finish(Some(&a.out.join("manifest.json")))?;
    let chosen = &best.runs[best.best];
    println!(
        "{}: best of {} runs is seed {} (valid macro-F {:.4}, final loss {:.5}); {} train, {} valid, {} augmented",
        a.method,
        best.runs.len(),
        chosen.seed,
        chosen.valid_macro_f1,
        chosen.final_loss,
        res.n_train,
        res.n_valid,
        res.n_augmented
    );
    Ok(())
}

fn augment(a: AugmentArgs) -> Result<()> {
    let mut run = Run::start("augment", flags(&a), Some(a.seed));
    let terms = terms_from(&mut run, &a.terms)?;
    let templates = templates_from(&mut run, &a.templates)?;
    let samples = generate_negation_samples(&negation_pool(&terms), &templates, a.n, a.seed)?;
    run.output(a.out.clone(), to_jsonl(&samples)?);
    run.finish(Some(&sidecar(&a.out)))?;
    println!(
        "wrote {} negation samples to {}",
        samples.len(),
        a.out.display()
    );
    Ok(())
}

fn default_labels(model: &Model) -> (String, String) {
    match model {
        Model::Encoder(e) => {
            let approach = if e.peft.reduction_factor.is_some() {
                "Adapter-Tuning"
            } else if e.peft.prompt_length.is_some() {
                "Prompt-Tuning"
            } else {
                "Full Fine-Tuning"
            };
            ("Transformer encoder".into(), approach.into())
        }
        Model::Rnn(r) => (r.config.variant.to_string(), "Full Training".into()),
    }
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let mut run = Run::start("evaluate", flags(&a), None);
    let ckpt = Checkpoint::from_bytes(&run.read_input(&a.model)?)?;
    let records = records_from(&mut run, &a.test)?;
    if records.is_empty() {
        return Err(Error::Config(format!(
            "test set {} is empty",
            a.test.display()
        )));
    }
    let vocab = Vocab::from_tokens(ckpt.vocab.clone())?;
    let samples = to_samples(&vocab, &records);
    let inputs: Vec<Vec<usize>> = samples.iter().map(|s| s.ids.clone()).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let report = evaluate(&ckpt.model, &inputs, &labels)?;
    let (arch, approach) = default_labels(&ckpt.model);
    let entry = ReportEntry {
        architecture: a.architecture.clone().unwrap_or(arch),
        approach: a.approach.clone().unwrap_or(approach),
        report,
    };
    let (table, json) = render_report(&[entry])?;
    run.output(a.report_out.clone(), json.into_bytes());
    run.finish(Some(&sidecar(&a.report_out)))?;
    print!("{table}");
    Ok(())
}

fn screen(a: ScreenArgs) -> Result<()> {
    let mut run = Run::start("screen", flags(&a), None);
    let terms = terms_from(&mut run, &a.terms)?;
    let records = records_from(&mut run, &a.input)?;
    let (mut matched, mut unmatched) = (Vec::new(), Vec::new());
    // each matched record counts once, under its first hit in term order
    let mut histogram: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        let s = keyword_screen(&r.text, &terms);
        match s.hits.first() {
            Some(first) => {
                *histogram.entry(first.clone()).or_default() += 1;
                matched.push(r);
            }
            None => unmatched.push(r),
        }
    }
    run.output(a.out_matched.clone(), to_jsonl(&matched)?);
    run.output(a.out_unmatched.clone(), to_jsonl(&unmatched)?);
    run.finish(Some(&sidecar(&a.out_matched)))?;
    let mut rows: Vec<(&String, &usize)> = histogram.iter().collect();
    rows.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
    for (term, n) in rows {
        println!("{n:>6}  {term}");
    }
    println!(
        "{:>6}  matched, {} unmatched",
        matched.len(),
        unmatched.len()
    );
    Ok(())
}

/// Returns whether every component passed.
fn gradcheck(a: GradcheckArgs) -> Result<bool> {
    let run = Run::start("gradcheck", flags(&a), Some(a.seed));
    let components = Component::select(&a.component)?;
    let checks = run_gradcheck(&components, a.seed, a.tolerance, a.inject_fault)?;
    for c in &checks {
        println!(
            "{:<18} worst rel. error {:.3e}  {}",
            c.component.name(),
            c.max_rel_error,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    run.finish(a.manifest.as_deref())?;
    Ok(checks.iter().all(|c| c.passed))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a).map(|()| true),
        Command::Pretrain(a) => pretrain(a).map(|()| true),
        Command::Finetune(a) => finetune_cmd(a).map(|()| true),
        Command::Augment(a) => augment(a).map(|()| true),
        Command::Evaluate(a) => evaluate_cmd(a).map(|()| true),
        Command::Screen(a) => screen(a).map(|()| true),
        Command::Gradcheck(a) => gradcheck(a),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(3),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

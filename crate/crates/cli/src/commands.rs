use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use heartbert_core::encoder::{read_sidecar, Dtype, EncoderModel, SequenceRef};
use heartbert_core::evaluation::{evaluate, ReportFormat};
use heartbert_core::quantizer::{encode_samples, train_codebook, QuantizerCodebook};
use heartbert_core::rng::substream;
use heartbert_core::signal::{
    convert_record, load_record, normalize, resample, write_record, EcgRecord, RecordFormat,
    TARGET_RATE_HZ,
};
use heartbert_core::tasks::{
    balance_and_split, encode_segment, prepare_heartbeat, prepare_sleep, synth_corpus,
    synth_sleep_epochs, BeatAnnotation, DatasetHeader, LabeledSegment, SleepEpoch, Task,
    TaskDataset,
};
use heartbert_core::tokenizer::{BpeTokenizer, TokenizedSequence};
use heartbert_core::training::{
    build_hybrid, count_trainable, finetune, pretrain, ClassifierHead, FreezePolicy, HybridModel,
    LabeledSequence, HEAD_HIDDEN,
};
use rand::seq::SliceRandom;

use crate::artifacts::{self as art, require, Provenance};
use crate::config::PipelineConfig;
use crate::error::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// Shared state of one command run.
pub struct Ctx {
    pub cfg: PipelineConfig,
    prov: Provenance,
}

impl Ctx {
    pub fn new(cfg: PipelineConfig, command: &str) -> Self {
        let prov = Provenance {
            command: command.to_string(),
            config_hash: cfg.hash(),
            seed: cfg.seed,
            inputs: Vec::new(),
            overrides: cfg
                .overrides
                .iter()
                .filter(|(k, _)| !k.starts_with("paths."))
                .cloned()
                .collect(),
        };
        Self { cfg, prov }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.paths.work_dir.join(name)
    }

    /// Verifies an upstream artifact and records it as an input.
    fn input(&mut self, path: &Path) -> Result<String> {
        let hash = require(path)?;
        self.prov.add_input(path, hash.clone());
        Ok(hash)
    }

    fn output_dir(&self) -> Result<()> {
        let dir = &self.cfg.paths.work_dir;
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
    }

    fn write(&self, path: &Path, text: &str) -> Result<()> {
        std::fs::write(path, text).map_err(|e| CliError::io(path, e))?;
        self.prov.seal(path)
    }
}

/// Thousands separators, e.g. `1,510,915`.
pub fn grouped(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

fn listed(input: &Path, extensions: &[&str]) -> Result<Vec<PathBuf>> {
    if !input.exists() {
        return Err(CliError::Missing(input.to_path_buf()));
    }
    let matches = |p: &Path| {
        p.extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| extensions.iter().any(|x| e.eq_ignore_ascii_case(x)))
    };
    if input.is_file() {
        return Ok(if matches(input) { vec![input.to_path_buf()] } else { Vec::new() });
    }
    let mut out: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| CliError::io(input, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && matches(p))
        .collect();
    out.sort();
    Ok(out)
}

fn record_files(ctx: &Ctx) -> Result<Vec<PathBuf>> {
    let files = listed(&ctx.cfg.paths.input, &["csv", "sig"])?;
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "no .csv or .sig records under {}",
            ctx.cfg.paths.input.display()
        )));
    }
    Ok(files)
}

fn load_tokenizer(ctx: &mut Ctx) -> Result<BpeTokenizer> {
    let (vocab, merges) = (ctx.path(art::VOCAB), ctx.path(art::MERGES));
    ctx.input(&vocab)?;
    ctx.input(&merges)?;
    Ok(BpeTokenizer::load(&vocab, &merges)?.with_max_seq_len(ctx.cfg.max_seq_len)?)
}

pub fn synth(mut ctx: Ctx) -> Result<String> {
    let dir = ctx.cfg.paths.input.clone();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    ctx.prov.inputs.clear();
    let records = synth_corpus(&ctx.cfg.synth)?;
    for r in &records {
        let path = dir.join(format!("{}.csv", r.record.record_id()));
        write_record(&path, &r.record, RecordFormat::Csv)?;
        ctx.prov.seal(&path)?;
        ctx.write(&path.with_extension("ann"), &r.annotation.to_text())?;
    }
    let mut summary = format!("wrote {} records to {}", records.len(), dir.display());
    if ctx.cfg.task.task != Task::Heartbeat4 {
        let epochs = synth_sleep_epochs(ctx.cfg.sleep_epochs, ctx.cfg.synth.noise, ctx.cfg.seed)?;
        let mut text = String::new();
        for e in &epochs {
            let values: Vec<String> = e.samples.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(text, "{}\t{}", e.stage, values.join(" "));
        }
        ctx.write(&dir.join("synth.sleep"), &text)?;
        let _ = write!(summary, " and {} sleep epochs", epochs.len());
    }
    Ok(summary)
}

pub fn ingest(mut ctx: Ctx) -> Result<String> {
    ctx.output_dir()?;
    let files = record_files(&ctx)?;
    let mut windows = Vec::new();
    for f in &files {
        ctx.input(f)?;
        let record = load_record(f, RecordFormat::from_path(f))?;
        windows.extend(convert_record(&record, ctx.cfg.max_window)?);
    }
    let out = ctx.path(art::WINDOWS);
    art::write_windows(&out, &windows, &ctx.prov)?;
    ctx.prov.seal(&out)?;
    Ok(format!("{} records -> {} windows in {}", files.len(), windows.len(), out.display()))
}

pub fn train_quantizer(mut ctx: Ctx) -> Result<String> {
    let windows_path = ctx.path(art::WINDOWS);
    ctx.input(&windows_path)?;
    let windows = art::read_windows(&windows_path)?;
    let samples: Vec<f64> = windows.iter().flat_map(|w| w.samples().iter().copied()).collect();
    let (book, report) = train_codebook(&samples, &ctx.cfg.quantizer)?;
    let out = ctx.path(art::CODEBOOK);
    ctx.write(&out, &book.to_text())?;
    Ok(format!(
        "{} levels from {} samples; distortion {:.3e} after {} iterations{}",
        book.levels(),
        report.samples_used,
        report.distortion_history.last().copied().unwrap_or(0.0),
        report.distortion_history.len(),
        if report.converged { "" } else { " (iteration limit)" }
    ))
}

fn load_codebook(ctx: &mut Ctx) -> Result<QuantizerCodebook> {
    let path = ctx.path(art::CODEBOOK);
    ctx.input(&path)?;
    Ok(QuantizerCodebook::load(&path)?)
}

pub fn prepare_corpus(mut ctx: Ctx) -> Result<String> {
    let windows_path = ctx.path(art::WINDOWS);
    ctx.input(&windows_path)?;
    let book = load_codebook(&mut ctx)?;
    let lines = art::read_windows(&windows_path)?
        .iter()
        .map(|w| encode_samples(w.samples(), &book))
        .collect::<heartbert_core::Result<Vec<_>>>()?;
    let out = ctx.path(art::CORPUS);
    art::write_corpus(&out, &lines, &ctx.prov)?;
    ctx.prov.seal(&out)?;
    Ok(format!("{} symbol strings in {}", lines.len(), out.display()))
}

pub fn train_tokenizer(mut ctx: Ctx) -> Result<String> {
    let corpus_path = ctx.path(art::CORPUS);
    ctx.input(&corpus_path)?;
    let book = load_codebook(&mut ctx)?;
    let lines = art::read_corpus(&corpus_path)?;
    let tok = BpeTokenizer::train(lines.iter().map(String::as_str), book.alphabet(), ctx.cfg.vocab_size)?
        .with_max_seq_len(ctx.cfg.max_seq_len)?;
    let (vocab, merges) = (ctx.path(art::VOCAB), ctx.path(art::MERGES));
    tok.save(&vocab, &merges)?;
    ctx.prov.seal(&vocab)?;
    ctx.prov.seal(&merges)?;
    let stats = tok.token_stats();
    Ok(format!(
        "vocabulary {} ({} merges); token length {}..{} mean {:.2}",
        tok.vocab_size(),
        tok.merges().len(),
        stats.min_len,
        stats.max_len,
        stats.mean_len
    ))
}

pub fn pretrain_cmd(mut ctx: Ctx) -> Result<String> {
    let corpus_path = ctx.path(art::CORPUS);
    ctx.input(&corpus_path)?;
    let tok = load_tokenizer(&mut ctx)?;
    let mut seqs = art::read_corpus(&corpus_path)?
        .iter()
        .map(|l| tok.encode(l, None))
        .collect::<heartbert_core::Result<Vec<TokenizedSequence>>>()?;
    seqs.shuffle(&mut substream(ctx.cfg.seed, "pretrain/holdout"));
    let n_val = (seqs.len() as f64 * ctx.cfg.val_fraction).round() as usize;
    let validation = seqs.split_off(seqs.len() - n_val);
    let model_cfg = ctx.cfg.model_for_vocab(tok.vocab_size());
    let mut model = heartbert_core::encoder::build_model(&model_cfg, ctx.cfg.seed)?;
    let log = pretrain(&mut model, &seqs, &validation, &ctx.cfg.pretrain, ctx.cfg.seed)?;
    let out = ctx.path(art::ENCODER);
    model.save(&out, Dtype::F64, &ctx.prov.pairs())?;
    ctx.prov.seal(&out)?;
    ctx.write(&ctx.path(art::PRETRAIN_LOG), &log.to_lines())?;
    let last = log.epochs.last().map_or(f64::NAN, |e| e.loss);
    Ok(format!(
        "{} trainable parameters; {} epochs on {} sequences; final loss {last:.4}",
        grouped(count_trainable(&model, None, None)),
        log.epochs.len(),
        seqs.len()
    ))
}

fn parse_sleep_file(path: &Path) -> Result<Vec<SleepEpoch>> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let bad = |msg: &str| CliError::Data(format!("{} line {}: {msg}", path.display(), n + 1));
            let (stage, values) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
            let samples = values
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|_| bad("bad sample"))?;
            let record = EcgRecord::new(samples, TARGET_RATE_HZ, "epoch", "ECG")?;
            Ok(SleepEpoch {
                samples: normalize(&record).samples().to_vec(),
                stage: stage.trim().parse()?,
            })
        })
        .collect()
}

fn heartbeat_segments(ctx: &mut Ctx) -> Result<Vec<LabeledSegment>> {
    let mut segments = Vec::new();
    for f in record_files(ctx)? {
        let ann_path = f.with_extension("ann");
        if !ann_path.exists() {
            log::warn!("{} has no annotation; skipped", f.display());
            continue;
        }
        ctx.input(&f)?;
        ctx.input(&ann_path)?;
        let record = load_record(&f, RecordFormat::from_path(&f))?;
        let text = std::fs::read_to_string(&ann_path).map_err(|e| CliError::io(&ann_path, e))?;
        let mut ann = BeatAnnotation::from_text(&text)?;
        let rate = record.sampling_rate_hz();
        if rate != TARGET_RATE_HZ {
            let scale = TARGET_RATE_HZ / rate;
            let peaks = ann.r_peaks().iter().map(|&p| (p as f64 * scale).round() as usize).collect();
            ann = BeatAnnotation::new(peaks, ann.labels().to_vec())?;
        }
        let record = normalize(&resample(&record, TARGET_RATE_HZ)?);
        segments.extend(prepare_heartbeat(&record, &ann)?);
    }
    if segments.is_empty() {
        return Err(CliError::Data(format!(
            "no annotated records under {}",
            ctx.cfg.paths.input.display()
        )));
    }
    Ok(segments)
}

pub fn prepare_task(mut ctx: Ctx) -> Result<String> {
    ctx.output_dir()?;
    let book = load_codebook(&mut ctx)?;
    let tok = load_tokenizer(&mut ctx)?;
    let codebook_hash = require(&ctx.path(art::CODEBOOK))?;
    let tokenizer_hash = require(&ctx.path(art::VOCAB))?;
    let task = ctx.cfg.task.task;
    let segments = if task == Task::Heartbeat4 {
        heartbeat_segments(&mut ctx)?
    } else {
        let files = listed(&ctx.cfg.paths.input, &["sleep"])?;
        if files.is_empty() {
            return Err(CliError::Missing(ctx.cfg.paths.input.join("*.sleep")));
        }
        let mut epochs = Vec::new();
        for f in &files {
            ctx.input(f)?;
            epochs.extend(parse_sleep_file(f)?);
        }
        prepare_sleep(&epochs, task)?.segments
    };
    let examples = segments
        .iter()
        .map(|s| {
            Ok(LabeledSequence {
                tokens: encode_segment(&s.samples, &book, &tok)?,
                label: s.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let t = &ctx.cfg.task;
    let splits = balance_and_split(&examples, |e| e.label, task.n_classes(), t.per_class, t.ratios, ctx.cfg.seed)?;
    for (name, part) in art::SPLITS.iter().zip([&splits.train, &splits.val, &splits.test]) {
        let mut extra = ctx.prov.pairs();
        extra.push(("split".into(), name.trim_end_matches(".hbd").into()));
        let dataset = TaskDataset {
            header: DatasetHeader {
                task,
                codebook_hash: codebook_hash.clone(),
                tokenizer_hash: tokenizer_hash.clone(),
                seed: ctx.cfg.seed,
                extra,
            },
            examples: part.clone(),
        };
        let path = ctx.path(name);
        dataset.save(&path)?;
        ctx.prov.seal(&path)?;
    }
    Ok(format!(
        "{task}: {} segments -> train {} / val {} / test {}",
        examples.len(),
        splits.train.len(),
        splits.val.len(),
        splits.test.len()
    ))
}

fn load_split(ctx: &mut Ctx, name: &str) -> Result<TaskDataset> {
    let path = ctx.path(name);
    ctx.input(&path)?;
    Ok(TaskDataset::load(&path)?)
}

pub fn finetune_cmd(mut ctx: Ctx) -> Result<String> {
    let enc_path = ctx.path(art::ENCODER);
    ctx.input(&enc_path)?;
    let encoder = EncoderModel::load(&enc_path)?;
    let train = load_split(&mut ctx, art::SPLITS[0])?;
    let val = load_split(&mut ctx, art::SPLITS[1])?;
    if let Some(vocab_hash) = read_sidecar(&enc_path)?.get(&format!("input.{}", art::VOCAB)) {
        if *vocab_hash != train.header.tokenizer_hash {
            return Err(CliError::Data(
                "task data and encoder were built with different tokenizers".into(),
            ));
        }
    }
    let n_classes = train.header.task.n_classes();
    let hybrid = build_hybrid(encoder, n_classes, ctx.cfg.freeze, ctx.cfg.seed)?;
    let trainable = hybrid.num_trainable();
    let out = finetune(&hybrid, &train.examples, &val.examples, &ctx.cfg.finetune, ctx.cfg.seed)?;
    let path = ctx.path(art::HYBRID);
    out.model.save(&path, Dtype::F64, &ctx.prov.pairs())?;
    ctx.prov.seal(&path)?;
    let mut log = String::new();
    for s in &out.sweep {
        let best = s.best_epoch.map_or("none".to_string(), |e| e.to_string());
        let _ = writeln!(log, "lr={:?} best_epoch={best} val_acc={:.6}", s.lr, s.val_acc);
    }
    let _ = writeln!(log, "selected lr={:?}", out.best_lr);
    log.push_str(&out.log().to_lines());
    ctx.write(&ctx.path(art::FINETUNE_LOG), &log)?;
    Ok(format!(
        "{} trainable parameters ({}); best lr {} with validation accuracy {:.4}",
        grouped(trainable),
        ctx.cfg.freeze,
        out.best_lr,
        out.val_acc
    ))
}

pub fn evaluate_cmd(mut ctx: Ctx, format: ReportFormat) -> Result<String> {
    let model_path = ctx.path(art::HYBRID);
    ctx.input(&model_path)?;
    let model = HybridModel::load(&model_path)?;
    let test = load_split(&mut ctx, art::SPLITS[2])?;
    if test.header.task.n_classes() != model.n_classes() {
        return Err(CliError::Data(format!(
            "model has {} classes but the {} test set has {}",
            model.n_classes(),
            test.header.task,
            test.header.task.n_classes()
        )));
    }
    let seqs: Vec<SequenceRef<'_>> = test.examples.iter().map(|e| SequenceRef::from(&e.tokens)).collect();
    let preds = model.predict(&seqs)?;
    let report = evaluate(&preds, &test.labels(), model.n_classes())?.with_task(test.header.task.to_string());
    ctx.write(&ctx.path(art::METRICS), &report.to_json())?;
    Ok(report.render(format).trim_end().to_string())
}

pub fn inspect_params(ctx: &Ctx, pretrain_only: bool, freeze: Option<FreezePolicy>, classes: Option<usize>) -> Result<String> {
    let model_cfg = &ctx.cfg.model;
    let model = EncoderModel::zeroed(model_cfg)?;
    let pretrain_total = count_trainable(&model, None, None);
    if pretrain_only {
        return Ok(grouped(pretrain_total));
    }
    let head = |c: usize| ClassifierHead::zeros(model_cfg.d_model, HEAD_HIDDEN, c);
    if freeze.is_some() || classes.is_some() {
        let policy = freeze.unwrap_or(ctx.cfg.freeze);
        policy.validate(model_cfg.n_layers)?;
        let c = classes.unwrap_or(ctx.cfg.task.task.n_classes());
        if c < 2 {
            return Err(CliError::Core(heartbert_core::Error::Parameter(
                "--classes must be at least 2".into(),
            )));
        }
        return Ok(grouped(count_trainable(&model, Some(policy), Some(&head(c)))));
    }
    let mut out = format!("pretraining (MLM head included): {}\n", grouped(pretrain_total));
    let _ = writeln!(out, "{:<14} {:>12} {:>12} {:>12}", "freeze", "3 classes", "4 classes", "5 classes");
    let mut policies = vec![FreezePolicy::AllFrozen, FreezePolicy::LastN(1)];
    if model_cfg.n_layers >= 3 {
        policies.push(FreezePolicy::LastN(3));
    }
    policies.push(FreezePolicy::AllUnfrozen);
    for p in policies {
        let cells: Vec<String> = [3, 4, 5]
            .iter()
            .map(|&c| grouped(count_trainable(&model, Some(p), Some(&head(c)))))
            .collect();
        let _ = writeln!(out, "{:<14} {:>12} {:>12} {:>12}", p.to_string(), cells[0], cells[1], cells[2]);
    }
    Ok(out.trim_end().to_string())
}

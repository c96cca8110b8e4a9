use std::path::Path;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sac_core::compressor::load_scores;
use sac_core::data::{self, Split, Tokenizer, RECALL, SEP};
use sac_core::eval::{self, Prediction};
use sac_core::io::{self as sio, CheckpointMeta};
use sac_core::train::{self, TrainOutcome};
use sac_core::{
    Checkpoint, Compressed, CompressionConfig, CompressorParams, Conditioning, MetricReport,
    ModelParams, Strategy, TrainSample,
};

use crate::config::{Config, ConfigError};
use crate::{Compress, DataKind, Dump, DumpKind, Eval, Finetune, GenData, Generate, Pretrain, TrainOut};

pub struct Ctx {
    pub cfg: Config,
    pub force: bool,
}

type Ckpt = Checkpoint<f32>;

fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

fn load_checkpoint(ctx: &Ctx, path: &Path) -> Result<(Ckpt, Tokenizer)> {
    let configured = ctx.cfg.tokenizer()?;
    let expected = ctx.cfg.model_config(configured.len());
    let ckpt = Ckpt::load(path, Some(&expected), ctx.force)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let tok = match &ckpt.meta.tokenizer {
        Some(spec) => Tokenizer::from_spec(spec)?,
        None => configured,
    };
    Ok((ckpt, tok))
}

fn compressor(ckpt: &Ckpt, path: &Path) -> Result<CompressorParams<f32>> {
    ckpt.compressor
        .clone()
        .ok_or_else(|| config_error(format!("{} holds no compressor", path.display())))
}

fn compression_of(ctx: &Ctx, ckpt: &Ckpt) -> CompressionConfig {
    ckpt.meta.compression.clone().unwrap_or_else(|| ctx.cfg.compression())
}

fn tokenize_all(tok: &Tokenizer, texts: &[String]) -> Result<Vec<Vec<usize>>> {
    Ok(texts.iter().map(|t| tok.tokenize(t)).collect::<sac_core::Result<_>>()?)
}

fn qa_samples(tok: &Tokenizer, records: &[sac_core::QARecord]) -> Result<Vec<TrainSample>> {
    Ok(records
        .iter()
        .map(|r| data::qa_sample(tok, r))
        .collect::<sac_core::Result<_>>()?)
}

/// Keeps the trace of an aborted run before passing the error on.
fn finish<P>(
    result: sac_core::Result<TrainOutcome<f32, P>>,
    trace_path: Option<&Path>,
) -> Result<TrainOutcome<f32, P>> {
    match result {
        Ok(out) => {
            if let Some(p) = trace_path {
                train::write_trace(p, &out.trace)?;
            }
            Ok(out)
        }
        Err(e) => {
            if let (sac_core::Error::TrainingAborted { trace, .. }, Some(p)) = (&e, trace_path) {
                train::write_trace(p, trace)?;
            }
            Err(e.into())
        }
    }
}

fn save(ckpt: &Ckpt, out: &TrainOut) -> Result<()> {
    ckpt.save(&out.out)
        .with_context(|| format!("writing {}", out.out.display()))?;
    let last = ckpt.meta.stage.as_str();
    println!("{last} checkpoint {} sha256 {}", out.out.display(), sio::file_digest(&out.out)?);
    Ok(())
}

fn report_loss(trace: &[sac_core::TraceRow]) {
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("steps {} loss {:.4} -> {:.4}", trace.len(), first.loss, last.loss);
    }
}

pub fn gen_data(ctx: &Ctx, a: &GenData) -> Result<()> {
    let d = &ctx.cfg.data;
    let seed = a.seed.unwrap_or_else(|| ctx.cfg.sub_seed("gen-data"));
    match a.kind {
        DataKind::Lm => {
            let docs = data::gen_lm_corpus(a.n, d.synthetic_doc_len, seed)?;
            data::write_corpus(&a.out, &docs)?;
        }
        DataKind::Qa => {
            let split = if a.ood { Split::Ood } else { Split::Id };
            let facts = a.facts.unwrap_or(d.synthetic_facts);
            let records = data::gen_kv_retrieval_qa(a.n, facts, seed, split)?;
            data::write_jsonl(&a.out, &records)?;
        }
    }
    println!("wrote {} items to {}", a.n, a.out.display());
    Ok(())
}

pub fn train_base(ctx: &Ctx, a: &TrainOut) -> Result<()> {
    let cfg = &ctx.cfg;
    let tok = cfg.tokenizer()?;
    let mcfg = cfg.model_config(tok.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed("init"));
    let base = ModelParams::<f32>::init(&mcfg, &mut rng)?;
    let docs = tokenize_all(&tok, &cfg.lm_docs()?)?;
    let qa = qa_samples(&tok, &cfg.qa_train()?)?;
    let out = finish(
        train::train_base(&mcfg, base, &docs, &qa, &cfg.train_config()),
        a.trace.as_deref(),
    )?;
    report_loss(&out.trace);
    let mut ckpt = Ckpt::new(mcfg, out.params);
    ckpt.meta = CheckpointMeta {
        stage: "base".into(),
        tokenizer: Some(tok.spec()),
        compression: None,
        seed: cfg.seed,
    };
    save(&ckpt, a)
}

fn train_compressor_stage(
    ctx: &Ctx,
    mut ckpt: Ckpt,
    stage: &str,
    ccfg: CompressionConfig,
    out: TrainOutcome<f32, CompressorParams<f32>>,
    a: &TrainOut,
) -> Result<()> {
    report_loss(&out.trace);
    ckpt.compressor = Some(out.params);
    ckpt.optim = Some(out.state);
    ckpt.meta.stage = stage.into();
    ckpt.meta.compression = Some(ccfg);
    ckpt.meta.seed = ctx.cfg.seed;
    save(&ckpt, a)
}

pub fn pretrain(ctx: &Ctx, a: &Pretrain) -> Result<()> {
    let cfg = &ctx.cfg;
    let (ckpt, tok) = load_checkpoint(ctx, &a.from)?;
    if ckpt.compressor.is_some() {
        return Err(config_error(format!(
            "{} already holds a compressor; pretraining starts from a base checkpoint",
            a.from.display()
        )));
    }
    let ccfg = cfg.compression();
    let mut tcfg = cfg.train_config();
    tcfg.allow_ablation |= a.allow_ablation;
    // Refuse a bad objective set before any work.
    train::resolve_pretrain_objectives(cfg.method, tcfg.objectives.as_deref(), tcfg.allow_ablation)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sub_seed("init.compressor"));
    let comp = CompressorParams::init(cfg.method, &ckpt.config, &ckpt.base, &cfg.lora_spec(), &ccfg, &mut rng)?;
    let docs = tokenize_all(&tok, &cfg.lm_docs()?)?;
    let recall = tok.vocab.id(RECALL);
    let out = finish(
        train::run_pretrain(&ckpt.config, &ckpt.base, comp, &docs, recall, &ccfg, &tcfg),
        a.out.trace.as_deref(),
    )?;
    train_compressor_stage(ctx, ckpt, "pretrain", ccfg, out, &a.out)
}

pub fn finetune(ctx: &Ctx, a: &Finetune) -> Result<()> {
    let (ckpt, tok) = load_checkpoint(ctx, &a.from)?;
    let comp = compressor(&ckpt, &a.from)?;
    let ccfg = compression_of(ctx, &ckpt);
    let qa = qa_samples(&tok, &ctx.cfg.qa_train()?)?;
    let out = finish(
        train::run_finetune(&ckpt.config, &ckpt.base, comp, &qa, &ccfg, &ctx.cfg.train_config()),
        a.out.trace.as_deref(),
    )?;
    train_compressor_stage(ctx, ckpt, "finetune", ccfg, out, &a.out)
}

pub fn compress(ctx: &Ctx, a: &Compress) -> Result<()> {
    let (ckpt, tok) = load_checkpoint(ctx, &a.from)?;
    let text = std::fs::read_to_string(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?;
    let tokens = tok.tokenize(&text)?;
    let repr = if a.full {
        eval::full_kv(&ckpt.config, &ckpt.base, &tokens)?
    } else {
        let comp = compressor(&ckpt, &a.from)?;
        let mut ccfg = compression_of(ctx, &ckpt);
        if let Some(r) = a.ratio {
            ccfg.ratio = r;
        }
        if let Some(p) = &a.scores {
            ccfg.strategy = Strategy::Scored {
                scores: load_scores(p, tokens.len())?,
            };
        }
        match sac_core::compress(&ckpt.config, &ckpt.base, &comp, &tokens, &ccfg)? {
            Compressed::Kv(r) => r,
            Compressed::Soft(_) => {
                return Err(config_error(format!(
                    "{} compresses into soft tokens, which have no KV blob form",
                    comp.method
                )))
            }
        }
    };
    let bytes = sio::save_blob(&a.out, &repr)?;
    println!("slots {} source_len {} bytes {}", repr.kv.slots(), repr.source_len, bytes);
    Ok(())
}

pub fn generate(ctx: &Ctx, a: &Generate) -> Result<()> {
    let (ckpt, tok) = load_checkpoint(ctx, &a.from)?;
    let blob = sio::load_blob::<f32>(&a.blob)
        .with_context(|| format!("loading blob {}", a.blob.display()))?;
    sio::check_geometry(&blob.kv, &ckpt.config)?;
    let mut prompt = tok.tokenize(&a.question)?;
    if !prompt.is_empty() {
        prompt.push(SEP);
    }
    let ids = eval::generate(
        &ckpt.config,
        &ckpt.base,
        &Compressed::Kv(blob),
        &prompt,
        a.max_new,
        &[data::EOS, data::PAD],
        ctx.cfg.train.continuation,
    )?;
    println!("{}", tok.detokenize(&ids));
    Ok(())
}

pub fn eval(ctx: &Ctx, a: &Eval) -> Result<()> {
    let records = match &a.records {
        Some(p) => data::load_jsonl(p)?,
        None => ctx.cfg.qa_eval()?,
    };
    let docs = a.docs.as_deref().map(data::load_corpus).transpose()?;
    let max_new = ctx.cfg.data.max_new;
    let start = ctx.cfg.train.continuation;
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut predictions: Vec<(String, Prediction)> = Vec::new();
    for (i, path) in a.from.iter().enumerate() {
        let (ckpt, tok) = load_checkpoint(ctx, path)?;
        let (cfg, base) = (&ckpt.config, &ckpt.base);
        let docs = docs.as_ref().map(|d| tokenize_all(&tok, d)).transpose()?;
        let recall = tok.vocab.id(RECALL);
        let mut row = |cond: Conditioning<'_, f32>| -> Result<()> {
            let (mut report, preds) =
                eval::evaluate_qa_detailed(cfg, base, &tok, &cond, &records, max_new, start)?;
            if let Some(d) = &docs {
                report.ppl = Some(eval::perplexity(cfg, base, &cond, d, recall, start)?);
            }
            let label = format!("{}@{}", report.method, report.ratio);
            predictions.extend(preds.into_iter().map(|p| (label.clone(), p)));
            reports.push(report);
            Ok(())
        };
        if a.full && i == 0 {
            row(Conditioning::Full)?;
        }
        let comp = compressor(&ckpt, path)?;
        let trained = compression_of(ctx, &ckpt);
        let ratios = if a.ratios.is_empty() {
            vec![trained.ratio]
        } else {
            a.ratios.clone()
        };
        for r in ratios {
            let ccfg = CompressionConfig {
                ratio: r,
                ..trained.clone()
            };
            row(Conditioning::Compressed { comp: &comp, ccfg: &ccfg })?;
        }
    }
    print!("{}", eval::report_table(&reports));
    if let Some(p) = &a.out {
        sio::write_atomic(p, eval::reports_csv(&reports).as_bytes())?;
    }
    if let Some(p) = &a.predictions {
        let mut s = String::new();
        for (label, pred) in &predictions {
            let mut v = serde_json::to_value(pred)?;
            v["run"] = label.clone().into();
            s.push_str(&serde_json::to_string(&v)?);
            s.push('\n');
        }
        sio::write_atomic(p, s.as_bytes())?;
    }
    Ok(())
}

pub fn dump(ctx: &Ctx, a: &Dump) -> Result<()> {
    let (ckpt, tok) = load_checkpoint(ctx, &a.from)?;
    let comp = compressor(&ckpt, &a.from)?;
    let ccfg = compression_of(ctx, &ckpt);
    let text = std::fs::read_to_string(&a.input)
        .with_context(|| format!("reading {}", a.input.display()))?;
    match a.kind {
        DumpKind::Attention => {
            let tokens = tok.tokenize(&text)?;
            let d = eval::dump_attention(&ckpt.config, &ckpt.base, &comp, &ccfg, &tok, &tokens)?;
            d.write(&a.out)?;
            println!("{} x {} attention map", d.rows.len(), d.cols.len());
        }
        DumpKind::Keys | DumpKind::Values => {
            let lines: Vec<String> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(String::from)
                .collect();
            let samples = tokenize_all(&tok, &lines)?;
            let values = matches!(a.kind, DumpKind::Values);
            let rows = eval::dump_kv(&ckpt.config, &ckpt.base, &comp, &ccfg, &samples, values)?;
            sio::write_atomic(&a.out, eval::kv_csv(&rows).as_bytes())?;
            println!("{} vectors", rows.len());
        }
    }
    Ok(())
}

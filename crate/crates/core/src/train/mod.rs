//! Objectives, the optimizer, and the training loops.

mod loss;
mod optim;

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{full_context, loss_ae, loss_lm, loss_qa, qa_sequence, sample_loss};
pub use optim::{adamw_step, clip_global_norm, warmup_lr, AdamW, OptimState, StepStats};

use crate::autograd::{Tape, Var};
use crate::compressor::{bind_frozen, CompressionConfig, CompressorParams, ContinuationStart, Method};
use crate::data::{lm_sample, TrainSample};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Ae,
    Lm,
    Qa,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Ae => "ae",
            Objective::Lm => "lm",
            Objective::Qa => "qa",
        })
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ae" => Ok(Objective::Ae),
            "lm" => Ok(Objective::Lm),
            "qa" => Ok(Objective::Qa),
            _ => Err(Error::Config(format!("unknown objective {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_base: f64,
    pub lr_pretrain: f64,
    pub lr_finetune: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub steps_base: usize,
    pub steps_pretrain: usize,
    pub steps_finetune: usize,
    pub seed: u64,
    /// Pretraining objectives; `None` takes the method's default.
    pub objectives: Option<Vec<Objective>>,
    pub allow_ablation: bool,
    pub continuation: ContinuationStart,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_base: 1e-3,
            lr_pretrain: 1e-4,
            lr_finetune: 5e-5,
            betas: (0.9, 0.95),
            weight_decay: 0.1,
            clip_norm: 2.0,
            warmup_steps: 300,
            batch_size: 8,
            steps_base: 2000,
            steps_pretrain: 2000,
            steps_finetune: 2000,
            seed: 0,
            objectives: None,
            allow_ablation: false,
            continuation: ContinuationStart::SourceLen,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_base", self.lr_base),
            ("lr_pretrain", self.lr_pretrain),
            ("lr_finetune", self.lr_finetune),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: 1e-8,
            weight_decay: self.weight_decay,
            clip_norm: self.clip_norm,
        }
    }
}

/// The method's default objective set, or the requested one if allowed.
pub fn resolve_pretrain_objectives(
    method: Method,
    requested: Option<&[Objective]>,
    allow_ablation: bool,
) -> Result<Vec<Objective>> {
    let mut set = match requested {
        None => match method {
            Method::Sac => vec![Objective::Lm],
            _ => vec![Objective::Ae, Objective::Lm],
        },
        Some(r) => r.to_vec(),
    };
    set.sort_unstable();
    set.dedup();
    if set.is_empty() {
        return Err(Error::Config("at least one pretraining objective is required".into()));
    }
    if set.contains(&Objective::Qa) {
        return Err(Error::Config("qa is a finetuning objective".into()));
    }
    if method == Method::Sac && set != [Objective::Lm] && !allow_ablation {
        return Err(Error::Config(
            "SAC pretrains with LM only; enable allow_ablation to override".into(),
        ));
    }
    Ok(set)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T, P> {
    pub params: P,
    pub trace: Vec<TraceRow>,
    pub state: OptimState<T>,
}

fn pick<'a, R: Rng>(rng: &mut R, pool: &'a [TrainSample], n: usize) -> Vec<&'a TrainSample> {
    (0..n).map(|_| &pool[rng.random_range(0..pool.len())]).collect()
}

/// Bookkeeping shared by every loop: finite checks, the update, the trace.
fn apply_step<T: Scalar>(
    step: usize,
    loss: f64,
    params: &mut [&mut Tensor<T>],
    grads: Vec<Option<Tensor<T>>>,
    state: &mut OptimState<T>,
    lr: f64,
    opt: &AdamW,
    trace: &mut Vec<TraceRow>,
) -> Result<()> {
    let abort = |reason: String, trace: &[TraceRow]| Error::TrainingAborted {
        step,
        reason,
        trace: trace.to_vec(),
    };
    if !loss.is_finite() {
        return Err(abort(format!("loss is {loss}"), trace));
    }
    let stats = match adamw_step(params, grads, state, lr, opt) {
        Ok(s) => s,
        Err(Error::NonFinite(what)) => return Err(abort(format!("non-finite {what}"), trace)),
        Err(e) => return Err(e),
    };
    trace.push(TraceRow {
        step,
        loss,
        lr,
        grad_norm: stats.grad_norm,
    });
    Ok(())
}

/// Mean loss over a batch of samples with a trainable compressor.
fn compressor_batch<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    comp: &CompressorParams<T>,
    batch: &[&TrainSample],
    ccfg: &CompressionConfig,
    start: ContinuationStart,
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::new();
    let bm = bind_frozen(base, &mut tape);
    let bc = comp.bind(&mut tape, true);
    let losses = batch
        .iter()
        .map(|s| sample_loss(&mut tape, cfg, &bm, Some(&bc), s, ccfg, start))
        .collect::<Result<Vec<Var>>>()?;
    let loss = tape.mean_scalars(&losses)?;
    let value = tape.value(loss).item().as_f64();
    let mut g = tape.backward(loss)?;
    Ok((value, bc.vars.iter().map(|&v| g.take(v)).collect()))
}

fn train_compressor<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    mut comp: CompressorParams<T>,
    pools: &[Vec<TrainSample>],
    ccfg: &CompressionConfig,
    tcfg: &TrainConfig,
    steps: usize,
    lr: f64,
) -> Result<TrainOutcome<T, CompressorParams<T>>> {
    tcfg.validate()?;
    ccfg.validate()?;
    let opt = tcfg.optimizer();
    let mut state = OptimState::new(comp.named().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7472_6169_6e00);
    let mut trace = Vec::with_capacity(steps);
    for step in 1..=steps {
        let pool = &pools[(step - 1) % pools.len()];
        let batch = pick(&mut rng, pool, tcfg.batch_size);
        let (loss, grads) = compressor_batch(cfg, base, &comp, &batch, ccfg, tcfg.continuation)?;
        let lr_t = warmup_lr(lr, step as u64, tcfg.warmup_steps);
        let mut params: Vec<&mut Tensor<T>> = comp.named_mut().into_iter().map(|(_, t)| t).collect();
        apply_step(step, loss, &mut params, grads, &mut state, lr_t, &opt, &mut trace)?;
    }
    Ok(TrainOutcome {
        params: comp,
        trace,
        state,
    })
}

/// Builds AE and LM sample pools from tokenized documents. With both
/// objectives the corpus is split in halves, AE first.
pub fn pretrain_pools(
    docs: &[Vec<usize>],
    objectives: &[Objective],
    recall: Option<usize>,
) -> Result<Vec<Vec<TrainSample>>> {
    let both = objectives.contains(&Objective::Ae) && objectives.contains(&Objective::Lm);
    let half = if both { docs.len() / 2 } else { 0 };
    let mut pools = Vec::new();
    for &o in objectives {
        let part = match (o, both) {
            (Objective::Ae, true) => &docs[..half],
            (Objective::Lm, true) => &docs[half..],
            _ => docs,
        };
        let pool: Vec<TrainSample> = match o {
            Objective::Ae => part
                .iter()
                .filter(|d| !d.is_empty())
                .map(|d| TrainSample::Ae { c: d.clone() })
                .collect(),
            Objective::Lm => part
                .iter()
                .filter(|d| d.len() >= 3)
                .map(|d| lm_sample(d, recall))
                .collect::<Result<_>>()?,
            Objective::Qa => return Err(Error::Config("qa is a finetuning objective".into())),
        };
        if pool.is_empty() {
            return Err(Error::EmptyCorpus(format!("no usable documents for the {o} objective")));
        }
        pools.push(pool);
    }
    Ok(pools)
}

/// Trains the compressor on documents with the method's pretraining
/// objectives, alternating AE and LM batches when both are active.
pub fn run_pretrain<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    comp: CompressorParams<T>,
    docs: &[Vec<usize>],
    recall: Option<usize>,
    ccfg: &CompressionConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T, CompressorParams<T>>> {
    let objectives =
        resolve_pretrain_objectives(comp.method, tcfg.objectives.as_deref(), tcfg.allow_ablation)?;
    let pools = pretrain_pools(docs, &objectives, recall)?;
    train_compressor(cfg, base, comp, &pools, ccfg, tcfg, tcfg.steps_pretrain, tcfg.lr_pretrain)
}

/// QA-only finetuning of the compressor.
pub fn run_finetune<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    comp: CompressorParams<T>,
    qa: &[TrainSample],
    ccfg: &CompressionConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T, CompressorParams<T>>> {
    if qa.is_empty() {
        return Err(Error::EmptyCorpus("no QA samples to finetune on".into()));
    }
    if !qa.iter().all(|s| matches!(s, TrainSample::Qa { .. })) {
        return Err(Error::Input("finetuning takes QA samples only".into()));
    }
    let pools = [qa.to_vec()];
    train_compressor(cfg, base, comp, &pools, ccfg, tcfg, tcfg.steps_finetune, tcfg.lr_finetune)
}

/// Trains the decoder itself: whole-document next-token loss alternating
/// with full-context QA. The result is returned frozen.
pub fn train_base<T: Scalar>(
    cfg: &ModelConfig,
    mut base: ModelParams<T>,
    docs: &[Vec<usize>],
    qa: &[TrainSample],
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<T, ModelParams<T>>> {
    tcfg.validate()?;
    cfg.validate()?;
    let lm: Vec<TrainSample> = docs
        .iter()
        .filter(|d| d.len() >= 2)
        .map(|d| TrainSample::Lm {
            c: Vec::new(),
            future: d.clone(),
        })
        .collect();
    let pools: Vec<Vec<TrainSample>> =
        [lm, qa.to_vec()].into_iter().filter(|p| !p.is_empty()).collect();
    if pools.is_empty() {
        return Err(Error::EmptyCorpus("no documents or QA samples for the base model".into()));
    }
    base.frozen = false;
    let opt = tcfg.optimizer();
    let mut state = OptimState::new(base.named().into_iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x6261_7365_00);
    let mut trace = Vec::with_capacity(tcfg.steps_base);
    let ccfg = CompressionConfig::new(1, cfg.max_positions);
    for step in 1..=tcfg.steps_base {
        let pool = &pools[(step - 1) % pools.len()];
        let batch = pick(&mut rng, pool, tcfg.batch_size);
        let mut tape = Tape::new();
        let bm = base.bind(&mut tape);
        let losses = batch
            .iter()
            .map(|s| sample_loss(&mut tape, cfg, &bm, None, s, &ccfg, tcfg.continuation))
            .collect::<Result<Vec<Var>>>()?;
        let loss = tape.mean_scalars(&losses)?;
        let value = tape.value(loss).item().as_f64();
        let mut g = tape.backward(loss)?;
        let grads = bm.vars().into_iter().map(|v| g.take(v)).collect();
        let lr_t = warmup_lr(tcfg.lr_base, step as u64, tcfg.warmup_steps);
        let mut params: Vec<&mut Tensor<T>> = base.named_mut().into_iter().map(|(_, t)| t).collect();
        apply_step(step, value, &mut params, grads, &mut state, lr_t, &opt, &mut trace)?;
    }
    base.frozen = true;
    Ok(TrainOutcome {
        params: base,
        trace,
        state,
    })
}

/// `step,loss,lr,grad_norm` with a header row.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,loss,lr,grad_norm\n");
    for r in trace {
        s.push_str(&format!("{},{},{},{}\n", r.step, r.loss, r.lr, r.grad_norm));
    }
    s
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    crate::io::write_atomic(path, trace_csv(trace).as_bytes())
}

pub fn read_trace(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("step,loss,lr,grad_norm") {
        return Err(Error::Format(format!("{} is not a loss trace", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| {
            let bad = || Error::Schema {
                line: i + 2,
                msg: format!("malformed trace row {l:?}"),
            };
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(TraceRow {
                step: f[0].parse().map_err(|_| bad())?,
                loss: f[1].parse().map_err(|_| bad())?,
                lr: f[2].parse().map_err(|_| bad())?,
                grad_norm: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Trailing moving average with the given window.
pub fn smoothed(trace: &[TraceRow], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut sum = 0.0;
    for (i, r) in trace.iter().enumerate() {
        sum += r.loss;
        if i >= w {
            sum -= trace[i - w].loss;
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::LoraSpec;
    use crate::model::Proj;

    fn tiny() -> (ModelConfig, ModelParams<f32>, CompressorParams<f32>, CompressionConfig) {
        let cfg = ModelConfig::small(1, 2, 16, 32, 24);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut base = ModelParams::init(&cfg, &mut rng).unwrap();
        base.frozen = true;
        let ccfg = CompressionConfig::new(2, 16);
        let spec = LoraSpec {
            rank: 2,
            alpha: 4.0,
            targets: Proj::ALL.to_vec(),
        };
        let comp = CompressorParams::init(Method::Sac, &cfg, &base, &spec, &ccfg, &mut rng).unwrap();
        (cfg, base, comp, ccfg)
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            lr_pretrain: 1e-2,
            lr_finetune: 1e-2,
            lr_base: 1e-2,
            warmup_steps: 5,
            batch_size: 2,
            steps_base: 12,
            steps_pretrain: 12,
            steps_finetune: 12,
            ..Default::default()
        }
    }

    fn docs() -> Vec<Vec<usize>> {
        (0..6).map(|i| (0..8).map(|j| 5 + (i + j) % 19).collect()).collect()
    }

    #[test]
    fn default_objectives() {
        assert_eq!(resolve_pretrain_objectives(Method::Sac, None, false).unwrap(), vec![Objective::Lm]);
        assert_eq!(
            resolve_pretrain_objectives(Method::X500, None, false).unwrap(),
            vec![Objective::Ae, Objective::Lm]
        );
        let ae = [Objective::Ae];
        assert!(matches!(
            resolve_pretrain_objectives(Method::Sac, Some(&ae), false),
            Err(Error::Config(_))
        ));
        assert_eq!(resolve_pretrain_objectives(Method::Sac, Some(&ae), true).unwrap(), vec![Objective::Ae]);
        assert!(resolve_pretrain_objectives(Method::Icae, Some(&[Objective::Qa]), true).is_err());
        assert!(resolve_pretrain_objectives(Method::Icae, Some(&[]), true).is_err());
    }

    #[test]
    fn both_objectives_split_halves() {
        let d = docs();
        let pools = pretrain_pools(&d, &[Objective::Ae, Objective::Lm], None).unwrap();
        assert_eq!(pools[0].len(), 3);
        assert_eq!(pools[1].len(), 3);
        assert_eq!(pools[0][0], TrainSample::Ae { c: d[0].clone() });
        let pools = pretrain_pools(&d, &[Objective::Lm], None).unwrap();
        assert_eq!(pools[0].len(), 6);
    }

    #[test]
    fn pretrain_is_deterministic_and_keeps_decoder_frozen() {
        let (cfg, base, comp, ccfg) = tiny();
        let before = base.clone();
        let t = quick();
        let a = run_pretrain(&cfg, &base, comp.clone(), &docs(), None, &ccfg, &t).unwrap();
        let b = run_pretrain(&cfg, &base, comp.clone(), &docs(), None, &ccfg, &t).unwrap();
        assert_eq!(a.trace.len(), 12);
        assert_eq!(a.trace, b.trace);
        assert!(a.trace.iter().zip(&b.trace).all(|(x, y)| x.loss.to_bits() == y.loss.to_bits()));
        assert!(base.bitwise_eq(&before));
        assert_ne!(a.params.anchor_embedding, comp.anchor_embedding);
        // Unused by LM-only SAC.
        assert!(a.params.ae_trigger.bitwise_eq(&comp.ae_trigger));
        for r in &a.trace[..4] {
            assert!((r.lr - 1e-2 * r.step as f64 / 5.0).abs() < 1e-15);
        }
        assert!(a.trace[4..].iter().all(|r| r.lr == 1e-2));
    }

    #[test]
    fn finetune_trace_length_and_sample_kinds() {
        let (cfg, base, comp, ccfg) = tiny();
        let qa = vec![TrainSample::Qa { c: vec![5, 6, 7, 8], q: vec![9], a: vec![10] }];
        let out = run_finetune(&cfg, &base, comp.clone(), &qa, &ccfg, &quick()).unwrap();
        assert_eq!(out.trace.len(), 12);
        assert_eq!(out.state.step, 12);
        let bad = vec![TrainSample::Ae { c: vec![5] }];
        assert!(run_finetune(&cfg, &base, comp, &bad, &ccfg, &quick()).is_err());
    }

    #[test]
    fn nan_loss_aborts_with_trace() {
        let (cfg, mut base, comp, ccfg) = tiny();
        let t = quick();
        base.head.data_mut()[0] = f32::NAN;
        match run_pretrain(&cfg, &base, comp, &docs(), None, &ccfg, &t) {
            Err(e @ Error::TrainingAborted { .. }) => {
                assert!(e.is_numerical());
                if let Error::TrainingAborted { step, trace, .. } = e {
                    assert_eq!(step, 1);
                    assert!(trace.is_empty());
                }
            }
            other => panic!("expected abort, got {other:?}"),
        }
    }

    #[test]
    fn base_training_lowers_loss_and_refreezes() {
        let (cfg, base, _, _) = tiny();
        let mut t = quick();
        t.steps_base = 60;
        let out = train_base(&cfg, base.clone(), &docs(), &[], &t).unwrap();
        assert!(out.params.frozen);
        let s = smoothed(&out.trace, 10);
        assert!(s[59] < s[9], "{} !< {}", s[59], s[9]);
        assert!(!out.params.bitwise_eq(&base));
    }

    #[test]
    fn trace_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let rows = vec![
            TraceRow { step: 1, loss: 3.25, lr: 1e-4, grad_norm: 0.5 },
            TraceRow { step: 2, loss: 0.1 + 0.2, lr: 2e-4, grad_norm: 1.0 / 3.0 },
        ];
        write_trace(&p, &rows).unwrap();
        assert_eq!(read_trace(&p).unwrap(), rows);
    }

    #[test]
    fn smoothing_window() {
        let rows: Vec<TraceRow> = [4.0, 2.0, 6.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &l)| TraceRow { step: i + 1, loss: l, lr: 0.0, grad_norm: 0.0 })
            .collect();
        assert_eq!(smoothed(&rows, 2), vec![4.0, 3.0, 4.0, 3.0]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig { lr_finetune: 0.0, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { clip_norm: -1.0, ..Default::default() };
        assert!(bad.validate().is_err());
    }
}

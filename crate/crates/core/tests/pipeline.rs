use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sac_core::data::{self, gen_kv_retrieval_qa, gen_lm_corpus, qa_sample, Split, RECALL};
use sac_core::eval::{self, evaluate_qa_detailed, perplexity, reports_csv, Conditioning};
use sac_core::io::{self, CheckpointMeta};
use sac_core::train::{read_trace, run_finetune, run_pretrain, train_base, write_trace};
use sac_core::{
    Checkpoint, Compressed, CompressionConfig, CompressorParams, LoraSpec, Method, ModelConfig,
    ModelParams, Tokenizer, TrainConfig, TrainSample,
};

#[test]
fn files_to_answers() {
    let dir = tempfile::tempdir().unwrap();
    let tok = Tokenizer::synthetic();
    let corpus_path = dir.path().join("lm.txt");
    let qa_path = dir.path().join("qa.jsonl");
    data::write_corpus(&corpus_path, &gen_lm_corpus(64, (20, 40), 1).unwrap()).unwrap();
    data::write_jsonl(&qa_path, &gen_kv_retrieval_qa(64, 3, 2, Split::Id).unwrap()).unwrap();

    let docs: Vec<Vec<usize>> = data::load_corpus(&corpus_path)
        .unwrap()
        .iter()
        .map(|d| tok.tokenize(d).unwrap())
        .collect();
    let records = data::load_jsonl(&qa_path).unwrap();
    let qa: Vec<TrainSample> = records.iter().map(|r| qa_sample(&tok, r).unwrap()).collect();

    let cfg = ModelConfig::small(1, 2, 16, 32, tok.len());
    let tcfg = TrainConfig {
        lr_base: 3e-3,
        lr_pretrain: 1e-3,
        lr_finetune: 1e-3,
        warmup_steps: 5,
        steps_base: 20,
        steps_pretrain: 10,
        steps_finetune: 10,
        ..TrainConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let base = train_base(&cfg, ModelParams::<f32>::init(&cfg, &mut rng).unwrap(), &docs, &qa, &tcfg).unwrap();
    let trace_path = dir.path().join("base.csv");
    write_trace(&trace_path, &base.trace).unwrap();
    assert_eq!(read_trace(&trace_path).unwrap(), base.trace);
    let base = base.params;

    let ccfg = CompressionConfig::new(4, 16);
    let comp = CompressorParams::init(Method::Sac, &cfg, &base, &LoraSpec::default(), &ccfg, &mut rng).unwrap();
    let pre = run_pretrain(&cfg, &base, comp, &docs, tok.vocab.id(RECALL), &ccfg, &tcfg).unwrap();
    let ft = run_finetune(&cfg, &base, pre.params, &qa, &ccfg, &tcfg).unwrap();

    let ck_path = dir.path().join("sac.ckpt");
    let mut ck = Checkpoint::new(cfg.clone(), base.clone());
    ck.compressor = Some(ft.params.clone());
    ck.optim = Some(ft.state.clone());
    ck.meta = CheckpointMeta {
        stage: "finetune".into(),
        tokenizer: Some(tok.spec()),
        compression: Some(ccfg.clone()),
        seed: 3,
    };
    ck.save(&ck_path).unwrap();
    let loaded = Checkpoint::<f32>::load(&ck_path, Some(&cfg), false).unwrap();
    assert!(loaded.bitwise_eq(&ck));
    assert_eq!(io::file_digest(&ck_path).unwrap().len(), 64);
    let comp = loaded.compressor.unwrap();
    let tok = Tokenizer::from_spec(&loaded.meta.tokenizer.unwrap()).unwrap();

    // Blob on disk answers exactly like in-memory compression.
    let r = &records[0];
    let c = tok.tokenize(&r.context).unwrap();
    let q = tok.tokenize(&r.question).unwrap();
    let repr = sac_core::compress_context(&c, &ccfg, &comp, &cfg, &base).unwrap();
    let blob_path = dir.path().join("ctx.skvb");
    let bytes = io::save_blob(&blob_path, &repr).unwrap();
    assert_eq!(bytes, std::fs::metadata(&blob_path).unwrap().len() as usize);
    let blob = io::load_blob::<f32>(&blob_path).unwrap();
    io::check_geometry(&blob.kv, &cfg).unwrap();
    let mut prompt = q.clone();
    prompt.push(data::SEP);
    let from_blob = eval::generate(&cfg, &base, &Compressed::Kv(blob), &prompt, 4, &[data::EOS, data::PAD], Default::default()).unwrap();
    let cond = Conditioning::Compressed { comp: &comp, ccfg: &ccfg };
    let direct = eval::answer(&cfg, &base, &cond, &c, &q, 4, Default::default()).unwrap();
    assert_eq!(from_blob, direct);

    let (report, preds) = evaluate_qa_detailed(&cfg, &base, &tok, &cond, &records[..8], 4, Default::default()).unwrap();
    assert_eq!(preds.len(), 8);
    assert_eq!(report.n_records, 8);
    assert!(report.em <= report.f1 + 1e-9);
    let ppl = perplexity(&cfg, &base, &cond, &docs[..8], tok.vocab.id(RECALL), Default::default()).unwrap();
    assert!(ppl.is_finite() && ppl > 1.0);
    let csv = reports_csv(&[report]);
    assert!(csv.starts_with("method,ratio,f1,em,ppl,n_records\nsac,4,"));
}

#[test]
fn malformed_inputs_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.jsonl");
    std::fs::write(&p, "{\"context\":\"a\",\"question\":\"b\",\"answer\":\"c\"}\n{\"context\":\"a\"}\n").unwrap();
    let err = data::load_jsonl(&p).unwrap_err().to_string();
    assert!(err.contains('2'), "{err}");
    std::fs::write(&p, "").unwrap();
    assert!(data::load_jsonl(&p).is_err());

    let blob = dir.path().join("x.skvb");
    std::fs::write(&blob, b"SKVB garbage").unwrap();
    assert!(io::load_blob::<f32>(&blob).is_err());
    let ck = dir.path().join("x.ckpt");
    std::fs::write(&ck, b"not a checkpoint").unwrap();
    assert!(Checkpoint::<f32>::load(&ck, None, false).is_err());
}

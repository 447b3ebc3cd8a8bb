use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use hardneg::checkpoint::{load_checkpoint, save_checkpoint};
use hardneg::data::{
    filter_pairs, load_records, save_jsonl, JaccardScorer, JsonlRecord, PairRecord, PassageRecord, RetrievalRecord,
    StsRecord,
};
use hardneg::encoder::{tokenize, EncoderParams};
use hardneg::eval::{mrl_sweep, sts_spearman, EvalResult, EvalSet};
use hardneg::gradcheck::{gradient_suite, Objective, DEFAULT_TOLERANCE};
use hardneg::metrics::{MetricsError, RunMetrics};
use hardneg::miner::{Corpus, LedgerRecord};
use hardneg::synth::{synth_corpus, SynthConfig};
use hardneg::trainer::{
    derive_seed, examples_from_records, examples_to_records, finetune_loop, mine_initial_negatives, prepare_pairs,
    prepare_sts, pretrain_loop, sequential_baseline_loop, Task,
};
use hardneg::TrainConfig;
use serde::Serialize;

use crate::manifest::{digest, OutputLock, RunManifest};
use crate::{curves, CliError, Command, Common, DataFiles, TrainOverrides};

pub const PAIRS: &str = "pairs.jsonl";
pub const RETRIEVAL: &str = "retrieval.jsonl";
pub const STS: &str = "sts.jsonl";
pub const CLASSIFICATION: &str = "classification.jsonl";
pub const CORPUS: &str = "corpus.jsonl";
pub const CHECKPOINT: &str = "model.ckpt";
pub const METRICS: &str = "metrics.csv";
pub const LEDGER: &str = "mining_ledger.csv";
pub const TRACE: &str = "shard_trace.jsonl";
pub const TASKS: &str = "tasks.csv";
pub const FILTER_REPORT: &str = "filter_report.json";
pub const EVAL: &str = "eval.json";
pub const GRADCHECK: &str = "gradcheck.json";

pub fn dispatch(cmd: Command, argv: &[String]) -> Result<(), CliError> {
    match cmd {
        Command::Synth {
            common,
            n_queries,
            n_clusters,
            per_cluster,
            n_sts,
            noise_fraction,
        } => {
            let mut cfg: SynthConfig = match &common.config {
                Some(p) => serde_json::from_str(&read_text(p)?)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?,
                None => SynthConfig::default(),
            };
            cfg.seed = common.seed.unwrap_or(cfg.seed);
            cfg.n_queries = n_queries.unwrap_or(cfg.n_queries);
            cfg.n_clusters = n_clusters.unwrap_or(cfg.n_clusters);
            cfg.per_cluster = per_cluster.unwrap_or(cfg.per_cluster);
            cfg.n_sts = n_sts.unwrap_or(cfg.n_sts);
            cfg.noise_fraction = noise_fraction.unwrap_or(cfg.noise_fraction);
            synth(&common, cfg, argv)
        }
        Command::Filter {
            common,
            files,
            threshold,
        } => filter(&common, &files, threshold, argv),
        Command::Pretrain {
            common,
            files,
            overrides,
        } => pretrain(&common, &files, &overrides, argv),
        Command::MineInit {
            common,
            files,
            checkpoint,
        } => mine_init(&common, &files, &checkpoint, argv),
        Command::Finetune {
            common,
            files,
            overrides,
            checkpoint,
        } => finetune(&common, &files, &overrides, &checkpoint, false, argv),
        Command::FinetuneSequential {
            common,
            files,
            overrides,
            checkpoint,
        } => finetune(&common, &files, &overrides, &checkpoint, true, argv),
        Command::Eval {
            common,
            files,
            checkpoint,
            k,
        } => eval(&common, &files, &checkpoint, k, argv),
        Command::ExportCurves {
            out,
            metrics,
            ledger,
            baseline,
        } => {
            let mut inputs = vec![metrics.clone()];
            inputs.extend(ledger.clone());
            inputs.extend(baseline.clone());
            let run = Run::start("export-curves", argv, &out, &inputs)?;
            let written = curves::export_curves(&metrics, ledger.as_deref(), baseline.as_deref(), &out)?;
            run.finish(None, None, &written)
        }
        Command::Gradcheck { seeds, step, out } => gradcheck(seeds, step, out.as_deref(), argv),
    }
}

/// A run in progress: holds the output lock and the manifest under construction.
struct Run {
    manifest: RunManifest,
    out: PathBuf,
    _lock: OutputLock,
}

impl Run {
    fn start(subcommand: &str, argv: &[String], out: &Path, inputs: &[PathBuf]) -> Result<Self, CliError> {
        for p in inputs {
            if !p.is_file() {
                return Err(CliError::Usage(format!("input file {} does not exist", p.display())));
            }
        }
        let lock = OutputLock::acquire(out)?;
        let mut manifest = RunManifest::new(subcommand, argv);
        for p in inputs {
            manifest.inputs.push(digest(p).map_err(|source| CliError::Io {
                path: p.clone(),
                source,
            })?);
        }
        Ok(Self {
            manifest,
            out: out.to_path_buf(),
            _lock: lock,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn finish(mut self, config: Option<serde_json::Value>, seed: Option<u64>, outputs: &[PathBuf]) -> Result<(), CliError> {
        self.manifest.config = config;
        self.manifest.seed = seed;
        for p in outputs {
            self.manifest.outputs.push(digest(p).map_err(|source| CliError::Io {
                path: p.clone(),
                source,
            })?);
        }
        self.manifest.write(&self.out)
    }
}

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

/// Explicit path, else `<data>/<name>`; one of the two must be given.
fn resolve(explicit: &Option<PathBuf>, data: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    match (explicit, data) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(d)) => Ok(d.join(name)),
        (None, None) => Err(CliError::Usage(format!(
            "no `{name}` input: pass --data DIR or the matching file flag"
        ))),
    }
}

fn load<R: JsonlRecord>(path: &Path) -> Result<Vec<R>, CliError> {
    load_records(path, false).map_err(|e| CliError::invalid(path.display(), e))
}

fn load_corpus(path: &Path, cfg: &TrainConfig) -> Result<Corpus, CliError> {
    let texts = load::<PassageRecord>(path)?.into_iter().map(|p| p.text).collect();
    Corpus::new(texts, &cfg.model.tokenizer()).map_err(|e| CliError::invalid(path.display(), e))
}

fn read_config(path: &Path) -> Result<TrainConfig, CliError> {
    TrainConfig::from_json(&read_text(path)?).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn apply_overrides(cfg: &mut TrainConfig, common: &Common, ov: &TrainOverrides) {
    cfg.seed = common.seed.unwrap_or(cfg.seed);
    cfg.total_steps = ov.steps.unwrap_or(cfg.total_steps);
    cfg.lr = ov.lr.unwrap_or(cfg.lr);
    if ov.static_negatives {
        cfg.dynamic_mining = false;
    }
}

fn validated(cfg: TrainConfig, context: &str) -> Result<TrainConfig, CliError> {
    cfg.validate().map_err(|e| CliError::invalid(context, e))?;
    Ok(cfg)
}

fn config_json(cfg: &TrainConfig) -> Option<serde_json::Value> {
    Some(serde_json::to_value(cfg).expect("config serializes"))
}

/// Loads a checkpoint and resolves the run config: `--config` when given,
/// otherwise the config stored in the checkpoint. The model shape always
/// comes from the checkpoint.
fn load_model(
    checkpoint: &Path,
    common: &Common,
    ov: &TrainOverrides,
) -> Result<(EncoderParams<f64>, TrainConfig), CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::Usage(format!("checkpoint {} does not exist", checkpoint.display())));
    }
    let (params, stored) = load_checkpoint(checkpoint).map_err(|e| CliError::invalid(checkpoint.display(), e))?;
    let mut cfg = match &common.config {
        Some(p) => read_config(p)?,
        None => stored.clone(),
    };
    cfg.model = stored.model;
    cfg.model.vocab_size = params.vocab_size();
    cfg.model.d_model = params.d_model();
    cfg.model.dim = params.dim();
    apply_overrides(&mut cfg, common, ov);
    Ok((params, validated(cfg, "config")?))
}

fn inputs_with_config(common: &Common, files: &[&Path]) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = files.iter().map(|p| p.to_path_buf()).collect();
    v.extend(common.config.clone());
    v
}

fn write_metrics(path: &Path, metrics: &RunMetrics) -> Result<(), CliError> {
    let file = File::create(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    metrics
        .write_csv(BufWriter::new(file))
        .map_err(|e| CliError::runtime(path.display(), e))
}

fn write_csv_rows<R: Serialize>(path: &Path, header: &[&str], rows: &[R]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::runtime(path.display(), MetricsError::from(e));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    if rows.is_empty() {
        w.write_record(header).map_err(err)?;
    }
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn save<R: Serialize>(path: &Path, records: &[R]) -> Result<(), CliError> {
    save_jsonl(path, records).map_err(|e| CliError::runtime(path.display(), e))
}

fn synth(common: &Common, cfg: SynthConfig, argv: &[String]) -> Result<(), CliError> {
    let inputs: Vec<PathBuf> = common.config.iter().cloned().collect();
    let run = Run::start("synth", argv, &common.out, &inputs)?;
    let data = synth_corpus(&cfg).map_err(|e| CliError::invalid("synthetic config", e))?;
    let passages: Vec<PassageRecord> = data.corpus.iter().map(|t| PassageRecord { text: t.clone() }).collect();
    let outputs = [PAIRS, RETRIEVAL, STS, CLASSIFICATION, CORPUS].map(|n| run.path(n));
    save(&outputs[0], &data.pairs)?;
    save(&outputs[1], &data.retrieval)?;
    save(&outputs[2], &data.sts)?;
    save(&outputs[3], &data.classification)?;
    save(&outputs[4], &passages)?;
    println!(
        "synth: {} passages, {} pairs, {} retrieval queries, {} sts pairs",
        data.corpus.len(),
        data.pairs.len(),
        data.retrieval.len(),
        data.sts.len()
    );
    let seed = cfg.seed;
    run.finish(Some(serde_json::to_value(cfg).expect("config serializes")), Some(seed), &outputs)
}

fn filter(common: &Common, files: &DataFiles, threshold: f64, argv: &[String]) -> Result<(), CliError> {
    let pairs_path = resolve(&files.pairs, &common.data, PAIRS)?;
    let run = Run::start("filter", argv, &common.out, std::slice::from_ref(&pairs_path))?;
    let pairs: Vec<PairRecord> = load(&pairs_path)?;
    let (kept, report) =
        filter_pairs(&pairs, &JaccardScorer, threshold).map_err(|e| CliError::invalid("threshold", e))?;
    let out_pairs = run.path(PAIRS);
    let out_report = run.path(FILTER_REPORT);
    save(&out_pairs, &kept)?;
    fs::write(&out_report, serde_json::to_string_pretty(&report).expect("report serializes") + "\n").map_err(
        |source| CliError::Io {
            path: out_report.clone(),
            source,
        },
    )?;
    println!("filter: kept {} of {} (threshold {})", report.kept, report.input, report.threshold);
    run.finish(Some(serde_json::json!({ "threshold": threshold, "scorer": "jaccard" })), None, &[out_pairs, out_report])
}

fn pretrain(common: &Common, files: &DataFiles, ov: &TrainOverrides, argv: &[String]) -> Result<(), CliError> {
    let pairs_path = resolve(&files.pairs, &common.data, PAIRS)?;
    let mut cfg = match &common.config {
        Some(p) => read_config(p)?,
        None => TrainConfig::default(),
    };
    apply_overrides(&mut cfg, common, ov);
    let cfg = validated(cfg, "config")?;
    let run = Run::start("pretrain", argv, &common.out, &inputs_with_config(common, &[&pairs_path]))?;
    let records: Vec<PairRecord> = load(&pairs_path)?;
    let pairs = prepare_pairs(&records, &cfg.model.tokenizer()).map_err(|e| CliError::invalid(pairs_path.display(), e))?;
    let m = &cfg.model;
    let params = EncoderParams::init(m.vocab_size, m.d_model, m.dim, derive_seed(cfg.seed, "init", 0));
    let out = pretrain_loop(&cfg, &pairs, params).map_err(|e| CliError::train("pretraining", e))?;
    let ckpt = run.path(CHECKPOINT);
    let metrics = run.path(METRICS);
    save_checkpoint(&out.params, &cfg, &ckpt).map_err(|e| CliError::runtime(ckpt.display(), e))?;
    write_metrics(&metrics, &out.metrics)?;
    if let Some(last) = out.metrics.records.last() {
        println!("pretrain: {} steps, final loss {:.6}", out.optimizer_steps, last.loss_total);
    }
    run.finish(config_json(&cfg), Some(cfg.seed), &[ckpt, metrics])
}

fn mine_init(common: &Common, files: &DataFiles, checkpoint: &Path, argv: &[String]) -> Result<(), CliError> {
    let retrieval_path = resolve(&files.retrieval, &common.data, RETRIEVAL)?;
    let corpus_path = resolve(&files.corpus, &common.data, CORPUS)?;
    let (params, cfg) = load_model(checkpoint, common, &TrainOverrides::default())?;
    let inputs = inputs_with_config(common, &[checkpoint, &retrieval_path, &corpus_path]);
    let run = Run::start("mine-init", argv, &common.out, &inputs)?;
    let records: Vec<RetrievalRecord> = load(&retrieval_path)?;
    let corpus = load_corpus(&corpus_path, &cfg)?;
    let examples =
        mine_initial_negatives(&params, &records, &corpus, &cfg).map_err(|e| CliError::train("initial mining", e))?;
    let out = run.path(RETRIEVAL);
    save(&out, &examples_to_records(&examples, &corpus))?;
    println!(
        "mine-init: installed {} negatives for each of {} queries",
        cfg.negatives_per_query(),
        examples.len()
    );
    run.finish(config_json(&cfg), Some(cfg.seed), &[out])
}

#[derive(Serialize)]
struct TaskRow {
    step: u64,
    task: Task,
}

fn finetune(
    common: &Common,
    files: &DataFiles,
    ov: &TrainOverrides,
    checkpoint: &Path,
    sequential: bool,
    argv: &[String],
) -> Result<(), CliError> {
    let name = if sequential { "finetune-sequential" } else { "finetune" };
    let retrieval_path = resolve(&files.retrieval, &common.data, RETRIEVAL)?;
    let sts_path = resolve(&files.sts, &common.data, STS)?;
    let corpus_path = resolve(&files.corpus, &common.data, CORPUS)?;
    let (params, cfg) = load_model(checkpoint, common, ov)?;
    let inputs = inputs_with_config(common, &[checkpoint, &retrieval_path, &sts_path, &corpus_path]);
    let run = Run::start(name, argv, &common.out, &inputs)?;
    let records: Vec<RetrievalRecord> = load(&retrieval_path)?;
    if records.iter().all(|r| r.negatives.is_empty()) {
        return Err(CliError::Usage(format!(
            "{}: no installed negatives; run `mine-init` first",
            retrieval_path.display()
        )));
    }
    let sts_records: Vec<StsRecord> = load(&sts_path)?;
    let corpus = load_corpus(&corpus_path, &cfg)?;
    let sts = prepare_sts(&sts_records, &cfg.model.tokenizer()).map_err(|e| CliError::invalid(sts_path.display(), e))?;
    let examples = examples_from_records(&params, &records, &corpus, &cfg)
        .map_err(|e| CliError::train(retrieval_path.display(), e))?;

    let ckpt = run.path(CHECKPOINT);
    let metrics = run.path(METRICS);
    let mut outputs = vec![ckpt.clone(), metrics.clone()];
    if sequential {
        let out = sequential_baseline_loop(&cfg, &examples, &sts, &corpus, params)
            .map_err(|e| CliError::train("sequential fine-tuning", e))?;
        save_checkpoint(&out.params, &cfg, &ckpt).map_err(|e| CliError::runtime(ckpt.display(), e))?;
        write_metrics(&metrics, &out.metrics)?;
        let tasks = run.path(TASKS);
        let rows: Vec<TaskRow> = out.tasks.iter().enumerate().map(|(s, &task)| TaskRow { step: s as u64, task }).collect();
        write_csv_rows(&tasks, &["step", "task"], &rows)?;
        outputs.push(tasks);
        if let Some(last) = out.metrics.records.last() {
            println!("{name}: {} steps, final retri + sts {:.6}", out.optimizer_steps, last.loss_total);
        }
    } else {
        let out = finetune_loop(&cfg, examples, &sts, &corpus, params).map_err(|e| CliError::train("fine-tuning", e))?;
        save_checkpoint(&out.params, &cfg, &ckpt).map_err(|e| CliError::runtime(ckpt.display(), e))?;
        write_metrics(&metrics, &out.metrics)?;
        let ledger = run.path(LEDGER);
        write_csv_rows::<LedgerRecord>(
            &ledger,
            &["step", "example_id", "i", "initial_score", "current_avg", "replaced"],
            &out.ledger,
        )?;
        let negatives = run.path(RETRIEVAL);
        save(&negatives, &examples_to_records(&out.examples, &corpus))?;
        outputs.extend([ledger, negatives]);
        if cfg.trace_shards {
            let trace = run.path(TRACE);
            let file = File::create(&trace).map_err(|source| CliError::Io {
                path: trace.clone(),
                source,
            })?;
            hardneg::shard::write_trace(BufWriter::new(file), &out.trace).map_err(|source| CliError::Io {
                path: trace.clone(),
                source,
            })?;
            outputs.push(trace);
        }
        if let Some(last) = out.metrics.records.last() {
            println!(
                "{name}: {} steps, {} mining passes, {} replacements, final loss {:.6}",
                out.optimizer_steps,
                out.mining_passes,
                out.metrics.total_replacements(),
                last.loss_total
            );
        }
    }
    run.finish(config_json(&cfg), Some(cfg.seed), &outputs)
}

#[derive(Serialize)]
struct EvalReport {
    queries: usize,
    corpus: usize,
    random_baseline: f64,
    results: Vec<EvalResult>,
}

fn eval(common: &Common, files: &DataFiles, checkpoint: &Path, k: usize, argv: &[String]) -> Result<(), CliError> {
    let retrieval_path = resolve(&files.retrieval, &common.data, RETRIEVAL)?;
    let corpus_path = resolve(&files.corpus, &common.data, CORPUS)?;
    let sts_path = resolve(&files.sts, &common.data, STS).ok().filter(|p| files.sts.is_some() || p.is_file());
    let (params, cfg) = load_model(checkpoint, common, &TrainOverrides::default())?;
    let mut input_files: Vec<&Path> = vec![checkpoint, &retrieval_path, &corpus_path];
    input_files.extend(sts_path.as_deref());
    let run = Run::start("eval", argv, &common.out, &inputs_with_config(common, &input_files))?;
    let tok = cfg.model.tokenizer();
    let records: Vec<RetrievalRecord> = load(&retrieval_path)?;
    let corpus = load_corpus(&corpus_path, &cfg)?;
    let mut set = EvalSet {
        query_tokens: Vec::with_capacity(records.len()),
        gold: Vec::with_capacity(records.len()),
    };
    for (i, r) in records.iter().enumerate() {
        let gold = corpus.id_of(&r.positive).ok_or_else(|| {
            CliError::invalid(retrieval_path.display(), hardneg::trainer::TrainError::NotInCorpus(i, "positive"))
        })?;
        set.query_tokens
            .push(tokenize(&r.query, &tok).map_err(|e| CliError::invalid(retrieval_path.display(), e))?);
        set.gold.push(gold);
    }
    let mut dims = cfg.mrl_dims.clone();
    if !dims.contains(&cfg.model.dim) {
        dims.push(cfg.model.dim);
    }
    let mut results = mrl_sweep(&set, &corpus, &params, &dims, k).map_err(|e| CliError::invalid("evaluation", e))?;
    if let Some(p) = &sts_path {
        let sts = prepare_sts(&load::<StsRecord>(p)?, &tok).map_err(|e| CliError::invalid(p.display(), e))?;
        let value = sts_spearman(&params, &sts).map_err(|e| CliError::runtime(p.display(), e))?;
        results.push(EvalResult {
            metric: "sts_spearman".into(),
            value,
            k: None,
            dim: None,
        });
    }
    let report = EvalReport {
        queries: set.gold.len(),
        corpus: corpus.len(),
        random_baseline: k as f64 / corpus.len() as f64,
        results,
    };
    for r in &report.results {
        match r.dim {
            Some(d) => println!("{} dim {d}: {:.6}", r.metric, r.value),
            None => println!("{}: {:.6}", r.metric, r.value),
        }
    }
    let out = run.path(EVAL);
    fs::write(&out, serde_json::to_string_pretty(&report).expect("report serializes") + "\n").map_err(|source| {
        CliError::Io {
            path: out.clone(),
            source,
        }
    })?;
    run.finish(config_json(&cfg), Some(cfg.seed), &[out])
}

#[derive(Serialize)]
struct GradcheckReport {
    step: f64,
    tolerance: f64,
    seeds: u64,
    max_relative_error: Vec<(Objective, f64)>,
    cases: Vec<hardneg::gradcheck::GradCheckCase>,
}

fn gradcheck(seeds: u64, step: f64, out: Option<&Path>, argv: &[String]) -> Result<(), CliError> {
    if seeds == 0 || !(step > 0.0 && step.is_finite()) {
        return Err(CliError::Usage("--seeds must be positive and --step a positive number".into()));
    }
    let run = out.map(|o| Run::start("gradcheck", argv, o, &[])).transpose()?;
    let cases = gradient_suite(seeds, step).map_err(|e| CliError::runtime("gradient suite", e))?;
    let worst: Vec<(Objective, f64)> = Objective::ALL
        .iter()
        .map(|&o| {
            let m = cases
                .iter()
                .filter(|c| c.objective == o)
                .map(|c| c.max_relative_error)
                .fold(0.0, f64::max);
            (o, m)
        })
        .collect();
    for (o, m) in &worst {
        let verdict = if *m < DEFAULT_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<10} max relative error {m:.3e} over {seeds} seeds  {verdict}", o.name());
    }
    if let Some(run) = run {
        let path = run.path(GRADCHECK);
        let report = GradcheckReport {
            step,
            tolerance: DEFAULT_TOLERANCE,
            seeds,
            max_relative_error: worst.clone(),
            cases,
        };
        fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n").map_err(
            |source| CliError::Io {
                path: path.clone(),
                source,
            },
        )?;
        run.finish(None, None, &[path])?;
    }
    let failed: Vec<&str> = worst.iter().filter(|(_, m)| !(*m < DEFAULT_TOLERANCE)).map(|(o, _)| o.name()).collect();
    if !failed.is_empty() {
        return Err(CliError::GradCheckFailed(failed.join(", ")));
    }
    Ok(())
}

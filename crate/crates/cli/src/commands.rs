use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reentry_core::corpus::{
    build_instances, ingest_jsonl, read_instance_records, split as split_corpus, write_jsonl,
    write_records, Conversation, CorpusSummary, IngestOptions, InstanceRecord, Vocabulary,
};
use reentry_core::eval::{classify_metrics, pattern_breakdown, MetricReport};
use reentry_core::labeling::{invert_in_place, pattern_stats, TaskSet};
use reentry_core::model::{
    encode_instances, load_checkpoint, save_checkpoint, EncodedInstance, Model, ModelConfig,
};
use reentry_core::numerics::GradCheckConfig;
use reentry_core::synth::{generate_corpus, SynthConfig};
use reentry_core::training::{
    check_model_gradients, train as train_model, LossWeights, TrainConfig,
};
use serde::Serialize;

use crate::args::{
    EvalArgs, GradcheckArgs, IngestArgs, LabelsArgs, Preset, SplitArgs, StatsArgs, SynthArgs,
    TrainArgs,
};
use crate::manifest::{beside, RunManifest};

pub const VOCAB_FILE: &str = "vocab.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const EPOCH_LOG_FILE: &str = "epochs.jsonl";
pub const OUTCOME_FILE: &str = "outcome.json";
pub const MANIFEST_FILE: &str = "manifest.json";

fn read_corpus(path: &Path) -> Result<Vec<Conversation>> {
    let ingested = ingest_jsonl(path, IngestOptions::default())
        .with_context(|| format!("reading corpus {}", path.display()))?;
    Ok(ingested.conversations)
}

fn write_corpus(path: &Path, convs: &[Conversation]) -> Result<()> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_jsonl(file, convs)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating directory {}", dir.display()))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => match a.preset {
            Preset::Default => SynthConfig::default(),
            Preset::Benchmark => SynthConfig::benchmark(SynthConfig::default().n_conversations, 0),
        },
    };
    if let Some(n) = a.n {
        cfg.n_conversations = n;
    }
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    if let Some(w) = &a.weights {
        cfg.pattern_weights = w.clone();
        if a.rates.is_none() {
            cfg.reentry_rates.retain(|p, _| w.contains_key(p));
        }
    }
    if let Some(r) = &a.rates {
        cfg.reentry_rates = r.clone();
    }
    if let Some(v) = a.vocab_size {
        cfg.vocab_size = v;
    }
    if let Some(range) = a.turn_len {
        cfg.turn_len_range = range;
    }
    if let Some(u) = a.users {
        cfg.n_users = u;
    }
    if a.no_salt {
        cfg.salt = false;
    }

    let convs = generate_corpus(&cfg)?;
    write_corpus(&a.out, &convs)?;
    let config_out = a.config_out.clone().unwrap_or_else(|| {
        let mut s = a.out.as_os_str().to_owned();
        s.push(".config.json");
        PathBuf::from(s)
    });
    fs::write(&config_out, serde_json::to_string_pretty(&cfg)? + "\n")
        .with_context(|| format!("writing {}", config_out.display()))?;

    let mut m = RunManifest::new("synth", &cfg, Some(cfg.seed))?;
    if let Some(path) = &a.config {
        m.input(path)?;
    }
    m.output(&a.out);
    m.output(&config_out);
    m.write(&a.manifest.clone().unwrap_or_else(|| beside(&a.out)))?;
    println!("wrote {} conversations to {}", convs.len(), a.out.display());
    Ok(())
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let opts = IngestOptions {
        reddit_clean: a.reddit_clean,
    };
    let ingested =
        ingest_jsonl(&a.input, opts).with_context(|| format!("reading {}", a.input.display()))?;
    write_corpus(&a.out, &ingested.conversations)?;
    let instances = build_instances(&ingested.conversations, &[], 2, 0)?;
    let summary = CorpusSummary::compute(&ingested.conversations, &instances);

    let mut m = RunManifest::new("ingest", &a, None)?;
    m.input(&a.input)?;
    m.output(&a.out);
    m.write(&a.manifest.clone().unwrap_or_else(|| beside(&a.out)))?;
    if !ingested.warnings.is_empty() {
        warn!("{} conversation(s) skipped", ingested.warnings.len());
    }
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn open_output(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(io::stdout().lock()),
    })
}

pub fn labels(a: LabelsArgs) -> Result<()> {
    let mut m = RunManifest::new("labels", &a, None)?;
    let records: Vec<InstanceRecord> = if let Some(path) = &a.records {
        m.input(path)?;
        let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
        let mut recs = read_instance_records(BufReader::new(file))
            .with_context(|| format!("reading {}", path.display()))?;
        recs.iter_mut().for_each(|r| r.invert(a.invert));
        recs
    } else {
        let corpus = a
            .corpus
            .as_ref()
            .expect("clap requires --corpus or --records");
        m.input(corpus)?;
        let convs = read_corpus(corpus)?;
        let history = match &a.history_from {
            Some(p) => {
                m.input(p)?;
                read_corpus(p)?
            }
            None => Vec::new(),
        };
        let mut instances = build_instances(&convs, &history, a.min_prefix, a.history_cap)?;
        instances
            .iter_mut()
            .for_each(|i| invert_in_place(i, a.invert));
        instances.iter().map(InstanceRecord::from).collect()
    };
    write_records(open_output(a.out.as_deref())?, &records)?;

    let manifest_path = a.manifest.clone().or_else(|| a.out.as_deref().map(beside));
    if let Some(path) = manifest_path {
        if let Some(out) = &a.out {
            m.output(out);
        }
        m.write(&path)?;
    }
    Ok(())
}

pub fn stats(a: StatsArgs) -> Result<()> {
    let convs = read_corpus(&a.corpus)?;
    let instances = build_instances(&convs, &[], a.min_prefix, 0)?;
    let mut out = io::stdout().lock();
    write!(out, "{}", pattern_stats(&instances).to_tsv())?;
    if a.summary {
        let summary = CorpusSummary::compute(&convs, &instances);
        writeln!(out, "{}", serde_json::to_string_pretty(&summary)?)?;
    }
    if let Some(path) = &a.manifest {
        let mut m = RunManifest::new("stats", &a, None)?;
        m.input(&a.corpus)?;
        m.write(path)?;
    }
    Ok(())
}

pub fn split(a: SplitArgs) -> Result<()> {
    let convs = read_corpus(&a.corpus)?;
    let parts = split_corpus(&convs, a.ratios, a.seed)?;
    create_dir(&a.out_dir)?;
    let mut m = RunManifest::new("split", &a, Some(a.seed))?;
    m.input(&a.corpus)?;
    for (name, part) in [
        ("train", &parts.train),
        ("valid", &parts.valid),
        ("test", &parts.test),
    ] {
        let path = a.out_dir.join(format!("{name}.jsonl"));
        write_corpus(&path, part)?;
        m.output(&path);
        println!("{name}\t{}", part.len());
    }
    m.write(
        &a.manifest
            .clone()
            .unwrap_or_else(|| a.out_dir.join(MANIFEST_FILE)),
    )?;
    Ok(())
}

impl TrainArgs {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            dropout: self.dropout,
            history_cap: self.history_cap,
            use_history: !self.no_history,
            use_attention: !self.no_attention,
            attention_over: self.attention_over,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            patience: self.patience,
            l2: self.l2,
            seed: self.seed,
            tasks: self.tasks,
            invert: self.invert,
            alpha_sp: self.alpha_sp,
            alpha_rt: self.alpha_rt,
            alpha_ta: self.alpha_ta,
            aux_weight_mode: self.aux_weight_mode,
            weight_cap: self.weight_cap,
            lambda_main: self.lambda_main,
            mu_main: self.mu_main,
            threshold: self.threshold,
            eval_train: self.eval_train,
            target_f1: self.target_f1,
        }
    }

    fn history_path(&self) -> &Path {
        self.history_from.as_deref().unwrap_or(&self.train)
    }
}

/// Instances of `convs` with histories from `history`, encoded with `vocab`.
fn encode_corpus(
    convs: &[Conversation],
    history: &[Conversation],
    min_prefix: usize,
    cap: usize,
    vocab: &Vocabulary,
) -> Result<(Vec<reentry_core::corpus::Instance>, Vec<EncodedInstance>)> {
    let instances = build_instances(convs, history, min_prefix, cap)?;
    let encoded = encode_instances(&instances, vocab);
    Ok((instances, encoded))
}

#[derive(Serialize)]
struct OutcomeSummary {
    best_epoch: usize,
    best_valid_f1: f64,
    best_step: u64,
    total_steps: u64,
    epochs_run: usize,
    stopped_early: bool,
    weights: LossWeights,
    parameters: usize,
    train_instances: usize,
    valid_instances: usize,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut m = RunManifest::new("train", &a, Some(a.seed))?;
    let train_convs = read_corpus(&a.train)?;
    let valid_convs = read_corpus(&a.valid)?;
    m.input(&a.train)?;
    m.input(&a.valid)?;
    let history = if a.history_from.is_some() {
        m.input(a.history_path())?;
        read_corpus(a.history_path())?
    } else {
        train_convs.clone()
    };

    let vocab = Vocabulary::build(&train_convs, a.min_count)?;
    let cfg = a.model_config(vocab.len());
    let (_, train_data) = encode_corpus(
        &train_convs,
        &history,
        a.min_prefix,
        cfg.history_cap,
        &vocab,
    )?;
    let (_, valid_data) = encode_corpus(
        &valid_convs,
        &history,
        a.min_prefix,
        cfg.history_cap,
        &vocab,
    )?;
    info!(
        "vocabulary {}, {} training and {} validation instances",
        vocab.len(),
        train_data.len(),
        valid_data.len()
    );

    let mut model = Model::new(cfg, a.seed)?;
    if let Some(path) = &a.embeddings {
        m.input(path)?;
        let id = model.params.embedding;
        let table = &mut model.store.get_mut(id).value;
        let found = vocab.align_embeddings(path, table)?;
        info!(
            "{found} of {} tokens found in {}",
            vocab.len(),
            path.display()
        );
    }

    create_dir(&a.out_dir)?;
    let vocab_path = a.out_dir.join(VOCAB_FILE);
    vocab.save(&vocab_path)?;
    let log_path = a.out_dir.join(EPOCH_LOG_FILE);
    let mut log = BufWriter::new(
        File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );

    let tc = a.train_config();
    let outcome = train_model(&mut model, &train_data, &valid_data, &tc, |entry| {
        let line = serde_json::to_string(entry)?;
        writeln!(log, "{line}")
            .and_then(|_| log.flush())
            .map_err(|e| reentry_core::Error::InvalidInput(format!("writing epoch log: {e}")))
    })?;
    drop(log);

    let ckpt_path = a.out_dir.join(CHECKPOINT_FILE);
    save_checkpoint(&ckpt_path, &model, &vocab.hash(), outcome.best_step)?;
    let outcome_path = a.out_dir.join(OUTCOME_FILE);
    let summary = OutcomeSummary {
        best_epoch: outcome.best_epoch,
        best_valid_f1: outcome.best_valid_f1,
        best_step: outcome.best_step,
        total_steps: outcome.total_steps,
        epochs_run: outcome.logs.len(),
        stopped_early: outcome.stopped_early,
        weights: outcome.weights,
        parameters: model.store.num_values(),
        train_instances: train_data.len(),
        valid_instances: valid_data.len(),
    };
    fs::write(
        &outcome_path,
        serde_json::to_string_pretty(&summary)? + "\n",
    )
    .with_context(|| format!("writing {}", outcome_path.display()))?;

    for p in [&vocab_path, &ckpt_path, &log_path, &outcome_path] {
        m.output(p);
    }
    m.write(
        &a.manifest
            .clone()
            .unwrap_or_else(|| a.out_dir.join(MANIFEST_FILE)),
    )?;
    println!(
        "best epoch {} of {}: valid f1 {:.4}",
        outcome.best_epoch,
        outcome.logs.len(),
        outcome.best_valid_f1
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalOutput {
    metrics: MetricReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    by_pattern: Option<std::collections::BTreeMap<String, MetricReport>>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let train_manifest = RunManifest::read(&a.model.join(MANIFEST_FILE))?;
    ensure!(
        train_manifest.subcommand == "train",
        "{} was not written by `train`",
        a.model.display()
    );
    let ta: TrainArgs = serde_json::from_value(train_manifest.config.clone())
        .context("training config in manifest")?;
    let vocab = Vocabulary::load(a.model.join(VOCAB_FILE))?;
    let (model, header) = load_checkpoint(a.model.join(CHECKPOINT_FILE))?;
    if header.vocab_hash != vocab.hash() {
        bail!(
            "checkpoint was trained with a different vocabulary than {}",
            VOCAB_FILE
        );
    }

    let history_path = a
        .history_from
        .clone()
        .unwrap_or_else(|| ta.history_path().to_path_buf());
    let mut m = RunManifest::new("eval", &a, None)?;
    m.input(&a.data)?;
    m.input(&history_path)?;
    let convs = read_corpus(&a.data)?;
    let history = read_corpus(&history_path)?;
    let (instances, encoded) = encode_corpus(
        &convs,
        &history,
        ta.min_prefix,
        model.config.history_cap,
        &vocab,
    )?;
    ensure!(
        !encoded.is_empty(),
        "{} yields no instances",
        a.data.display()
    );

    let threshold = a.threshold.unwrap_or(ta.threshold);
    let scores = model.predict_main(&encoded)?;
    let labels: Vec<bool> = encoded.iter().map(|i| i.y_main).collect();
    let metrics = classify_metrics(&scores, &labels, threshold)?;
    let breakdown = if a.by_pattern {
        Some(pattern_breakdown(
            &instances,
            &scores,
            a.pattern_min_count,
            threshold,
        )?)
    } else {
        None
    };

    let mut out = io::stdout().lock();
    if a.json {
        let o = EvalOutput {
            metrics,
            by_pattern: breakdown.map(|b| b.groups),
        };
        writeln!(out, "{}", serde_json::to_string_pretty(&o)?)?;
    } else {
        writeln!(out, "{}", MetricReport::TSV_HEADER)?;
        writeln!(out, "{}", metrics.tsv_row())?;
        if let Some(b) = breakdown {
            writeln!(out)?;
            write!(out, "{}", b.to_tsv())?;
        }
    }
    if let Some(path) = &a.manifest {
        m.write(path)?;
    }
    Ok(())
}

fn random_instance(rng: &mut ChaCha8Rng, vocab: usize) -> EncodedInstance {
    let m = rng.gen_range(2..=4);
    let turn = |rng: &mut ChaCha8Rng| -> Vec<usize> {
        (0..rng.gen_range(1..=3))
            .map(|_| rng.gen_range(1..vocab))
            .collect()
    };
    let context: Vec<Vec<usize>> = (0..m).map(|_| turn(rng)).collect();
    let history: Vec<Vec<usize>> = (0..rng.gen_range(1..=2)).map(|_| turn(rng)).collect();
    EncodedInstance {
        conv_id: "gradcheck".into(),
        position: m,
        pattern: String::new(),
        context,
        history,
        y_main: rng.gen_bool(0.5),
        y_sp: rng.gen_bool(0.5),
        y_rt: rng.gen_bool(0.5),
        y_ta: (0..m - 1).map(|_| rng.gen_bool(0.5)).collect(),
    }
}

#[derive(Serialize)]
struct GradcheckRow {
    instance: usize,
    checked: usize,
    max_rel_error: f64,
    violators: usize,
    passed: bool,
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    ensure!(a.instances > 0, "--instances must be positive");
    ensure!(a.vocab >= 2, "--vocab must be at least 2");
    let check = GradCheckConfig {
        eps: a.eps,
        tol: a.tol,
        max_entries: a.max_entries,
        seed: a.seed,
        ..GradCheckConfig::default()
    };
    let weights = LossWeights {
        lambda_main: 2.0,
        lambda_sp: 0.5,
        lambda_rt: 1.5,
        ..LossWeights::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut rows = Vec::with_capacity(a.instances);
    for k in 0..a.instances {
        let cfg = ModelConfig {
            embed_dim: a.embed_dim,
            hidden_dim: a.hidden_dim,
            ..ModelConfig::new(a.vocab)
        };
        let model = Model::new(cfg, a.seed.wrapping_add(k as u64))?;
        let inst = random_instance(&mut rng, a.vocab);
        let r = check_model_gradients(&model, &inst, &weights, TaskSet::ALL, &check)?;
        rows.push(GradcheckRow {
            instance: k,
            checked: r.checked,
            max_rel_error: r.max_rel_error,
            violators: r.violators.len(),
            passed: r.passed(),
        });
    }

    let mut out = io::stdout().lock();
    if a.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&rows)?)?;
    } else {
        writeln!(out, "instance\tchecked\tmax_rel_error\tviolators\tresult")?;
        for r in &rows {
            let verdict = if r.passed { "pass" } else { "FAIL" };
            writeln!(
                out,
                "{}\t{}\t{:.3e}\t{}\t{verdict}",
                r.instance, r.checked, r.max_rel_error, r.violators
            )?;
        }
    }
    if let Some(path) = &a.manifest {
        RunManifest::new("gradcheck", &a, Some(a.seed))?.write(path)?;
    }
    let failed = rows.iter().filter(|r| !r.passed).count();
    ensure!(
        failed == 0,
        "gradient check failed on {failed} of {} instance(s)",
        rows.len()
    );
    Ok(())
}

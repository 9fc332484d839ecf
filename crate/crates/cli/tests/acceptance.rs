//! End-to-end acceptance suite. Every criterion prints one `PASS`/`FAIL`
//! line; the test fails if any criterion does.
//!
//! Run with `cargo test -p reentry-cli --test acceptance -- --nocapture`.
//! `ACCEPTANCE_ONLY=4,7` restricts the run to the listed criteria.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reentry_core::corpus::{
    build_instances, extract_instances, split, write_jsonl, Conversation, InstanceRecord, Turn,
    UserId, Vocabulary,
};
use reentry_core::eval::{auc, classify_metrics, epochs_to_reach};
use reentry_core::labeling::{pattern_stats, Task, TaskSet};
use reentry_core::model::{encode_instances, EncodedInstance, Model, ModelConfig};
use reentry_core::numerics::{GradCheckConfig, Gradients, ParamId, Tape};
use reentry_core::synth::{generate_corpus, SynthConfig};
use reentry_core::training::{
    check_model_gradients, record_losses, train, LossVars, LossWeights, TrainConfig,
};

type Verdict = Result<String, String>;

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_reentry"))
}

fn run_in(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = bin()
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| format!("spawning reentry: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "reentry {} exited with {}: {}",
            args.join(" "),
            out.status,
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

// 1. Gradient fidelity.

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
        conv_id: "tiny".into(),
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

fn gradient_fidelity() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let weights = LossWeights {
        lambda_main: 2.0,
        lambda_sp: 0.5,
        lambda_rt: 1.5,
        ..LossWeights::default()
    };
    let cfg = GradCheckConfig::default();
    let (mut checked, mut worst) = (0, 0.0f64);
    for k in 0..3 {
        let model = Model::new(
            ModelConfig {
                embed_dim: 4,
                hidden_dim: 3,
                ..ModelConfig::new(10)
            },
            k,
        )
        .map_err(|e| e.to_string())?;
        let inst = random_instance(&mut rng, 10);
        let r = check_model_gradients(&model, &inst, &weights, TaskSet::ALL, &cfg)
            .map_err(|e| e.to_string())?;
        if r.checked < 200 {
            return Err(format!("instance {k}: only {} entries checked", r.checked));
        }
        checked += r.checked;
        worst = worst.max(r.max_rel_error);
    }
    let elapsed = started.elapsed();
    check(
        worst < 1e-4 && elapsed < Duration::from_secs(60),
        format!(
            "{checked} entries over 3 instances, max rel error {worst:.2e}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// 2. Label oracles.

fn label_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let (mut instances, mut mismatches) = (0usize, 0usize);
    for k in 0..10_000 {
        let len = rng.gen_range(2..=12);
        let pool = rng.gen_range(1..=6);
        let authors: Vec<u8> = (0..len).map(|_| rng.gen_range(0..pool)).collect();
        let turns = authors
            .iter()
            .map(|a| Turn::new(UserId::new(format!("u{a}")).unwrap(), vec!["x".into()]).unwrap())
            .collect();
        let conv = Conversation::new(format!("c{k}"), turns).unwrap();
        let insts = extract_instances(&[conv], 2).map_err(|e| e.to_string())?;
        if insts.len() != len - 1 {
            mismatches += 1;
        }
        for inst in insts {
            let m = inst.position;
            let target = authors[m - 1];
            let mut seen = [false; 256];
            let distinct = authors[..m]
                .iter()
                .filter(|a| !std::mem::replace(&mut seen[**a as usize], true))
                .count();
            let count = authors[..m].iter().filter(|a| **a == target).count();
            let ta: Vec<bool> = authors[..m - 1].iter().map(|a| *a == target).collect();
            let main = authors[m..].contains(&target);
            let ok = inst.y_sp == (distinct <= 2)
                && inst.y_rt == (count >= 2)
                && inst.y_ta == ta
                && inst.y_main == main;
            mismatches += usize::from(!ok);
            instances += 1;
        }
    }
    check(
        mismatches == 0,
        format!("{instances} instances from 10000 sequences, {mismatches} mismatches"),
    )
}

// 3. Pattern statistics.

fn pattern_statistics() -> Verdict {
    let started = Instant::now();
    let convs = generate_corpus(&SynthConfig::single("AB", 0.27, 10_000, 303))
        .map_err(|e| e.to_string())?;
    let insts = extract_instances(&convs, 2).map_err(|e| e.to_string())?;
    let rate = pattern_stats(&insts).rate("AB").ok_or("no AB instances")?;
    let elapsed = started.elapsed();
    check(
        (rate - 0.27).abs() <= 0.02 && elapsed < Duration::from_secs(30),
        format!(
            "measured AB rate {rate:.4} (target 0.27 +/- 0.02), {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

// 4. Learnability and convergence.

fn small_model(vocab: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        embed_dim: 16,
        hidden_dim: 16,
        dropout: 0.1,
        ..ModelConfig::new(vocab)
    };
    Model::new(cfg, seed).expect("valid model config")
}

fn fit(
    vocab: usize,
    train_data: &[EncodedInstance],
    valid_data: &[EncodedInstance],
    tasks: TaskSet,
    max_epochs: usize,
    target: f64,
) -> Result<Vec<f64>, String> {
    let mut model = small_model(vocab, 1);
    let cfg = TrainConfig {
        lr: 1e-2,
        batch_size: 32,
        max_epochs,
        patience: max_epochs,
        seed: 1,
        tasks,
        target_f1: Some(target),
        ..TrainConfig::default()
    };
    let out =
        train(&mut model, train_data, valid_data, &cfg, |_| Ok(())).map_err(|e| e.to_string())?;
    Ok(out.logs.iter().map(|l| l.valid.f1).collect())
}

fn encoded_corpus(
    convs: &[Conversation],
    history: &[Conversation],
    vocab: &Vocabulary,
) -> Vec<EncodedInstance> {
    let insts = build_instances(convs, history, 2, 10).expect("instances");
    encode_instances(&insts, vocab)
}

fn learnability() -> Verdict {
    // Overfit 200 instances; the training set doubles as the scored set.
    let convs = generate_corpus(&SynthConfig {
        n_conversations: 80,
        seed: 404,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(&convs, 1).map_err(|e| e.to_string())?;
    let mut small = encoded_corpus(&convs, &convs, &vocab);
    if small.len() < 200 {
        return Err(format!("overfit corpus has only {} instances", small.len()));
    }
    small.truncate(200);
    let ta_curve = fit(
        vocab.len(),
        &small,
        &small,
        TaskSet::only(Task::Ta),
        50,
        0.95,
    )?;
    let main_curve = fit(vocab.len(), &small, &small, TaskSet::NONE, 50, 0.95)?;
    let ta_fit = epochs_to_reach(&ta_curve, 0.95);
    let main_fit = epochs_to_reach(&main_curve, 0.95);

    // Epochs to 0.9 validation F1 on the benchmark; not reaching it counts
    // as one epoch past the budget.
    let budget = 30;
    let convs = generate_corpus(&SynthConfig::benchmark(500, 405)).map_err(|e| e.to_string())?;
    let parts = split(&convs, [0.8, 0.1, 0.1], 1).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(&parts.train, 1).map_err(|e| e.to_string())?;
    let train_data = encoded_corpus(&parts.train, &parts.train, &vocab);
    let valid_data = encoded_corpus(&parts.valid, &parts.train, &vocab);
    let ta_bench = fit(
        vocab.len(),
        &train_data,
        &valid_data,
        TaskSet::only(Task::Ta),
        budget,
        0.9,
    )?;
    let main_bench = fit(
        vocab.len(),
        &train_data,
        &valid_data,
        TaskSet::NONE,
        budget,
        0.9,
    )?;
    let reach = |c: &[f64]| epochs_to_reach(c, 0.9);
    let censored = |c: &[f64]| reach(c).unwrap_or(budget + 1);
    let ratio = censored(&ta_bench) as f64 / censored(&main_bench) as f64;
    let best = |c: &[f64]| c.iter().copied().fold(0.0, f64::max);

    let fmt = |e: Option<usize>| e.map_or("not reached".to_string(), |e| format!("epoch {e}"));
    let detail = format!(
        "overfit 200: ta {} / main-only {} (F1>=0.95); benchmark {} train inst: ta {} (best {:.3}), main-only {} (best {:.3}), ratio {ratio:.2} (<= 1.5)",
        fmt(ta_fit),
        fmt(main_fit),
        train_data.len(),
        fmt(reach(&ta_bench)),
        best(&ta_bench),
        fmt(reach(&main_bench)),
        best(&main_bench),
    );
    check(
        ta_fit.is_some() && main_fit.is_some() && ratio <= 1.5,
        detail,
    )
}

// 5. Multi-task wiring.

fn task_gradient(
    model: &Model,
    inst: &EncodedInstance,
    pick: fn(&LossVars) -> reentry_core::numerics::Var,
) -> Result<Gradients, String> {
    let w = LossWeights::default();
    let mut tape = Tape::new(&model.store);
    let vars = model
        .forward(&mut tape, inst, None)
        .map_err(|e| e.to_string())?;
    let l = record_losses(&mut tape, &vars, inst, &w).map_err(|e| e.to_string())?;
    let mut g = Gradients::for_store(&model.store);
    tape.backward(pick(&l), &mut g).map_err(|e| e.to_string())?;
    Ok(g)
}

fn multitask_wiring() -> Verdict {
    let convs = generate_corpus(&SynthConfig::benchmark(30, 505)).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::build(&convs, 1).map_err(|e| e.to_string())?;
    let data = encoded_corpus(&convs, &convs, &vocab);
    let model = Model::new(
        ModelConfig {
            embed_dim: 6,
            hidden_dim: 5,
            ..ModelConfig::new(vocab.len())
        },
        5,
    )
    .map_err(|e| e.to_string())?;
    let p = &model.params;
    let zero = |g: &Gradients, ids: &[ParamId]| ids.iter().all(|id| g.is_zero(*id));
    let aux_heads: Vec<ParamId> = p.sp_head().into_iter().chain(p.rt_head()).collect();
    let mut leaks = 0;
    for inst in data.iter().take(20) {
        let main = task_gradient(&model, inst, |l| l.main)?;
        leaks += usize::from(!zero(&main, &aux_heads));
        for pick in [
            |l: &LossVars| l.sp,
            |l: &LossVars| l.rt,
            |l: &LossVars| l.ta,
        ] {
            let g = task_gradient(&model, inst, pick)?;
            leaks += usize::from(!zero(&g, &p.main_head()));
        }
    }

    let base = TrainConfig {
        lr: 5e-3,
        batch_size: 8,
        max_epochs: 3,
        seed: 9,
        ..TrainConfig::default()
    };
    let zero_alpha = TrainConfig {
        tasks: TaskSet::ALL,
        alpha_sp: 0.0,
        alpha_rt: 0.0,
        alpha_ta: 0.0,
        ..base.clone()
    };
    let main_only = TrainConfig {
        tasks: TaskSet::NONE,
        ..base
    };
    let (mut a, mut b) = (model.clone(), model.clone());
    let la = train(&mut a, &data, &data, &zero_alpha, |_| Ok(())).map_err(|e| e.to_string())?;
    let lb = train(&mut b, &data, &data, &main_only, |_| Ok(())).map_err(|e| e.to_string())?;
    let bitwise = a.store == b.store
        && la
            .logs
            .iter()
            .map(|l| l.train_loss.main.to_bits())
            .eq(lb.logs.iter().map(|l| l.train_loss.main.to_bits()));
    check(
        leaks == 0 && bitwise && a.store != model.store,
        format!("{leaks} head leaks over 20 instances; zero-alpha vs main-only parameters bitwise equal: {bitwise}"),
    )
}

// 6. Metric oracles.

fn pairwise_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, si) in scores.iter().enumerate() {
        for (j, sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1.0;
                num += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut worst = 0.0f64;
    let mut sets = 0;
    while sets < 100 {
        let n = rng.gen_range(2..=200);
        let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        if labels.iter().all(|y| *y) || labels.iter().all(|y| !*y) {
            continue;
        }
        // Coarse scores so ties are common.
        let scores: Vec<f64> = (0..n)
            .map(|_| (rng.gen_range(0..20) as f64) / 20.0)
            .collect();
        let a = auc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((a - pairwise_auc(&scores, &labels)).abs());
        sets += 1;
    }

    // (scores, labels, acc, pre, rec, f1) at threshold 0.5.
    let fixtures: [(&[f64], &[bool], f64, f64, f64, f64); 3] = [
        (
            &[0.9, 0.8, 0.3, 0.6, 0.2],
            &[true, true, true, false, false],
            0.6,
            2.0 / 3.0,
            2.0 / 3.0,
            2.0 / 3.0,
        ),
        (
            &[0.1, 0.2, 0.4],
            &[true, false, false],
            2.0 / 3.0,
            0.0,
            0.0,
            0.0,
        ),
        (
            &[0.5, 0.7, 0.49, 0.51],
            &[true, false, false, true],
            0.75,
            2.0 / 3.0,
            1.0,
            0.8,
        ),
    ];
    let mut fixture_errors = 0;
    for (scores, labels, acc, pre, rec, f1) in fixtures {
        let r = classify_metrics(scores, labels, 0.5).map_err(|e| e.to_string())?;
        let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
        fixture_errors += usize::from(
            !(close(r.acc, acc) && close(r.pre, pre) && close(r.rec, rec) && close(r.f1, f1)),
        );
    }
    check(
        worst <= 1e-12 && fixture_errors == 0,
        format!(
            "max |auc - pairwise| {worst:.1e} over 100 sets; {fixture_errors} of 3 fixtures wrong"
        ),
    )
}

// 7. Inversion semantics.

fn records(text: &str) -> Vec<InstanceRecord> {
    text.lines()
        .map(|l| serde_json::from_str(l).expect("record line"))
        .collect()
}

fn inversion_semantics() -> Verdict {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let convs = generate_corpus(&SynthConfig {
        n_conversations: 300,
        seed: 707,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    write_jsonl(
        fs::File::create(dir.path().join("c.jsonl")).map_err(|e| e.to_string())?,
        &convs,
    )
    .map_err(|e| e.to_string())?;
    let d = dir.path();
    run_in(
        d,
        &["labels", "--corpus", "c.jsonl", "--out", "plain.jsonl"],
    )?;
    run_in(
        d,
        &[
            "labels", "--corpus", "c.jsonl", "--invert", "sp", "--out", "sp.jsonl",
        ],
    )?;
    run_in(
        d,
        &[
            "labels",
            "--records",
            "sp.jsonl",
            "--invert",
            "sp",
            "--out",
            "back.jsonl",
        ],
    )?;
    let read = |name: &str| fs::read_to_string(d.join(name)).map_err(|e| e.to_string());
    let (plain, flipped, back) = (read("plain.jsonl")?, read("sp.jsonl")?, read("back.jsonl")?);

    let (a, b) = (records(&plain), records(&flipped));
    let mut wrong = usize::from(a.len() != b.len());
    for (x, y) in a.iter().zip(&b) {
        let expected = InstanceRecord {
            y_sp: 1 - x.y_sp,
            ..x.clone()
        };
        wrong += usize::from(*y != expected);
    }
    let identical = plain.as_bytes() == back.as_bytes();
    check(
        wrong == 0 && identical && !a.is_empty(),
        format!("{} records, {wrong} differ from an SP-only flip; double inversion byte-identical: {identical}", a.len()),
    )
}

// 8. Determinism.

fn determinism() -> Verdict {
    let convs = generate_corpus(&SynthConfig::benchmark(60, 808)).map_err(|e| e.to_string())?;
    let parts = split(&convs, [0.8, 0.2, 0.0], 3).map_err(|e| e.to_string())?;
    let args = [
        "train",
        "--train",
        "train.jsonl",
        "--valid",
        "valid.jsonl",
        "--out-dir",
        "run",
        "--embed-dim",
        "8",
        "--hidden-dim",
        "8",
        "--lr",
        "0.01",
        "--epochs",
        "3",
        "--seed",
        "4",
    ];
    let mut runs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        for (name, part) in [("train.jsonl", &parts.train), ("valid.jsonl", &parts.valid)] {
            let f = fs::File::create(dir.path().join(name)).map_err(|e| e.to_string())?;
            write_jsonl(f, part).map_err(|e| e.to_string())?;
        }
        run_in(dir.path(), &args)?;
        runs.push(dir);
    }
    let read = |i: usize, name: &str| {
        fs::read(runs[i].path().join("run").join(name)).map_err(|e| e.to_string())
    };
    let logs = |i: usize| -> Result<Vec<serde_json::Value>, String> {
        let text = String::from_utf8(read(i, "epochs.jsonl")?).map_err(|e| e.to_string())?;
        Ok(text
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).expect("log line");
                v.as_object_mut()
                    .expect("log object")
                    .remove("wall_seconds");
                v
            })
            .collect())
    };
    let same_manifest = read(0, "manifest.json")? == read(1, "manifest.json")?;
    let same_logs = logs(0)? == logs(1)?;
    let same_ckpt = read(0, "model.ckpt")? == read(1, "model.ckpt")?;
    check(
        same_manifest && same_logs && same_ckpt,
        format!("manifests equal {same_manifest}; epoch logs equal {same_logs}; checkpoints byte-identical {same_ckpt}"),
    )
}

#[test]
fn acceptance_suite() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|p| p.trim().parse().ok()).collect());
    let criteria: [(&str, fn() -> Verdict); 8] = [
        ("gradient fidelity", gradient_fidelity),
        ("label oracles", label_oracles),
        ("pattern statistics", pattern_statistics),
        ("learnability and convergence", learnability),
        ("multi-task wiring", multitask_wiring),
        ("metric oracles", metric_oracles),
        ("inversion semantics", inversion_semantics),
        ("determinism", determinism),
    ];
    let mut failed = Vec::new();
    println!();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let number = i + 1;
        if only.as_ref().is_some_and(|o| !o.contains(&number)) {
            continue;
        }
        let started = Instant::now();
        let verdict = run();
        let secs = started.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("[{number}] PASS {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                println!("[{number}] FAIL {name}: {detail} ({secs:.1}s)");
                failed.push(number);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use persona_lab::corpus::{generate_synthetic, shares_profile_keyword, Utterance, Vocab};
use persona_lab::generator::{
    fader_sweep, generate as sample, pearson, summarize_sweeps, summary_csv, sweep_csv, DecodeConfig,
};
use persona_lab::network::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use persona_lab::pipeline::{evaluate, Prepared, Split};
use persona_lab::trainer::{probe_compare, train as train_model, TrainError};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::failure::Failure;
use crate::{data, rundir};
use crate::{CheckpointFlags, EvalArgs, GenerateArgs, ProbeArgs, RunFlags, SweepArgs, SynthArgs, TrainArgs, ChatArgs};

fn base_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

pub fn synth(a: SynthArgs) -> Result<(), Failure> {
    let mut config = base_config(a.config.as_deref())?;
    let s = &mut config.synth;
    if let Some(v) = a.seed {
        s.seed = v;
    }
    if let Some(v) = a.sparse_ratio {
        s.sparse_ratio = v;
    }
    if let Some(v) = a.categories {
        s.categories = v;
    }
    if let Some(v) = a.descriptions {
        s.descriptions = v;
    }
    if let Some(v) = a.train_size {
        s.train = v;
    }
    if let Some(v) = a.dev_size {
        s.dev = v;
    }
    if let Some(v) = a.test_size {
        s.test = v;
    }
    config.synth.validate().map_err(Failure::usage)?;
    let out = a.out.unwrap_or_else(|| rundir::run_root().join(format!("corpus-seed{}", config.synth.seed)));
    rundir::create(&out, a.force)?;
    let splits = generate_synthetic(&config.synth).map_err(Failure::usage)?;
    let vocab = Vocab::build(&splits.train).map_err(Failure::data)?;
    data::write_dir(&out, &splits, &vocab, config.synth.seed)?;
    config.data = Some(out.clone());
    rundir::write_manifest(&out, "synth", a.config.as_deref(), &config)?;
    let overlap = splits.train.iter().filter(|e| shares_profile_keyword(e)).count() as f64 / splits.train.len() as f64;
    println!(
        "wrote {} (train {}, dev {}, test {}, vocab {}, keyword overlap {:.3})",
        out.display(),
        splits.train.len(),
        splits.dev.len(),
        splits.test.len(),
        vocab.len(),
        overlap
    );
    Ok(())
}

fn apply_run_flags(config: &mut RunConfig, f: &RunFlags) {
    if let Some(d) = &f.data {
        config.data = Some(d.clone());
    }
    let t = &mut config.train;
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.lr {
        t.adam.lr = v;
    }
    if let Some(v) = f.seed {
        t.seed = v;
    }
    if let Some(v) = f.max_steps {
        t.max_steps = Some(v);
    }
    if let Some(v) = f.val_limit {
        t.val_limit = Some(v);
    }
    if let Some(v) = f.podi_lambda {
        t.schedule.podi.lambda = v;
    }
    if let Some(v) = f.train_limit {
        config.train_limit = Some(v);
    }
    if let Some(v) = f.eval_contexts {
        config.eval_contexts = v;
    }
}

fn sized_model(config: &ModelConfig, vocab: &Vocab) -> Result<Model, Failure> {
    let mut mc = config.clone();
    mc.vocab_size = vocab.len();
    mc.validate().map_err(Failure::usage)?;
    Ok(Model::new(mc)?)
}

/// Where a run continues from.
#[derive(Debug, Serialize, Deserialize)]
struct RunState {
    next_step: usize,
    best_epoch: Option<usize>,
    best_val_ppl: Option<f64>,
    wall_clock_secs: f64,
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let mut config = base_config(a.run.config.as_deref())?;
    apply_run_flags(&mut config, &a.run);
    if let Some(s) = a.strategy {
        config.train.schedule.strategy = s;
    }
    let resume = match &a.resume {
        Some(dir) => {
            let state: RunState = serde_json::from_str(&std::fs::read_to_string(dir.join("state.json"))?)
                .map_err(|e| Failure::data(format!("{}: {e}", dir.join("state.json").display())))?;
            config.train.start_step = state.next_step;
            Some(load_checkpoint(&dir.join("last.bin"))?)
        }
        None => None,
    };
    config.validate()?;
    let name = a.run.name.clone().unwrap_or_else(|| {
        format!("train-{}-seed{}", config.train.schedule.strategy, config.train.seed)
    });
    let dir = rundir::run_root().join(name);
    let data = data::prepare(&config, resume.as_ref().map(|c| c.vocab.clone()))?;
    rundir::create(&dir, a.run.force)?;
    rundir::write_manifest(&dir, "train", a.run.config.as_deref(), &config)?;

    let model = match resume {
        Some(ckpt) => {
            let mut expected = config.model.clone();
            expected.vocab_size = ckpt.vocab.len();
            ckpt.expect_config(&expected)?;
            ckpt.model
        }
        None => sized_model(&config.model, &data.vocab)?,
    };
    eprintln!(
        "training {} on {} examples, strategy {}, run dir {}",
        model.params.total_values(),
        data.train.len(),
        config.train.schedule.strategy,
        dir.display()
    );
    let outcome = train_model(model, &data.train, &data.dev, &config.train, &mut |s| {
        if s.step % 50 == 0 {
            eprintln!(
                "step {:>6}  recon {:.3}  kl {:.4}  podi {:.4}  beta {:.3}",
                s.step, s.loss.recon, s.loss.kl_zp, s.loss.podi, s.loss.beta
            );
        }
    });
    let outcome = match outcome {
        Ok(o) => o,
        Err(TrainError::Diverged { step, detail, last_good, record }) => {
            std::fs::write(dir.join("metrics.csv"), record.metrics_csv())?;
            save_checkpoint(&dir.join("last_good.bin"), &last_good, &data.vocab)?;
            return Err(Failure::Numeric(format!(
                "diverged at step {step}: {detail}; last good weights in {}",
                dir.join("last_good.bin").display()
            )));
        }
        Err(e) => return Err(e.into()),
    };
    let record = &outcome.record;
    std::fs::write(dir.join("metrics.csv"), record.metrics_csv())?;
    rundir::write_json(&dir.join("epochs.json"), &record.epochs)?;
    save_checkpoint(&dir.join("checkpoint.bin"), &outcome.best, &data.vocab)?;
    save_checkpoint(&dir.join("last.bin"), &outcome.model, &data.vocab)?;
    let next_step = record.steps.last().map_or(config.train.start_step, |s| s.step + 1);
    rundir::write_json(
        &dir.join("state.json"),
        &RunState {
            next_step,
            best_epoch: record.best_epoch,
            best_val_ppl: record.best_val_ppl(),
            wall_clock_secs: record.wall_clock_secs,
        },
    )?;
    let report = evaluate(&outcome.best, &data, Split::Test, config.eval_contexts, &config.decode)?;
    if !report.is_finite() {
        return Err(Failure::Numeric("evaluation produced non-finite metrics".into()));
    }
    rundir::write_json(&dir.join("report.json"), &report)?;
    print!("{}", report.table());
    println!("run directory: {}", dir.display());
    Ok(())
}

pub fn probe(a: ProbeArgs) -> Result<(), Failure> {
    let mut config = base_config(a.run.config.as_deref())?;
    apply_run_flags(&mut config, &a.run);
    if let Some(s) = &a.strategies {
        config.strategies = s.clone();
    }
    config.validate()?;
    let name = a.run.name.clone().unwrap_or_else(|| format!("probe-seed{}", config.train.seed));
    let dir = rundir::run_root().join(name);
    let data = data::prepare(&config, None)?;
    rundir::create(&dir, a.run.force)?;
    rundir::write_manifest(&dir, "probe", a.run.config.as_deref(), &config)?;
    let initial = sized_model(&config.model, &data.vocab)?;
    let outcome = probe_compare(&initial, &data.train, &data.dev, &config.train, &config.strategies, &mut |row| {
        eprintln!(
            "{:<12} ppl {:.3}  kl {:.4}  au {}  ({:.0} s)",
            row.strategy, row.ppl, row.kl_cost, row.active_units, row.seconds
        );
    })?;
    std::fs::write(dir.join("probe.csv"), outcome.csv())?;
    std::fs::write(dir.join("kl_curves.csv"), outcome.kl_curves_csv())?;
    std::fs::write(dir.join("table.txt"), outcome.table())?;
    for (row, model) in outcome.rows.iter().zip(&outcome.models) {
        save_checkpoint(&dir.join(format!("{}.bin", row.strategy)), model, &data.vocab)?;
    }
    print!("{}", outcome.table());
    println!("seed {}; run directory: {}", outcome.seed, dir.display());
    Ok(())
}

/// Model, corpus and decoding settings of a checkpoint command.
struct Loaded {
    model: Model,
    data: Prepared,
    config: RunConfig,
}

fn load(f: &CheckpointFlags) -> Result<Loaded, Failure> {
    let beside = f.checkpoint.parent().map(|p| p.join("config.json")).filter(|p| p.exists());
    let config_path: Option<PathBuf> = f.config.clone().or(beside);
    let mut config = base_config(config_path.as_deref())?;
    if let Some(d) = &f.data {
        config.data = Some(d.clone());
    }
    let d = &mut config.decode;
    if let Some(v) = f.seed {
        d.seed = v;
    }
    if let Some(v) = f.top_k {
        d.top_k = v;
    }
    if let Some(v) = f.top_p {
        d.top_p = v;
    }
    if let Some(v) = f.max_new_tokens {
        d.max_new_tokens = v;
    }
    if f.alpha.is_some() {
        d.alpha = f.alpha;
    }
    config.decode.validate().map_err(Failure::usage)?;
    let ckpt = load_checkpoint(&f.checkpoint)?;
    let data = data::prepare(&config, Some(ckpt.vocab))?;
    Ok(Loaded { model: ckpt.model, data, config })
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let l = load(&a.ckpt)?;
    let contexts = a.contexts.unwrap_or(l.config.eval_contexts);
    let report = evaluate(&l.model, &l.data, a.split, contexts, &l.config.decode)?;
    if !report.is_finite() {
        return Err(Failure::Numeric("evaluation produced non-finite metrics".into()));
    }
    let split = serde_json::to_value(a.split).expect("split serializes");
    let out = a.out.unwrap_or_else(|| {
        let dir = a.ckpt.checkpoint.parent().unwrap_or(Path::new("."));
        dir.join(format!("eval-{}.json", split.as_str().unwrap_or("split")))
    });
    rundir::write_json(&out, &report)?;
    print!("{}", report.table());
    println!("report: {}", out.display());
    Ok(())
}

/// Splits `a | b | c` into utterances whose speakers alternate and end with
/// the user.
fn parse_context(text: &str) -> Vec<Utterance> {
    let parts: Vec<&str> = text.split('|').map(str::trim).filter(|p| !p.is_empty()).collect();
    let n = parts.len();
    parts
        .into_iter()
        .enumerate()
        .map(|(i, p)| if (n - 1 - i) % 2 == 0 { Utterance::user(p) } else { Utterance::agent(p) })
        .collect()
}

fn example_at(data: &Prepared, split: Split, index: usize) -> Result<&persona_lab::corpus::DialogueExample, Failure> {
    let (raw, _) = data.split(split);
    raw.get(index)
        .ok_or_else(|| Failure::usage(format!("index {index} out of range; split has {} examples", raw.len())))
}

pub fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let l = load(&a.ckpt)?;
    let context = match (&a.context, a.index) {
        (Some(text), _) => parse_context(text),
        (None, Some(i)) => example_at(&l.data, a.split, i)?.context.clone(),
        (None, None) => return Err(Failure::usage("pass --context or --index")),
    };
    if context.is_empty() {
        return Err(Failure::usage("context is empty"));
    }
    let config = DecodeConfig { samples: a.n, ..l.config.decode.clone() };
    config.validate().map_err(Failure::usage)?;
    let samples = sample(&l.model, &l.data.vocab, &l.data.encoder, &context, &config)?;
    for (i, s) in samples.iter().enumerate() {
        eprintln!("[{}] alpha {:.3}  |z| {:.3}  {}", i + 1, s.alpha, s.z_norm, s.text);
    }
    println!("{}", serde_json::to_string_pretty(&samples).map_err(Failure::data)?);
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<(), Failure> {
    let l = load(&a.ckpt)?;
    let d = &l.data;
    let csv = match a.contexts {
        Some(n) => {
            let (raw, _) = d.split(a.split);
            if n == 0 || n > raw.len() {
                return Err(Failure::usage(format!("--contexts must be in 1..={}", raw.len())));
            }
            let sweeps = raw[..n]
                .iter()
                .map(|ex| fader_sweep(&l.model, &d.vocab, &d.encoder, ex, &d.extractor, &d.table, &l.config.decode))
                .collect::<Result<Vec<_>, _>>()?;
            let rows = summarize_sweeps(&sweeps)?;
            let alphas: Vec<f64> = rows.iter().map(|r| r.alpha).collect();
            let lengths: Vec<f64> = rows.iter().map(|r| r.mean_length_tokens).collect();
            let pds: Vec<f64> = rows.iter().map(|r| r.mean_p_distance).collect();
            let show = |r: Option<f64>| r.map_or("undefined".to_string(), |v| format!("{v:+.3}"));
            eprintln!(
                "correlation with alpha: length {}, P.Distance {}",
                show(pearson(&alphas, &lengths)),
                show(pearson(&alphas, &pds))
            );
            summary_csv(&rows)
        }
        None => {
            let ex = example_at(d, a.split, a.index.unwrap_or(0))?;
            let points = fader_sweep(&l.model, &d.vocab, &d.encoder, ex, &d.extractor, &d.table, &l.config.decode)?;
            sweep_csv(&points)
        }
    };
    match a.out {
        Some(path) => std::fs::write(path, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}

pub fn chat(a: ChatArgs) -> Result<(), Failure> {
    let l = load(&a.ckpt)?;
    let mut config = DecodeConfig { samples: 1, ..l.config.decode.clone() };
    let mut context: Vec<Utterance> = Vec::new();
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout();
    eprintln!("type a message; /reset clears the context, /alpha <x> fixes the fader, /quit exits");
    for (turn, line) in stdin.lock().lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match line.split_whitespace().collect::<Vec<_>>().as_slice() {
            ["/quit"] => break,
            ["/reset"] => {
                context.clear();
                continue;
            }
            ["/alpha", x] => {
                config.alpha = Some(x.parse().map_err(|_| Failure::usage(format!("bad fader value {x}")))?);
                config.validate().map_err(Failure::usage)?;
                continue;
            }
            _ => {}
        }
        context.push(Utterance::user(line));
        config.seed = l.config.decode.seed.wrapping_add(turn as u64);
        let reply = sample(&l.model, &l.data.vocab, &l.data.encoder, &context, &config)?.remove(0);
        writeln!(stdout, "{}", reply.text)?;
        stdout.flush()?;
        context.push(Utterance::agent(reply.text));
    }
    Ok(())
}

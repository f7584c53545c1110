use std::fs::{self, File, OpenOptions};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use beagle::analysis::{analyze as analyze_rows, read_eval_csv};
use beagle::data::{decode_lossy, encode, load_corpus, CorpusLoader, StateCache};
use beagle::masks::{inverse_block_mask, simulation_mask, simulation_mask_step, window_plan};
use beagle::models::{Checkpoint, DraftHead, TargetModel};
use beagle::specdec::{improvement_factor, sd_generate, target_generate, write_eval_csv, Mode, SdMetrics};
use beagle::train::target::train_target as run_target_training;
use beagle::train::{run_training, RunOptions, Stage, Teachers, TrainState, ValidationSet};

use crate::config::RunConfig;
use crate::UsageError;

fn require_file(path: &str, what: &str) -> Result<PathBuf> {
    let p = PathBuf::from(path);
    if !p.is_file() {
        return Err(UsageError(format!("{what} `{path}` does not exist")).into());
    }
    Ok(p)
}

fn load_training_corpus(cfg: &RunConfig) -> Result<(CorpusLoader, CorpusLoader)> {
    let path = require_file(&cfg.corpus, "corpus")?;
    if cfg.context + 1 > cfg.t_max {
        return Err(UsageError(format!("context {} does not fit t_max {}", cfg.context, cfg.t_max)).into());
    }
    let mut loader = load_corpus(&path, cfg.context, cfg.seeds().data)
        .with_context(|| format!("loading corpus {}", path.display()))?;
    if cfg.max_chunks > 0 {
        loader.truncate(cfg.max_chunks);
    }
    let (train, val) = loader.split_holdout(cfg.holdout);
    if train.chunks.is_empty() {
        return Err(UsageError(format!("corpus `{}` yields no training chunks", cfg.corpus)).into());
    }
    Ok((train, val))
}

fn load_target(cfg: &RunConfig) -> Result<TargetModel<f32>> {
    let path = require_file(&cfg.target, "target checkpoint")?;
    Checkpoint::read(&path)?.to_target().with_context(|| format!("reading {}", path.display()))
}

fn load_draft(path: &str) -> Result<DraftHead<f32>> {
    let path = require_file(path, "draft checkpoint")?;
    Checkpoint::read(&path)?.to_draft().with_context(|| format!("reading {}", path.display()))
}

fn header(cfg: &RunConfig, command: &str) -> String {
    let mut s = format!("# beagle {command}\n# seeds {}\n", cfg.seeds());
    for line in cfg.to_text().lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

pub fn train_target(cfg: &RunConfig) -> Result<()> {
    let (train, val) = load_training_corpus(cfg)?;
    let model_cfg = cfg.model();
    model_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().init);
    let mut model = TargetModel::init(model_cfg, &mut rng)?;
    let mut log = BufWriter::new(File::create(&cfg.target_log).with_context(|| format!("creating {}", cfg.target_log))?);
    log.write_all(header(cfg, "train-target").as_bytes())?;
    let hist = run_target_training(&mut model, &train, &val, &cfg.target_train(), &mut log)?;
    log.flush()?;
    let mut ck = Checkpoint::from_target(&model);
    ck.push_text("meta.config", &cfg.to_text());
    ck.write(Path::new(&cfg.target))?;
    for e in &hist {
        println!("epoch {} train_ce={:.4} val_ce={:.4}", e.epoch, e.train_ce, e.val_ce);
    }
    println!("saved target to {}", cfg.target);
    Ok(())
}

pub struct DraftOpts {
    pub stage: Stage,
    pub from_scratch: bool,
    pub init: Option<PathBuf>,
    pub resume: bool,
    pub until_epoch: Option<usize>,
}

pub fn train_draft(cfg: &RunConfig, opts: &DraftOpts) -> Result<()> {
    let tc = cfg.train();
    tc.validate()?;
    let target = load_target(cfg)?;
    let (train, val) = load_training_corpus(cfg)?;
    if cfg.context + 1 > target.config.t_max {
        return Err(UsageError(format!("context {} does not fit the target's t_max", cfg.context)).into());
    }
    let mut state = if opts.resume {
        let ck = Checkpoint::read(&require_file(&cfg.draft, "draft checkpoint")?)?;
        TrainState::from_checkpoint(&ck, &tc)?
    } else if let Some(p) = &opts.init {
        TrainState::fresh(load_draft(&p.to_string_lossy())?, &tc)
    } else if opts.stage == Stage::Late && !opts.from_scratch {
        return Err(UsageError("stage late needs --init <early checkpoint>, --resume or --from-scratch".into()).into());
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds().init);
        TrainState::fresh(DraftHead::init(target.config, &mut rng)?, &tc)
    };

    let cache;
    let teachers = if cfg.state_cache.is_empty() {
        Teachers::Target
    } else {
        let p = Path::new(&cfg.state_cache);
        cache = if p.is_file() {
            StateCache::read(p, &target)?
        } else {
            let c = StateCache::build(&target, &train.chunks)?;
            c.write(p)?;
            c
        };
        Teachers::Cache(&cache)
    };

    let validation = ValidationSet {
        prompts: val
            .chunks
            .iter()
            .take(cfg.val_prompts)
            .map(|c| c.tokens[..c.tokens.len().min(cfg.prompt_len.max(1))].to_vec())
            .collect(),
        max_tokens: cfg.val_tokens,
        gamma: cfg.gamma,
    };

    let mut log: Box<dyn Write> = if opts.resume {
        Box::new(BufWriter::new(OpenOptions::new().append(true).open(&cfg.log).with_context(|| format!("opening {}", cfg.log))?))
    } else {
        let mut f = BufWriter::new(File::create(&cfg.log).with_context(|| format!("creating {}", cfg.log))?);
        f.write_all(header(cfg, "train-draft").as_bytes())?;
        Box::new(f)
    };
    let text = cfg.to_text();
    let draft_path = PathBuf::from(&cfg.draft);
    let run_opts = RunOptions { stage: opts.stage, until_epoch: opts.until_epoch };
    let records = run_training(
        &tc,
        run_opts,
        &target,
        &train,
        teachers,
        &validation,
        &mut state,
        &mut log,
        &mut |s, _| s.to_checkpoint(&text).write(&draft_path),
    )?;
    log.flush()?;
    for r in &records {
        print!("epoch {} {} ce={:.4} vloss={:.4}", r.epoch, r.stage.name(), r.ce, r.vloss);
        if let Some(t) = r.val_tau {
            print!(" val_tau={t:.3}");
        }
        println!();
    }
    if records.is_empty() {
        println!("nothing to train; checkpoint already covers the requested epochs");
    }
    Ok(())
}

fn prompt_tokens(target: &TargetModel<f32>, text: &str) -> Result<Vec<usize>> {
    let toks = encode(text.as_bytes(), true);
    if toks.len() >= target.config.t_max {
        return Err(UsageError(format!("prompt of {} tokens leaves no room to generate", toks.len())).into());
    }
    Ok(toks)
}

pub fn generate(cfg: &RunConfig, prompt: &str, spec: bool) -> Result<()> {
    let target = load_target(cfg)?;
    let toks = prompt_tokens(&target, prompt)?;
    let seed = cfg.seeds().sampling;
    if spec {
        let head = load_draft(&cfg.draft)?;
        let (out, m) = sd_generate(&target, &head, &toks, cfg.max_tokens, cfg.sd(), seed)?;
        println!("{:?}", decode_lossy(&out));
        println!("tokens={}", out.len());
        println!("tokens_per_sec={:.2}", out.len() as f64 / (m.wall_us / 1e6).max(1e-9));
        println!("iterations={}", m.iterations.len());
        println!("mean_tau={:.4}", m.mean_tau());
        if let Ok(f) = improvement_factor(&m) {
            println!("improvement_factor={f:.4}");
        }
    } else {
        let start = Instant::now();
        let out = target_generate(&target, &toks, cfg.max_tokens, cfg.mode, cfg.stop_at_eos, seed)?;
        let secs = start.elapsed().as_secs_f64();
        println!("{:?}", decode_lossy(&out));
        println!("tokens={}", out.len());
        println!("tokens_per_sec={:.2}", out.len() as f64 / secs.max(1e-9));
    }
    Ok(())
}

fn peak_rss_kb() -> Option<u64> {
    let status = fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

pub fn eval(cfg: &RunConfig, prompts: &Path, out: &Path) -> Result<()> {
    let target = load_target(cfg)?;
    let head = load_draft(&cfg.draft)?;
    let text = fs::read_to_string(prompts)
        .map_err(|e| UsageError(format!("cannot read prompts {}: {e}", prompts.display())))?;
    let lines: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return Err(UsageError(format!("prompt file {} is empty", prompts.display())).into());
    }
    let summary_path = PathBuf::from(format!("{}.summary.csv", out.display()));
    let mut summary = BufWriter::new(File::create(&summary_path)?);
    writeln!(summary, "prompt,tokens,iterations,mean_tau,spec_tokens_per_sec,baseline_tokens_per_sec,identical")?;
    let seed = cfg.seeds().sampling;
    let mut all = SdMetrics::default();
    let (mut spec_tokens, mut spec_secs, mut base_tokens, mut base_secs) = (0usize, 0.0, 0usize, 0.0);
    let mut mismatches = 0;
    for (i, line) in lines.iter().enumerate() {
        let toks = prompt_tokens(&target, line)?;
        let (sd_out, m) = sd_generate(&target, &head, &toks, cfg.max_tokens, cfg.sd(), seed)?;
        let start = Instant::now();
        let base_out = target_generate(&target, &toks, cfg.max_tokens, cfg.mode, cfg.stop_at_eos, seed)?;
        let bs = start.elapsed().as_secs_f64();
        let ss = m.wall_us / 1e6;
        let identical = sd_out == base_out;
        if cfg.mode == Mode::Greedy && !identical {
            mismatches += 1;
        }
        writeln!(
            summary,
            "{},{},{},{:.4},{:.2},{:.2},{}",
            i + 1,
            sd_out.len(),
            m.iterations.len(),
            m.mean_tau(),
            sd_out.len() as f64 / ss.max(1e-9),
            base_out.len() as f64 / bs.max(1e-9),
            identical
        )?;
        spec_tokens += sd_out.len();
        spec_secs += ss;
        base_tokens += base_out.len();
        base_secs += bs;
        all.merge(&m);
    }
    summary.flush()?;
    let mut w = BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    write_eval_csv(&mut w, &all)?;
    w.flush()?;
    let spec_speed = spec_tokens as f64 / spec_secs.max(1e-9);
    let base_speed = base_tokens as f64 / base_secs.max(1e-9);
    println!("prompts={}", lines.len());
    println!("spec_tokens_per_sec={spec_speed:.2}");
    println!("baseline_tokens_per_sec={base_speed:.2}");
    println!("speedup={:.4}", spec_speed / base_speed.max(1e-9));
    println!("mean_tau={:.4}", all.mean_tau());
    if let Ok(f) = improvement_factor(&all) {
        println!("improvement_factor={f:.4}");
    }
    if let Some(kb) = peak_rss_kb() {
        println!("peak_rss_kb={kb}");
    }
    println!("wrote {} and {}", out.display(), summary_path.display());
    if mismatches > 0 {
        anyhow::bail!("{mismatches} prompts decoded differently from the greedy baseline");
    }
    Ok(())
}

pub fn toy_corpus(bytes: usize, seed: u64, out: &Path, prompts: Option<(&Path, usize)>) -> Result<()> {
    fs::write(out, beagle::data::toy::generate(bytes, seed)).with_context(|| format!("writing {}", out.display()))?;
    if let Some((path, count)) = prompts {
        let mut text = beagle::data::toy::prompts(count, seed ^ 0x5eed).join("\n");
        text.push('\n');
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

pub fn mask_dump(t: usize, k: usize, eps: usize, step: usize) -> Result<()> {
    if step == 0 || step > k {
        return Err(UsageError(format!("step must be in 1..={k}, got {step}")).into());
    }
    let plan = window_plan(t, k, eps)?;
    let grid = if step == 1 {
        inverse_block_mask(&plan).to_ascii(false)
    } else {
        let mut m = simulation_mask(&plan);
        for i in 2..=step {
            simulation_mask_step(&mut m, &plan, i)?;
        }
        m.to_ascii(true)
    };
    print!("{grid}");
    Ok(())
}

pub fn analyze(csv: &Path, out: Option<&Path>) -> Result<()> {
    let f = File::open(csv).map_err(|e| UsageError(format!("cannot open {}: {e}", csv.display())))?;
    let rows = read_eval_csv(BufReader::new(f)).with_context(|| format!("parsing {}", csv.display()))?;
    let report = analyze_rows(&rows)?;
    print!("{}", report.summary());
    match out {
        Some(p) => fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{}", report.to_csv()),
    }
    Ok(())
}

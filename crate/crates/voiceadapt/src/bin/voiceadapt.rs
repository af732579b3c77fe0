//! Command-line driver for the batched speaker-adaptation experiments.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use voiceadapt::adapter::SharingMode;
use voiceadapt::checkpoint;
use voiceadapt::config::ExperimentConfig;
use voiceadapt::error::{Error, Result};
use voiceadapt::experiments::{
    self, ablation_scale, ablation_sharing, adapt_setup, batch_sweep, bench, build_context,
    eval_similarity, groups, report_row, run_one, sample_batch, Context,
};
use voiceadapt::gradcheck::{run_suite, Fault};
use voiceadapt::report::{write_csv, write_json, Report};
use voiceadapt::toytask::SpeakerBatch;

#[derive(Parser)]
#[command(name = "voiceadapt", about = "Batched multi-speaker adapter tuning on a toy diffusion model", version)]
struct Cli {
    /// Path to a key = value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for reports and checkpoints.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Sharing mode: batchwise, shared-b, shared-a or shared-both.
    #[arg(long, global = true)]
    mode: Option<String>,
    /// Disable the per-speaker scale matrix (implies --no-norm).
    #[arg(long, global = true)]
    no_scale: bool,
    /// Keep the scale matrix but skip column normalization.
    #[arg(long, global = true)]
    no_norm: bool,
    /// Freeze the shared up-projection at its random initialization.
    #[arg(long, global = true)]
    freeze_b: bool,
    /// Number of speakers adapted per batch.
    #[arg(long, global = true)]
    speakers: Option<usize>,
    /// Adaptation iterations.
    #[arg(long, global = true)]
    iters: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base score net and save its checkpoint.
    Pretrain,
    /// Adapt a batch of new speakers against the pretrained net.
    Adapt,
    /// Sample mels from an adapted checkpoint.
    Sample,
    /// Evaluate an adapted checkpoint against the unadapted baseline.
    Eval,
    /// Print per-speaker trainable-parameter counts.
    CountParams,
    /// Finite-difference check of every adapter gradient path.
    Gradcheck,
    /// Compare the four sharing modes under identical seeds.
    AblateSharing,
    /// Compare full configuration vs no normalization vs no scale matrix.
    AblateScale,
    /// Sweep the number of simultaneously adapted speakers.
    SweepBatch,
    /// Time batched vs sequential adaptation.
    Bench,
    /// Compare same-cluster vs mixed speaker groups.
    Groups,
}

fn effective_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(mode) = &cli.mode {
        cfg.mode = SharingMode::parse(mode)?;
    }
    if cli.no_scale {
        cfg.scale = false;
        cfg.norm = false;
    }
    if cli.no_norm {
        cfg.norm = false;
    }
    if cli.freeze_b {
        cfg.freeze_b = true;
    }
    if let Some(n) = cli.speakers {
        cfg.speakers = n;
    }
    if let Some(iters) = cli.iters {
        cfg.iters = iters;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn net_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("net.nvsn")
}

fn bank_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.out_dir.join("bank.nvbk")
}

/// Load the pretrained net if a checkpoint exists, otherwise pretrain and
/// save one.
fn context(cfg: &ExperimentConfig) -> Result<Context> {
    let path = net_path(cfg);
    if path.exists() {
        let net = checkpoint::load_net(&path)?;
        if net.cfg != cfg.net_config() {
            return Err(Error::Compat(format!(
                "checkpoint {} was pretrained with a different net configuration",
                path.display()
            )));
        }
        Ok(Context {
            cfg: cfg.clone(),
            net,
            schedule: voiceadapt::Schedule::new(cfg.beta0, cfg.beta1)?,
            pretrain_curve: Vec::new(),
        })
    } else {
        let ctx = build_context(cfg)?;
        checkpoint::save_net(&path, &ctx.net)?;
        Ok(ctx)
    }
}

fn emit<C: serde::Serialize>(cfg: &ExperimentConfig, report: &Report<C>) -> Result<()> {
    let json = cfg.out_dir.join(format!("{}.json", report.command));
    let csv = cfg.out_dir.join(format!("{}.csv", report.command));
    write_json(&json, report)?;
    write_csv(&csv, &report.rows)?;
    for row in &report.rows {
        println!(
            "  {:<22} mode={:<11} N={} seed={} params/spk={:>9} sim={:.4} (min {:.4}) loss={:.5} {:.2}s",
            row.label,
            row.mode,
            row.speakers,
            row.seed,
            row.params_exact,
            row.similarity_mean,
            row.similarity_min,
            row.final_loss,
            row.wall_seconds
        );
    }
    for note in &report.notes {
        println!("  note: {}", note);
    }
    println!("wrote {} and {}", json.display(), csv.display());
    Ok(())
}

fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = build_context(cfg)?;
    let path = net_path(cfg);
    checkpoint::save_net(&path, &ctx.net)?;
    write_json(
        &cfg.out_dir.join("pretrain.json"),
        &serde_json::json!({
            "command": "pretrain",
            "iters": cfg.pretrain_iters,
            "smoothed_loss": ctx.pretrain_curve,
        }),
    )?;
    println!(
        "pretrained {} iterations; smoothed loss {:.5} -> {:.5}",
        cfg.pretrain_iters,
        ctx.pretrain_curve.first().copied().unwrap_or(f64::NAN),
        ctx.pretrain_curve.last().copied().unwrap_or(f64::NAN)
    );
    println!("saved {}", path.display());
    Ok(())
}

fn cmd_adapt(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = context(cfg)?;
    let seed = cfg.seeds[0];
    let (_, batch) = adapt_setup(cfg, seed, cfg.speakers)?;
    let acfg = cfg.adapter_config(cfg.speakers);
    let run = run_one(&ctx, &acfg, &batch, seed)?;
    checkpoint::save_bank(&bank_path(cfg), &run.bank)?;
    checkpoint::save_dataset(&cfg.out_dir.join("data"), &batch)?;
    let dims = ctx.net.cfg.adapted_layer_dims();
    let row = report_row(
        "adapt",
        &acfg,
        &dims,
        seed,
        &run.sims,
        run.final_loss,
        run.wall_seconds,
    )?;
    let report = Report {
        command: "adapt".to_string(),
        config: cfg.clone(),
        rows: vec![row],
        notes: vec![
            format!("per-speaker similarity: {:?}", rounded(&run.sims)),
            format!("unadapted baseline:     {:?}", rounded(&run.baseline_sims)),
        ],
    };
    emit(cfg, &report)?;
    println!("saved {}", bank_path(cfg).display());
    Ok(())
}

fn load_adapted(cfg: &ExperimentConfig) -> Result<(Context, SpeakerBatch, voiceadapt::adapter::AdapterBank)> {
    let ctx = context(cfg)?;
    let bank = checkpoint::load_bank(&bank_path(cfg), &ctx.net.adapted_base_weights())?;
    let n = bank.speaker_ids().len();
    let (_, batch) = adapt_setup(cfg, cfg.seeds[0], n)?;
    if batch.speaker_ids != bank.speaker_ids() {
        return Err(Error::Compat(
            "bank speakers do not match the seed's reference batch; \
             rerun adapt with the same --seed and --speakers"
                .into(),
        ));
    }
    Ok((ctx, batch, bank))
}

fn cmd_sample(cfg: &ExperimentConfig) -> Result<()> {
    let (ctx, batch, bank) = load_adapted(cfg)?;
    let seed = cfg.seeds[0];
    let generated = sample_batch(
        &ctx.net,
        &ctx.schedule,
        Some(&bank),
        &batch,
        cfg.sample_steps,
        seed,
        0,
    )?;
    let mut out_batch = batch.clone();
    out_batch.x0 = generated;
    let files = checkpoint::save_dataset(&cfg.out_dir.join("generated"), &out_batch)?;
    println!(
        "sampled {} speakers over {} steps; wrote {} files under {}",
        batch.n(),
        cfg.sample_steps,
        files.len(),
        cfg.out_dir.join("generated").display()
    );
    Ok(())
}

fn cmd_eval(cfg: &ExperimentConfig) -> Result<()> {
    let (ctx, batch, bank) = load_adapted(cfg)?;
    let seed = cfg.seeds[0];
    let adapted = sample_batch(&ctx.net, &ctx.schedule, Some(&bank), &batch, cfg.sample_steps, seed, 0)?;
    let baseline = sample_batch(&ctx.net, &ctx.schedule, None, &batch, cfg.sample_steps, seed, 0)?;
    let sims = eval_similarity(&batch, &adapted)?;
    let base_sims = eval_similarity(&batch, &baseline)?;
    let acfg = bank.config().clone();
    let dims = ctx.net.cfg.adapted_layer_dims();
    let row = report_row("adapted", &acfg, &dims, seed, &sims, f64::NAN, 0.0)?;
    let wins = sims
        .iter()
        .zip(&base_sims)
        .filter(|(a, b)| a > b)
        .count();
    let report = Report {
        command: "eval".to_string(),
        config: cfg.clone(),
        rows: vec![row],
        notes: vec![
            format!("per-speaker similarity: {:?}", rounded(&sims)),
            format!("unadapted baseline:     {:?}", rounded(&base_sims)),
            format!("{} of {} speakers beat the baseline", wins, sims.len()),
        ],
    };
    emit(cfg, &report)
}

fn rounded(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn cmd_count_params(cfg: &ExperimentConfig) -> Result<()> {
    let dims = cfg.net_config().adapted_layer_dims();
    let rows = experiments::count_table(&dims, cfg.rank, &[1, 2, 4, 8, 16, 40])?;
    println!("{:<24} {:>4} {:>14} {:>12}", "configuration", "N", "params/spk", "exact");
    let mut json_rows = Vec::new();
    for (label, n, p) in &rows {
        let approx = *p.numer() as f64 / *p.denom() as f64;
        println!("{:<24} {:>4} {:>14.2} {:>12}", label, n, approx, format!("{}/{}", p.numer(), p.denom()));
        json_rows.push(serde_json::json!({
            "label": label,
            "speakers": n,
            "params_per_speaker": approx,
            "params_exact": format!("{}/{}", p.numer(), p.denom()),
        }));
    }
    write_json(
        &cfg.out_dir.join("count-params.json"),
        &serde_json::json!({
            "command": "count-params",
            "rank": cfg.rank,
            "layer_dims": dims,
            "rows": json_rows,
        }),
    )?;
    println!("wrote {}", cfg.out_dir.join("count-params.json").display());
    Ok(())
}

fn cmd_gradcheck(cfg: &ExperimentConfig) -> Result<()> {
    let report = run_suite(20, Fault::None)?;
    for r in &report.results {
        let status = if r.informational {
            "info"
        } else if r.pass {
            "ok"
        } else {
            "FAIL"
        };
        println!(
            "  [{:>4}] {:<12} mode={:<11} scale={} norm={} freeze_b={} detach={} max_rel_err={:.3e}",
            status, r.what, r.mode, r.scale, r.norm, r.freeze_b, r.detach_norm, r.max_rel_err
        );
    }
    write_json(&cfg.out_dir.join("gradcheck.json"), &report)?;
    println!(
        "gradcheck: {} checks, tolerance {:.0e}, all_passed = {}",
        report.results.len(),
        report.tolerance,
        report.all_passed
    );
    if report.all_passed {
        Ok(())
    } else {
        Err(Error::Training("gradient check failed".into()))
    }
}

fn cmd_bench(cfg: &ExperimentConfig) -> Result<()> {
    let ctx = context(cfg)?;
    let b = bench(&ctx, cfg.speakers)?;
    write_json(&cfg.out_dir.join("bench.json"), &b)?;
    println!(
        "bench: N={} iters={} reps={}; batched median {:.3}s, sequential median {:.3}s, \
         speedup {:.2}x, {:.4}s amortized per speaker",
        b.speakers,
        b.iterations,
        b.reps,
        b.median_batched,
        b.median_sequential,
        b.speedup,
        b.amortized_seconds_per_speaker
    );
    println!("wrote {}", cfg.out_dir.join("bench.json").display());
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = effective_config(cli)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    match cli.command {
        Command::Pretrain => cmd_pretrain(&cfg),
        Command::Adapt => cmd_adapt(&cfg),
        Command::Sample => cmd_sample(&cfg),
        Command::Eval => cmd_eval(&cfg),
        Command::CountParams => cmd_count_params(&cfg),
        Command::Gradcheck => cmd_gradcheck(&cfg),
        Command::AblateSharing => {
            let ctx = context(&cfg)?;
            emit(&cfg, &ablation_sharing(&ctx)?)
        }
        Command::AblateScale => {
            let ctx = context(&cfg)?;
            emit(&cfg, &ablation_scale(&ctx)?)
        }
        Command::SweepBatch => {
            let ctx = context(&cfg)?;
            emit(&cfg, &batch_sweep(&ctx)?)
        }
        Command::Bench => cmd_bench(&cfg),
        Command::Groups => {
            let ctx = context(&cfg)?;
            emit(&cfg, &groups(&ctx)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}

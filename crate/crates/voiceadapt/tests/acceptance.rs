//! Acceptance gate: one test per criterion, each printing a single
//! pass/fail line that stays visible in a plain `cargo test` run.
//!
//! The experiment-grade criteria share one pretrained base net and run
//! serialized behind a global mutex so wall-clock measurements are clean.

use std::sync::{Mutex, OnceLock, PoisonError};

use num_rational::Ratio;

use voiceadapt::adapter::{
    init_bank, param_count, AdapterConfig, SharingMode,
};
use voiceadapt::checkpoint;
use voiceadapt::config::ExperimentConfig;
use voiceadapt::experiments::{
    ablation_scale, ablation_sharing, batch_sweep, bench, build_context, frozen_b_comparison,
    label_mean, run_one, Context,
};
use voiceadapt::gradcheck::{run_suite, Fault};
use voiceadapt::rng::RngStream;
use voiceadapt::scorenet::{BatchInput, NetConfig, ScoreNet};
use voiceadapt::toytask::{default_lengths, gen_speakers, make_reference_batch};
use voiceadapt::trainer::{adapt_batched, adapt_sequential};
use voiceadapt::Schedule;

static GATE: Mutex<()> = Mutex::new(());

fn serialize() -> std::sync::MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(PoisonError::into_inner)
}

fn verdict(number: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {:>2} ({}): {} [{}]",
        number,
        name,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    // write straight to fd 1: the harness captures the std print machinery,
    // not the descriptor, so the gate lines stay visible without --nocapture
    {
        use std::io::Write;
        use std::os::fd::FromRawFd;
        let mut out = unsafe { std::fs::File::from_raw_fd(1) };
        let _ = writeln!(out, "{}", line);
        std::mem::forget(out);
    }
    assert!(pass, "{}", line);
}

/// Pretrained context at default settings, built once for the whole gate.
fn shared_context() -> &'static Context {
    static CTX: OnceLock<Context> = OnceLock::new();
    CTX.get_or_init(|| build_context(&ExperimentConfig::default()).expect("pretraining failed"))
}

/// Same pretrained net, longer adaptation for the saturation-regime
/// similarity comparisons.
fn experiment_context(iters: usize) -> Context {
    let base = shared_context();
    let mut cfg = base.cfg.clone();
    cfg.iters = iters;
    Context {
        cfg,
        net: base.net.clone(),
        schedule: base.schedule,
        pretrain_curve: Vec::new(),
    }
}

fn small_net(n_speakers: usize, seed: u64) -> ScoreNet {
    let cfg = NetConfig {
        f_dim: 16,
        hidden: 16,
        attn_dim: 24,
        ff_dim: 24,
        blocks: 2,
        n_codes: 8,
        n_speakers,
    };
    ScoreNet::init(cfg, &RngStream::new(seed, 7)).unwrap()
}

fn adapter_cfg(
    mode: SharingMode,
    scale: bool,
    norm: bool,
    n: usize,
    freeze_b: bool,
) -> AdapterConfig {
    AdapterConfig {
        rank: 2,
        alpha: 8.0,
        sharing_mode: mode,
        scale_enabled: scale,
        normalization_enabled: norm,
        num_speakers: n,
        freeze_b,
        detach_norm: false,
    }
}

const ALL_MODES: [SharingMode; 4] = [
    SharingMode::Batchwise,
    SharingMode::SharedB,
    SharingMode::SharedA,
    SharingMode::SharedBoth,
];

#[test]
fn criterion_01_gradient_exactness() {
    let _g = serialize();
    let report = run_suite(20, Fault::None).unwrap();
    let worst = report
        .results
        .iter()
        .filter(|r| !r.informational)
        .map(|r| r.max_rel_err)
        .fold(0.0f64, f64::max);
    let detail = format!(
        "{} checks, worst rel err {:.3e}, tolerance {:.0e}",
        report.results.len(),
        worst,
        report.tolerance
    );
    verdict(1, "gradient exactness", report.all_passed, &detail);
}

#[test]
fn criterion_02_function_preservation_at_init() {
    let _g = serialize();
    let net = small_net(4, 21);
    let speakers = gen_speakers(3, 909);
    let lengths = default_lengths(&speakers, 909);
    let batch = make_reference_batch(&speakers, &lengths, 909).unwrap();
    let input = BatchInput {
        x: &batch.x0,
        t: &[0.3, 0.55, 0.8],
        codes: &batch.content,
        lengths: &batch.lengths,
        speaker_rows: None,
    };
    let base = net.score_forward(None, &input).unwrap();
    let mut worst = 0.0f64;
    for mode in ALL_MODES {
        for (scale, norm) in [(false, false), (true, false), (true, true)] {
            let acfg = adapter_cfg(mode, scale, norm, 3, false);
            let bank = init_bank(
                &acfg,
                &net.adapted_base_weights(),
                &batch.speaker_ids,
                &RngStream::new(33, 0),
            )
            .unwrap();
            let adapted = net.score_forward(Some(&bank), &input).unwrap();
            worst = worst.max(adapted.sub(&base).unwrap().max_abs());
        }
    }
    let detail = format!("12 configurations, max abs diff {:.3e}", worst);
    verdict(2, "function preservation at init", worst <= 1e-12, &detail);
}

#[test]
fn criterion_03_batched_equals_sequential() {
    let _g = serialize();
    let net = small_net(4, 5);
    let schedule = Schedule::new(0.05, 20.0).unwrap();
    let speakers = gen_speakers(4, 606);
    let lengths = default_lengths(&speakers, 606);
    let batch = make_reference_batch(&speakers, &lengths, 606).unwrap();
    let acfg = adapter_cfg(SharingMode::Batchwise, true, true, 4, false);
    let bank = init_bank(
        &acfg,
        &net.adapted_base_weights(),
        &batch.speaker_ids,
        &RngStream::new(34, 0),
    )
    .unwrap();
    let b = adapt_batched(&net, &schedule, bank.clone(), &batch, 50, 1e-3, 77).unwrap();
    let s = adapt_sequential(&net, &schedule, bank, &batch, 50, 1e-3, 77).unwrap();
    let mut param_diff = 0.0f64;
    for (lb, ls) in b.bank.layers().iter().zip(s.bank.layers()) {
        param_diff = param_diff.max(lb.b.sub(&ls.b).unwrap().max_abs());
        param_diff = param_diff.max(lb.a.sub(&ls.a).unwrap().max_abs());
        if let (Some(mb), Some(ms)) = (&lb.m, &ls.m) {
            param_diff = param_diff.max(mb.sub(ms).unwrap().max_abs());
        }
    }
    let mut loss_diff = 0.0f64;
    for (hb, hs) in b.loss_history.iter().zip(&s.loss_history) {
        for (x, y) in hb.iter().zip(hs) {
            loss_diff = loss_diff.max((x - y).abs());
        }
    }
    let detail = format!(
        "N=4, 50 iters: max param diff {:.3e}, max loss diff {:.3e}",
        param_diff, loss_diff
    );
    verdict(
        3,
        "batched equals sequential",
        param_diff <= 1e-9 && loss_diff <= 1e-9,
        &detail,
    );
}

#[test]
fn criterion_04_parameter_accounting() {
    let _g = serialize();
    // aggregate adapted-layer dims of the full-size model
    let dims = [(12_548usize, 6_912usize)];
    let close = |acfg: &AdapterConfig, target: f64| -> (bool, f64) {
        let p = param_count(acfg, &dims).unwrap();
        let v = *p.numer() as f64 / *p.denom() as f64;
        ((v - target).abs() <= 10.0, v)
    };
    let mut pass = true;
    let mut details = Vec::new();
    // sharing comparison at N = 40, no scale matrix
    for (mode, target) in [
        (SharingMode::Batchwise, 38_920.0),
        (SharingMode::SharedB, 14_459.0),
        (SharingMode::SharedA, 25_442.0),
        (SharingMode::SharedBoth, 973.0),
    ] {
        let (ok, v) = close(&adapter_cfg(mode, false, false, 40, false), target);
        pass &= ok;
        details.push(format!("{} {:.1}/{}", mode.label(), v, target));
    }
    // full configuration across batch sizes
    for (n, target) in [(1, 45_832.0), (5, 25_755.0), (20, 21_991.0), (40, 21_363.0)] {
        let (ok, v) = close(&adapter_cfg(SharingMode::SharedB, true, true, n, false), target);
        pass &= ok;
        details.push(format!("N={} {:.1}/{}", n, v, target));
    }
    // shared-both is exactly batchwise / N as rationals, arbitrary dims
    let mut stream = RngStream::new(4040, 0);
    for _ in 0..50 {
        let d = 1 + stream.next_index(2000);
        let k = 1 + stream.next_index(2000);
        let n = 1 + stream.next_index(64);
        let bw = param_count(&adapter_cfg(SharingMode::Batchwise, false, false, n, false), &[(d, k)]).unwrap();
        let sb = param_count(&adapter_cfg(SharingMode::SharedBoth, false, false, n, false), &[(d, k)]).unwrap();
        if sb != bw / Ratio::from_integer(n as i64) {
            pass = false;
            details.push(format!("rational identity failed at d={} k={} n={}", d, k, n));
        }
    }
    verdict(4, "parameter accounting", pass, &details.join(", "));
}

#[test]
fn criterion_05_sharing_ablation_ordering() {
    let _g = serialize();
    let ctx = experiment_context(1500);
    let report = ablation_sharing(&ctx).unwrap();
    let bw = label_mean(&report.rows, "batchwise");
    let sb = label_mean(&report.rows, "shared-b");
    let sa = label_mean(&report.rows, "shared-a");
    let both = label_mean(&report.rows, "shared-both");
    let dims = ctx.net.cfg.adapted_layer_dims();
    let p_sb = param_count(&adapter_cfg(SharingMode::SharedB, false, false, 8, false), &dims).unwrap();
    let p_bw = param_count(&adapter_cfg(SharingMode::Batchwise, false, false, 8, false), &dims).unwrap();
    let ratio = p_sb / p_bw;
    let ratio_ok = ratio <= Ratio::new(45, 100);
    let c1 = sb >= bw - 0.03;
    let c2 = sa <= sb;
    let c3 = both <= sb;
    let detail = format!(
        "batchwise {:.4}, shared-b {:.4}, shared-a {:.4}, shared-both {:.4}; \
         shared-b/batchwise params {}/{} = {:.3} (<= 0.45: {}); \
         shared-b >= batchwise - 0.03: {}; shared-a <= shared-b: {}; shared-both <= shared-b: {}",
        bw, sb, sa, both, p_sb, p_bw,
        *ratio.numer() as f64 / *ratio.denom() as f64,
        ratio_ok, c1, c2, c3
    );
    verdict(5, "sharing ablation ordering", c1 && c2 && c3 && ratio_ok, &detail);
}

#[test]
fn criterion_06_scale_matrix_ablation() {
    let _g = serialize();
    // the scale/normalization differences only separate from sampling noise
    // near saturation, hence the longer budget here
    let ctx = experiment_context(3000);
    let report = ablation_scale(&ctx).unwrap();
    let full = label_mean(&report.rows, "full");
    let no_norm = label_mean(&report.rows, "- normalization");
    let no_scale = label_mean(&report.rows, "- scale matrix");
    let dims = ctx.net.cfg.adapted_layer_dims();
    let p_full = param_count(&adapter_cfg(SharingMode::SharedB, true, true, 8, false), &dims).unwrap();
    let p_plain = param_count(&adapter_cfg(SharingMode::SharedB, false, false, 8, false), &dims).unwrap();
    let sum_k: i64 = dims.iter().map(|&(_, k)| k as i64).sum();
    let params_ok = p_full - p_plain == Ratio::from_integer(sum_k);
    let c1 = full >= no_scale - 0.01;
    let c2 = full >= no_norm - 0.01;
    let detail = format!(
        "full {:.4}, -normalization {:.4}, -scale {:.4}; scale adds {} params (= sum k: {})",
        full, no_norm, no_scale, p_full - p_plain, params_ok
    );
    verdict(6, "scale matrix ablation", c1 && c2 && params_ok, &detail);
}

#[test]
fn criterion_07_batch_size_robustness() {
    let _g = serialize();
    let ctx = experiment_context(1500);
    let report = batch_sweep(&ctx).unwrap();
    let sizes = [1usize, 2, 4, 8];
    let means: Vec<f64> = sizes
        .iter()
        .map(|n| label_mean(&report.rows, &format!("N = {}", n)))
        .collect();
    let spread = means.iter().cloned().fold(f64::MIN, f64::max)
        - means.iter().cloned().fold(f64::MAX, f64::min);
    let dims = ctx.net.cfg.adapted_layer_dims();
    let counts: Vec<Ratio<i64>> = sizes
        .iter()
        .map(|&n| param_count(&ctx.cfg.adapter_config(n), &dims).unwrap())
        .collect();
    let decreasing = counts.windows(2).all(|w| w[1] < w[0]);
    let detail = format!(
        "means {:?}, spread {:.4} (<= 0.05); params {:?} strictly decreasing: {}",
        means.iter().map(|m| (m * 1e4).round() / 1e4).collect::<Vec<_>>(),
        spread,
        counts
            .iter()
            .map(|p| *p.numer() as f64 / *p.denom() as f64)
            .collect::<Vec<_>>(),
        decreasing
    );
    verdict(7, "batch size robustness", spread <= 0.05 && decreasing, &detail);
}

#[test]
fn criterion_08_frozen_b_analysis() {
    let _g = serialize();
    let ctx = experiment_context(1500);
    let report = frozen_b_comparison(&ctx).unwrap();
    let trainable = label_mean(&report.rows, "trainable B");
    let frozen = label_mean(&report.rows, "frozen B");
    let diff = (frozen - trainable).abs();
    let detail = format!(
        "trainable {:.4}, frozen {:.4}, |diff| {:.4} (<= 0.02)",
        trainable, frozen, diff
    );
    verdict(8, "frozen B analysis", diff <= 0.02, &detail);
}

#[test]
fn criterion_09_batched_speedup() {
    let _g = serialize();
    let ctx = shared_context();
    let b = bench(ctx, 8).unwrap();
    let detail = format!(
        "median batched {:.3}s vs sequential {:.3}s over {} reps: {:.2}x (>= 1.6 required); \
         {:.4}s amortized per speaker",
        b.median_batched, b.median_sequential, b.reps, b.speedup, b.amortized_seconds_per_speaker
    );
    verdict(9, "batched wall-clock speedup", b.speedup >= 1.6, &detail);
}

#[test]
fn criterion_10_end_to_end_efficacy() {
    let _g = serialize();
    let ctx = shared_context();
    let mut pass = true;
    let mut details = Vec::new();
    for &seed in &ctx.cfg.seeds {
        let (_, batch) =
            voiceadapt::experiments::adapt_setup(&ctx.cfg, seed, ctx.cfg.speakers).unwrap();
        let acfg = ctx.cfg.adapter_config(ctx.cfg.speakers);
        let run = run_one(ctx, &acfg, &batch, seed).unwrap();
        let wins = run
            .sims
            .iter()
            .zip(&run.baseline_sims)
            .filter(|(a, b)| a > b)
            .count();
        pass &= wins >= 7;
        details.push(format!("seed {}: {}/8 beat baseline", seed, wins));
    }
    verdict(10, "end-to-end efficacy", pass, &details.join(", "));
}

#[test]
fn criterion_11_serialization() {
    let _g = serialize();
    let dir = std::env::temp_dir().join(format!("va-accept-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let net = small_net(4, 77);
    let speakers = gen_speakers(3, 303);
    let lengths = default_lengths(&speakers, 303);
    let batch = make_reference_batch(&speakers, &lengths, 303).unwrap();
    let acfg = adapter_cfg(SharingMode::SharedB, true, true, 3, false);
    let mut bank = init_bank(
        &acfg,
        &net.adapted_base_weights(),
        &batch.speaker_ids,
        &RngStream::new(55, 0),
    )
    .unwrap();
    // perturb so the payload is not all zeros
    for layer in bank.layers_mut() {
        for v in layer.a.data_mut() {
            *v += 0.125;
        }
    }
    let mut pass = true;
    let mut details = Vec::new();

    let bank_path = dir.join("bank.nvbk");
    checkpoint::save_bank(&bank_path, &bank).unwrap();
    let loaded = checkpoint::load_bank(&bank_path, &net.adapted_base_weights()).unwrap();
    let resaved = dir.join("bank2.nvbk");
    checkpoint::save_bank(&resaved, &loaded).unwrap();
    let identical = std::fs::read(&bank_path).unwrap() == std::fs::read(&resaved).unwrap();
    pass &= identical;
    details.push(format!("bank round trip byte-identical: {}", identical));

    let net_path = dir.join("net.nvsn");
    checkpoint::save_net(&net_path, &net).unwrap();
    let loaded_net = checkpoint::load_net(&net_path).unwrap();
    let resaved_net = dir.join("net2.nvsn");
    checkpoint::save_net(&resaved_net, &loaded_net).unwrap();
    let identical_net = std::fs::read(&net_path).unwrap() == std::fs::read(&resaved_net).unwrap();
    pass &= identical_net;
    details.push(format!("net round trip byte-identical: {}", identical_net));

    // corrupt the magic, the version and a payload byte: all must be rejected
    let original = std::fs::read(&bank_path).unwrap();
    for (offset, label) in [(0usize, "magic"), (5usize, "version"), (64usize, "payload")] {
        let mut bytes = original.clone();
        bytes[offset] ^= 0xFF;
        let corrupt_path = dir.join("corrupt.nvbk");
        std::fs::write(&corrupt_path, &bytes).unwrap();
        let rejected = checkpoint::load_bank(&corrupt_path, &net.adapted_base_weights()).is_err();
        pass &= rejected;
        details.push(format!("{} corruption rejected: {}", label, rejected));
    }
    // truncation rejected as well
    let truncated = dir.join("short.nvbk");
    std::fs::write(&truncated, &original[..original.len() / 2]).unwrap();
    let rejected = checkpoint::load_bank(&truncated, &net.adapted_base_weights()).is_err();
    pass &= rejected;
    details.push(format!("truncation rejected: {}", rejected));

    std::fs::remove_dir_all(&dir).unwrap();
    verdict(11, "serialization", pass, &details.join(", "));
}

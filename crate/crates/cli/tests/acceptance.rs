//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::time::{Duration, Instant};

use mqmha::gradcheck::run_suite;
use mqmha::harness::{evaluate, generate_dataset, nearest_centroid_accuracy, train, PoolingChoice, SyntheticSpeakerSpec};
use mqmha::loss::{averaged_margin, inter_topk_loss, loss_equivalent_form, LossConfig, PenaltyMode};
use mqmha::metrics::{compute_eer, compute_min_dcf, P_TARGETS};
use mqmha::pooling::{
    attention_weights, init_pooling_params, mqmha_forward, statistics_pool, PoolingConfig, PoolingParams, WeightMode,
};
use mqmha::Tensor;
use mqmha_cli::config::ExperimentConfig;
use mqmha_cli::sweep::{run_sweep, sweep_train_config, SweepSpec};
use mqmha_cli::Report;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_suite() -> Result<String, String> {
    let start = Instant::now();
    let rows = run_suite(20_211_115, 100).map_err(err)?;
    let elapsed = start.elapsed();
    let required = ["SA", "MHA", "AS", "VSA", "h=16, q=4", "loss (additive)", "loss (angular)"];
    for name in required {
        ensure(rows.iter().any(|r| r.name.contains(name)), || format!("no gradient family covers {name}"))?;
    }
    let worst = rows.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    for r in &rows {
        ensure(r.instances >= 100, || format!("{} ran {} instances", r.name, r.instances))?;
        ensure(r.max_rel_error <= 1e-6, || format!("{}: max rel error {:e}", r.name, r.max_rel_error))?;
    }
    ensure(elapsed <= Duration::from_secs(60), || format!("suite took {elapsed:?}"))?;
    Ok(format!(
        "{} families x 100 instances, worst rel error {worst:.2e} (tol 1e-6), {:.1}s",
        rows.len(),
        elapsed.as_secs_f64()
    ))
}

fn am_softmax(cos: &Tensor, labels: &[usize], s: f64, m: f64) -> f64 {
    let (n, c) = cos.dims2().unwrap();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = cos.row(i);
        let z: Vec<f64> = (0..c).map(|j| if j == y { s * (row[j] - m) } else { s * row[j] }).collect();
        let peak = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        total += peak + z.iter().map(|v| (v - peak).exp()).sum::<f64>().ln() - z[y];
    }
    total / n as f64
}

fn algebraic_identities() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut d_forms, mut d_k0, mut d_full) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..2000 {
        let n = rng.random_range(1..=6);
        let c = rng.random_range(2..=12);
        let cos = Tensor::uniform(&[n, c], 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
        let mode = if rng.random() { PenaltyMode::Additive } else { PenaltyMode::Angular };
        let cfg = LossConfig {
            scale: rng.random_range(1.0..64.0),
            margin: rng.random_range(0.0..0.5),
            margin_prime: rng.random_range(0.0..0.3),
            k_top: rng.random_range(0..c),
            sub_centers: 1,
            penalty_mode: mode,
            classes: c,
            ramp_margin_prime: false,
        };
        let m = cfg.margin * rng.random_range(0.0..=1.0);
        let a = inter_topk_loss(&cos, &labels, &cfg, m).map_err(err)?.loss;
        let b = loss_equivalent_form(&cos, &labels, &cfg, m).map_err(err)?;
        d_forms = d_forms.max((a - b).abs());

        let k0 = LossConfig { k_top: 0, ..cfg.clone() };
        let got = inter_topk_loss(&cos, &labels, &k0, m).map_err(err)?.loss;
        d_k0 = d_k0.max((got - am_softmax(&cos, &labels, cfg.scale, m)).abs());

        let full = LossConfig {
            k_top: c - 1,
            penalty_mode: PenaltyMode::Additive,
            ..cfg.clone()
        };
        let got = inter_topk_loss(&cos, &labels, &full, m).map_err(err)?.loss;
        d_full = d_full.max((got - am_softmax(&cos, &labels, cfg.scale, m + cfg.margin_prime)).abs());
    }
    ensure(d_forms <= 1e-10, || format!("|two forms| = {d_forms:e}"))?;
    ensure(d_k0 <= 1e-12, || format!("k_top=0 deviation {d_k0:e}"))?;
    ensure(d_full <= 1e-10, || format!("k_top=C-1 deviation {d_full:e}"))?;
    for c in [2usize, 3, 20, 5994, 17_982] {
        for (m, mp) in [(0.2, 0.06), (0.35, 0.1), (0.0, 0.02)] {
            ensure(averaged_margin(m, mp, 0, c).map_err(err)? == m, || format!("k=0 endpoint at C={c}"))?;
            ensure(averaged_margin(m, mp, c - 1, c).map_err(err)? == m + mp, || {
                format!("k=C-1 endpoint at C={c}")
            })?;
        }
    }
    Ok(format!(
        "2000 instances: forms {d_forms:.1e} (tol 1e-10), k=0 {d_k0:.1e} (tol 1e-12), k=C-1 {d_full:.1e} (tol 1e-10), averaged-margin endpoints exact"
    ))
}

fn structure_configs() -> Vec<PoolingConfig> {
    vec![
        PoolingConfig::sa(8, 6),
        PoolingConfig::mha(8, 4),
        PoolingConfig::attentive(8, 3, 6),
        PoolingConfig::vector_attentive(8, 3, 6),
        PoolingConfig::new(32, 16, 4, 1),
        PoolingConfig::new(32, 16, 4, 2).with_hidden(8).with_weight_mode(WeightMode::Unique),
    ]
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn pooling_structure() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut d_red, mut d_perm, mut d_sum) = (0.0f64, 0.0f64, 0.0f64);
    for config in structure_configs() {
        for _ in 0..50 {
            let t = rng.random_range(1..=12);
            let o = Tensor::uniform(&[t, config.channels], 3.0, &mut rng);
            let params = init_pooling_params(&config, rng.random()).map_err(err)?;

            let zero = PoolingParams::zeros(&config).map_err(err)?;
            let pooled = mqmha_forward(&o, &zero, &config).map_err(err)?.value;
            let stats = statistics_pool(&o, config.epsilon).map_err(err)?.value;
            let (d, dh) = (config.channels, config.head_dim());
            let mut tiled = Vec::new();
            for offset in [0, d] {
                for h in 0..config.heads {
                    for _ in 0..config.queries {
                        tiled.extend_from_slice(&stats.data()[offset + h * dh..offset + (h + 1) * dh]);
                    }
                }
            }
            d_red = d_red.max(max_diff(pooled.data(), &tiled));

            let mut order: Vec<usize> = (0..t).collect();
            for i in (1..t).rev() {
                order.swap(i, rng.random_range(0..=i));
            }
            let rows: Vec<Vec<f64>> = order.iter().map(|&i| o.row(i).to_vec()).collect();
            let permuted = Tensor::from_rows(&rows).map_err(err)?;
            let a = mqmha_forward(&o, &params, &config).map_err(err)?.value;
            let b = mqmha_forward(&permuted, &params, &config).map_err(err)?.value;
            d_perm = d_perm.max(max_diff(a.data(), b.data()));

            let w = attention_weights(&o, &params, &config).map_err(err)?;
            let slice = config.heads * config.queries * config.weight_width();
            for col in 0..slice {
                let total: f64 = (0..t).map(|ti| w.data()[ti * slice + col]).sum();
                d_sum = d_sum.max((total - 1.0).abs());
            }
        }
    }
    ensure(d_red <= 1e-12, || format!("reduction deviation {d_red:e}"))?;
    ensure(d_perm <= 1e-12, || format!("permutation deviation {d_perm:e}"))?;
    ensure(d_sum <= 1e-12, || format!("weight-sum deviation {d_sum:e}"))?;

    let config = ExperimentConfig::default();
    let spec = SweepSpec::pooling_axis(&config);
    let mut grid = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for point in &spec.points {
        if let PoolingChoice::Mqmha(p) = &point.pooling {
            let params = init_pooling_params(p, 0).map_err(err)?;
            let o = Tensor::uniform(&[7, p.channels], 1.0, &mut rng);
            let len = mqmha_forward(&o, &params, p).map_err(err)?.value.len();
            ensure(len == 2 * p.channels * p.queries, || format!("{}: output length {len}", point.label))?;
            grid += 1;
        }
    }
    Ok(format!(
        "reduction {d_red:.1e}, permutation {d_perm:.1e}, weight sums {d_sum:.1e} (tol 1e-12); output length 2dQ on {grid} grid points"
    ))
}

fn brute_force(scores: &[f64], labels: &[bool]) -> ((f64, f64), [f64; 2]) {
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let n_tgt = labels.iter().filter(|&&l| l).count() as f64;
    let n_non = labels.len() as f64 - n_tgt;
    let mut best_gap = f64::INFINITY;
    let mut eer = (0.0, 0.0);
    let mut dcf = [f64::INFINITY; 2];
    for &t in &thresholds {
        let miss = scores.iter().zip(labels).filter(|&(&s, &l)| l && s < t).count() as f64 / n_tgt;
        let fa = scores.iter().zip(labels).filter(|&(&s, &l)| !l && s >= t).count() as f64 / n_non;
        if (miss - fa).abs() < best_gap {
            best_gap = (miss - fa).abs();
            eer = ((miss + fa) / 2.0, t);
        }
        for (slot, p) in dcf.iter_mut().zip(P_TARGETS) {
            *slot = slot.min(miss * p + fa * (1.0 - p));
        }
    }
    for (slot, p) in dcf.iter_mut().zip(P_TARGETS) {
        *slot /= p.min(1.0 - p);
    }
    (eer, dcf)
}

fn metrics_oracle() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut trials = 0;
    for set in 0..100 {
        let n = rng.random_range(2..=1000);
        let coarse = set % 3 == 0;
        let scores: Vec<f64> = (0..n)
            .map(|_| {
                let s: f64 = rng.random_range(-1.0..1.0);
                if coarse { (s * 8.0).round() / 8.0 } else { s }
            })
            .collect();
        let mut labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
        labels[0] = true;
        labels[1] = false;
        trials += n;
        let (eer, dcf) = brute_force(&scores, &labels);
        let got = compute_eer(&scores, &labels).map_err(err)?;
        ensure(got == eer, || format!("set {set}: eer {got:?} vs {eer:?}"))?;
        for (i, p) in P_TARGETS.into_iter().enumerate() {
            let got = compute_min_dcf(&scores, &labels, p, 1.0, 1.0).map_err(err)?;
            ensure(got == dcf[i], || format!("set {set}: minDCF({p}) {got} vs {}", dcf[i]))?;
        }
        let transforms: [fn(f64) -> f64; 3] = [|s| (4.0 * s).exp(), |s| s * s * s + s, |s| 1.0 / (1.0 + (-6.0 * s).exp())];
        for f in transforms {
            let warped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            let mut sorted: Vec<f64> = scores.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            if sorted.windows(2).any(|w| f(w[0]) >= f(w[1])) {
                continue;
            }
            ensure(compute_eer(&warped, &labels).map_err(err)?.0 == eer.0, || format!("set {set}: EER moved"))?;
            for (i, p) in P_TARGETS.into_iter().enumerate() {
                let got = compute_min_dcf(&warped, &labels, p, 1.0, 1.0).map_err(err)?;
                ensure(got == dcf[i], || format!("set {set}: minDCF({p}) moved"))?;
            }
        }
    }
    Ok(format!("100 trial sets ({trials} trials) equal exhaustive enumeration exactly; invariant under 3 increasing transforms"))
}

fn desk_run() -> Result<String, String> {
    let start = Instant::now();
    let config = ExperimentConfig::default();
    ensure(config.data.num_speakers == 20, || "acceptance dataset must have 20 speakers".into())?;
    let ratio = config.data.noise_scale / config.data.center_scale;
    let dataset = generate_dataset(&config.data).map_err(err)?;
    let oracle = nearest_centroid_accuracy(&dataset);
    ensure(oracle > 0.95, || format!("nearest-centroid accuracy {oracle}"))?;
    ensure(config.train.max_steps == 2000, || "acceptance run must be 2000 steps".into())?;
    let run = || train(&dataset, &config.encoder, &config.pooling, &config.loss, &config.train).map_err(err);
    let first = run()?;
    let initial = first.trace.initial().ok_or("empty trace")?;
    let last = first.trace.final_mean(50).ok_or("empty trace")?;
    ensure(last < 0.5 * initial, || format!("final loss {last} vs initial {initial}"))?;
    let report = evaluate(&first.model, &dataset, &dataset.trials).map_err(err)?;
    ensure(report.eer <= 0.10, || format!("held-out EER {}", report.eer))?;
    let second = run()?;
    ensure(second.trace == first.trace, || "rerun loss trace differs".into())?;
    ensure(
        second.model.flat_params().data() == first.model.flat_params().data(),
        || "rerun parameters differ".into(),
    )?;
    let again = evaluate(&second.model, &dataset, &dataset.trials).map_err(err)?;
    ensure(again == report, || "rerun report differs".into())?;
    let elapsed = start.elapsed();
    ensure(elapsed <= Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "noise/center {ratio}, centroid oracle {:.1}%, loss {initial:.3} -> {last:.2e}, EER {:.2}%, rerun bit-identical, {:.1}s",
        100.0 * oracle,
        100.0 * report.eer,
        elapsed.as_secs_f64()
    ))
}

const TABLE2_ROWS: [&str; 15] = [
    "no attention (baseline)",
    "q=1, h=1, n=1, d_s=1",
    "q=1, h=2, n=1, d_s=1",
    "q=1, h=4, n=1, d_s=1",
    "q=1, h=8, n=1, d_s=1",
    "q=1, h=16, n=1, d_s=1",
    "q=1, h=32, n=1, d_s=1",
    "q=2, h=1, n=1, d_s=1",
    "q=4, h=1, n=1, d_s=1",
    "q=8, h=1, n=1, d_s=1",
    "q=2, h=16, n=1, d_s=1",
    "q=4, h=16, n=1, d_s=1",
    "q=8, h=16, n=1, d_s=1",
    "q=4, h=16, n=2, d_s=1",
    "q=4, h=16, n=2, d_s=d_h",
];

const TABLE3_ROWS: [&str; 12] = [
    "m=0.20, m'=0.00 (baseline)",
    "m=0.22, m'=0.00",
    "m=0.24, m'=0.00",
    "m=0.26, m'=0.00",
    "m=0.20, m'=0.02 & k_top=5",
    "m=0.20, m'=0.04 & k_top=5",
    "m=0.20, m'=0.06 & k_top=5",
    "m=0.20, m'=0.08 & k_top=5",
    "m=0.20, m'=0.06 & k_top=1",
    "m=0.20, m'=0.06 & k_top=2",
    "m=0.20, m'=0.06 & k_top=5",
    "m=0.20, m'=0.06 & k_top=10",
];

fn ablation_sweep() -> Result<String, String> {
    let start = Instant::now();
    let config = ExperimentConfig::default();
    let dataset = generate_dataset(&SyntheticSpeakerSpec {
        noise_scale: config.sweep.noise_scale,
        ..config.data.clone()
    })
    .map_err(err)?;
    let tmp = tempfile::tempdir().map_err(err)?;
    let mut tables = String::new();
    for (spec, expected) in [
        (SweepSpec::pooling_axis(&config), &TABLE2_ROWS[..]),
        (SweepSpec::loss_axis(&config), &TABLE3_ROWS[..]),
    ] {
        let dir = tmp.path().join(spec.axis.name());
        let report = run_sweep(&spec, &config, &dataset, &dir, true).map_err(err)?;
        let labels: Vec<&str> = report.rows.iter().map(|r| r.config.as_str()).collect();
        ensure(labels == expected, || format!("{} rows: {labels:?}", spec.axis.name()))?;
        let text = mqmha_cli::emit_report(&report, &dir.join("report.json")).map_err(err)?;
        for col in ["Configures", "EER(%)", "DCF0.01", "DCF0.05"] {
            ensure(text.contains(col), || format!("missing column {col}"))?;
        }
        ensure(text.matches(" *").count() == 1, || "best row not marked exactly once".into())?;
        ensure(text.contains("not claimed to match"), || "ordering disclaimer missing".into())?;
        let back = Report::read(&dir.join("report.json")).map_err(err)?;
        ensure(back.render() == text, || "JSON re-render differs".into())?;
        ensure(report.rows.iter().all(|r| r.eer_percent.is_finite()), || "non-finite EER".into())?;
        tables.push_str(&text);
        tables.push('\n');
    }
    let steps = sweep_train_config(&config).max_steps;
    Ok(format!(
        "15-row pooling table and 12-row loss table, {steps} steps per run, {:.1}s\n\n{tables}",
        start.elapsed().as_secs_f64()
    ))
}

fn main() {
    let criteria: [(&str, Check); 6] = [
        ("gradient suite", gradient_suite),
        ("algebraic identities", algebraic_identities),
        ("pooling structure", pooling_structure),
        ("metrics oracle", metrics_oracle),
        ("end-to-end desk run", desk_run),
        ("ablation harness", ablation_sweep),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        match check() {
            Ok(detail) => println!("criterion {} ({name}): PASS: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {} ({name}): FAIL: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

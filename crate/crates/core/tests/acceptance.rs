//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails.

use std::path::Path;
use std::time::Instant;

use mugs::audit::{run_equation_oracles, run_gradient_audit, run_structure_oracles, SuiteReport};
use mugs::config::TrainConfig;
use mugs::data::synth::{hierarchy, synth_hierarchical_dataset, SynthSpec};
use mugs::eval::{extract_features, knn_classify, KNN_KS, KNN_TAU};
use mugs::metrics::{read_metrics, StepMetrics, METRICS_HEADER};
use mugs::train::{checkpoint_path, pretrain_run};

const SEED: u64 = 0;

struct Line {
    name: &'static str,
    passed: bool,
    detail: String,
}

impl Line {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Line { name, passed, detail }
    }
}

fn failed_cases(r: &SuiteReport) -> String {
    let bad: Vec<String> = r
        .cases
        .iter()
        .filter(|c| !c.passed)
        .map(|c| format!("{} ({:.3e} > {:.1e})", c.name, c.max_err, c.tolerance))
        .collect();
    if bad.is_empty() {
        "none failed".into()
    } else {
        format!("failed: {}", bad.join(", "))
    }
}

fn worst(r: &SuiteReport) -> String {
    r.cases
        .iter()
        .map(|c| format!("{}={:.2e}", c.name, c.max_err))
        .collect::<Vec<_>>()
        .join(" ")
}

fn equations() -> Line {
    match run_equation_oracles(SEED) {
        Ok(r) => Line::new(
            "equation oracle parity (tol 1e-5, 100 instances each, < 60 s)",
            r.passed && r.seconds < 60.0,
            format!("{:.1}s, {}; {}", r.seconds, failed_cases(&r), worst(&r)),
        ),
        Err(e) => Line::new("equation oracle parity", false, e.to_string()),
    }
}

fn gradients() -> Line {
    match run_gradient_audit(SEED) {
        Ok(r) => {
            let op_worst = r.cases.iter().filter(|c| c.name.starts_with("op_")).map(|c| c.max_err).fold(0.0, f64::max);
            let e2e = r.case("end_to_end_total_loss").map_or(f64::NAN, |c| c.max_err);
            Line::new(
                "gradient audit (per-op rel < 1e-2, end-to-end rel < 5e-2, zero teacher/buffer grads, < 120 s)",
                r.passed && r.seconds < 120.0,
                format!("{:.1}s, worst op {op_worst:.2e}, end-to-end {e2e:.2e}, {}", r.seconds, failed_cases(&r)),
            )
        }
        Err(e) => Line::new("gradient audit", false, e.to_string()),
    }
}

fn mechanics(r: &SuiteReport) -> Line {
    let names = ["fifo_replay", "topk_bruteforce", "crop_pair_enumeration", "ema_contraction", "center_closed_form"];
    let cases: Vec<_> = names.iter().map(|n| r.case(n)).collect();
    let passed = cases.iter().all(|c| c.is_some_and(|c| c.passed));
    let detail = cases
        .iter()
        .zip(names)
        .map(|(c, n)| format!("{n}={}", c.map_or("missing".into(), |c| format!("{:.1e}", c.max_err))))
        .collect::<Vec<_>>()
        .join(" ");
    Line::new("mechanics parity (FIFO, top-k x1000, 22/2 crop terms, EMA law, centre, <= 1e-6)", passed, detail)
}

fn bits(rows: &[StepMetrics]) -> Vec<[u32; 4]> {
    rows.iter()
        .map(|m| {
            [
                (m.loss_total as f32).to_bits(),
                m.loss_instance.to_bits(),
                m.loss_local_group.to_bits(),
                m.loss_group.to_bits(),
            ]
        })
        .collect()
}

fn resume_matches(root: &Path) -> mugs::Result<(bool, String)> {
    let data = root.join("resume_data");
    synth_hierarchical_dataset(SynthSpec::new(SEED, 2)).save(&data)?;
    let cfg = TrainConfig {
        data: data.display().to_string(),
        out_dir: root.join("resume_full").display().to_string(),
        epochs: 4,
        checkpoint_every: 2,
        drop_path_rate: 0.1,
        ..TrainConfig::micro()
    };
    let full = pretrain_run(&cfg, None, |_, _| {})?;
    let mid = checkpoint_path(Path::new(&cfg.out_dir), Some(2));
    let resumed_cfg = TrainConfig { out_dir: root.join("resume_half").display().to_string(), ..cfg.clone() };
    let resumed = pretrain_run(&resumed_cfg, Some(&mid), |_, _| {})?;
    let first = resumed.metrics.first().map_or(0, |m| m.step) as usize;
    let tail = &full.metrics[first..];
    let same_rows = first > 0 && bits(tail) == bits(&resumed.metrics);
    let same_weights = full.trainer.pair.student.digest() == resumed.trainer.pair.student.digest()
        && full.trainer.pair.teacher.digest() == resumed.trainer.pair.teacher.digest();
    Ok((
        same_rows && same_weights,
        format!(
            "resumed at step {first} of {}, {} rows bitwise {}, final weights {}",
            full.metrics.len(),
            resumed.metrics.len(),
            if same_rows { "equal" } else { "DIFFER" },
            if same_weights { "equal" } else { "DIFFER" }
        ),
    ))
}

fn determinism(r: &SuiteReport, root: &Path) -> Line {
    let replay = r.case("seed_replay_10_steps").is_some_and(|c| c.passed);
    let (resume, detail) = resume_matches(root).unwrap_or_else(|e| (false, e.to_string()));
    Line::new(
        "determinism and persistence (10-step replay bitwise, mid-run resume exact)",
        replay && resume,
        format!("replay {}, {detail}", if replay { "bitwise" } else { "DIFFERS" }),
    )
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

struct DeskRun {
    optimization: Line,
    representation: Line,
}

fn desk_run(root: &Path) -> mugs::Result<DeskRun> {
    let train_spec = SynthSpec::new(SEED, 32);
    let train = synth_hierarchical_dataset(train_spec);
    let test = synth_hierarchical_dataset(SynthSpec::new(SEED + 1, 32));
    let data = root.join("desk_data");
    train.save(&data)?;
    let cfg = TrainConfig {
        data: data.display().to_string(),
        out_dir: root.join("desk_run").display().to_string(),
        checkpoint_every: 0,
        normalize_prototypes: true,
        buffer_capacity: 256,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = pretrain_run(&cfg, None, |e, rows| {
        if (e + 1) % 10 == 0 {
            let l = rows.last().map_or(f64::NAN, |m| m.loss_total);
            eprintln!("  desk run epoch {} loss {l:.4} ({:.0}s)", e + 1, start.elapsed().as_secs_f64());
        }
    })?;
    let seconds = start.elapsed().as_secs_f64();
    let rows = &out.metrics;
    let n = (rows.len() / 10).max(1);
    let first = mean(rows[..n].iter().map(|m| m.loss_total));
    let last = mean(rows[rows.len() - n..].iter().map(|m| m.loss_total));
    let finite = rows.iter().all(|m| {
        m.loss_total.is_finite() && m.loss_instance.is_finite() && m.loss_local_group.is_finite() && m.loss_group.is_finite()
    });
    let optimization = Line::new(
        "desk-scale optimization (256 images, 50 epochs, unit-norm prototypes, 256-row buffers: last-10% mean < first-10% mean, finite, < 30 min)",
        last < first && finite && seconds < 1800.0 && cfg.epochs == 50 && train.len() == 256,
        format!("{} steps in {seconds:.0}s, first {first:.4}, last {last:.4}, finite {finite}", rows.len()),
    );

    let pair = &out.trainer.pair;
    let norm = &out.trainer.norm;
    let tr = extract_features(pair, &train, norm, false)?;
    let te = extract_features(pair, &test, norm, false)?;
    let fine = knn_classify(&tr, &te, &KNN_KS, KNN_TAU)?;
    let coarse_of = |l: &usize| hierarchy(&train_spec, *l).0;
    let ctr = tr.relabel(tr.labels.iter().map(coarse_of).collect())?;
    let cte = te.relabel(te.labels.iter().map(coarse_of).collect())?;
    let coarse = knn_classify(&ctr, &cte, &KNN_KS, KNN_TAU)?;
    let coarse_at_best = coarse.per_k.iter().find(|(k, _)| *k == fine.best_k).map_or(0.0, |x| x.1);
    let fmt = |r: &[(usize, f32)]| r.iter().map(|(k, a)| format!("{k}:{:.1}%", 100.0 * a)).collect::<Vec<_>>().join(" ");
    let representation = Line::new(
        "desk-scale representation (teacher kNN fine > 37.5%, coarse > 90%)",
        fine.best > 0.375 && coarse_at_best > 0.9,
        format!("fine {} | coarse {} | best k {}", fmt(&fine.per_k), fmt(&coarse.per_k), fine.best_k),
    );
    Ok(DeskRun { optimization, representation })
}

fn ablations(root: &Path) -> Line {
    let run = || -> mugs::Result<(bool, String)> {
        let data = root.join("desk_data");
        let variants = [("no_instance", [0.0, 0.5, 0.5]), ("no_local_group", [0.5, 0.0, 0.5]), ("no_group", [0.5, 0.5, 0.0])];
        let mut tables = Vec::new();
        for (name, l) in variants {
            let cfg = TrainConfig {
                data: data.display().to_string(),
                out_dir: root.join(name).display().to_string(),
                epochs: 3,
                warmup_epochs: 1,
                checkpoint_every: 0,
                lambda_instance: l[0],
                lambda_local_group: l[1],
                lambda_group: l[2],
                ..TrainConfig::default()
            };
            let out = pretrain_run(&cfg, None, |_, _| {})?;
            let header = std::fs::read_to_string(&out.metrics_path)
                .map_err(|e| mugs::Error::Io { path: out.metrics_path.clone(), source: e })?
                .lines()
                .next()
                .unwrap_or_default()
                .to_string();
            let rows = read_metrics(&out.metrics_path)?;
            let sums = rows.iter().all(|m| {
                let s = l[0] * m.loss_instance + l[1] * m.loss_local_group + l[2] * m.loss_group;
                (s as f64 - m.loss_total).abs() <= 1e-5 * m.loss_total.abs().max(1.0)
            });
            tables.push((name, header, rows, sums));
        }
        let (_, h0, r0, _) = &tables[0];
        let comparable = tables.iter().all(|(_, h, r, sums)| {
            *sums
                && *h == METRICS_HEADER.join(",")
                && h == h0
                && r.len() == r0.len()
                && r.iter().zip(r0).all(|(a, b)| a.step == b.step && a.epoch == b.epoch && a.lr == b.lr && a.tau_g == b.tau_g)
        });
        let detail = tables
            .iter()
            .map(|(n, _, r, _)| format!("{n}: {} rows, final {:.4}", r.len(), r.last().map_or(f64::NAN, |m| m.loss_total)))
            .collect::<Vec<_>>()
            .join("; ");
        Ok((comparable, detail))
    };
    let (passed, detail) = run().unwrap_or_else(|e| (false, e.to_string()));
    Line::new("ablation switches (three single-supervision-removed runs, identical seeds, comparable metrics)", passed, detail)
}

fn main() {
    let root = tempfile::tempdir().expect("temp dir");
    let mut lines = vec![equations(), gradients()];
    match run_structure_oracles(SEED) {
        Ok(r) => {
            lines.push(mechanics(&r));
            lines.push(determinism(&r, root.path()));
        }
        Err(e) => {
            lines.push(Line::new("mechanics parity", false, e.to_string()));
            lines.push(Line::new("determinism and persistence", false, e.to_string()));
        }
    }
    match desk_run(root.path()) {
        Ok(d) => {
            lines.push(d.optimization);
            lines.push(d.representation);
        }
        Err(e) => {
            lines.push(Line::new("desk-scale optimization", false, e.to_string()));
            lines.push(Line::new("desk-scale representation", false, e.to_string()));
        }
    }
    lines.push(ablations(root.path()));

    let mut all = true;
    for l in &lines {
        all &= l.passed;
        println!("{} {}: {}", if l.passed { "PASS" } else { "FAIL" }, l.name, l.detail);
    }
    if !all {
        std::process::exit(1);
    }
}

//! Acceptance suite: one PASS/FAIL/SKIP line per criterion, nonzero exit if
//! any criterion fails. Runs the default synthetic experiment end to end.
//!
//! Set `CROWDTEMP_PUBLISHED_CONFIG` to a config whose corpus is the published
//! phone dataset to enable criterion 13.

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use crowdtemp::data::fit_normalizer;
use crowdtemp::estimator::{EncodedSet, EstimatorModel};
use crowdtemp::fedagg::{add_encrypted, decrypt, encrypt, keygen};
use crowdtemp::meta::maml_adapt;
use crowdtemp::nn::{gaussian_nll, gaussian_nll_grad, grad_check, Loss, Network};
use crowdtemp::rng::rng;
use crowdtemp::truthinf::{mean_infer, mv_infer, Method};
use crowdtemp_cli::stages::{
    load_corpus, run_fed, run_fewshot, run_gen_labels, run_report, run_synth, run_train_cbts,
    run_train_estimators, run_truthinf_bench, BenchSummary, EstimatorRow, FedSummary,
    FewshotSummary, LabelSummary,
};
use crowdtemp_cli::{Context, ExperimentConfig, Stage};
use rand::Rng;

enum Verdict {
    Pass(String),
    Fail(String),
    Skip(String),
}

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Verdict::Pass(detail)
    } else {
        Verdict::Fail(detail)
    }
}

struct Pipeline {
    ctx: Context,
    estimators: Vec<EstimatorRow>,
    bench: BenchSummary,
    labels: LabelSummary,
    fewshot: FewshotSummary,
    fed: FedSummary,
    cbts_time: Duration,
    fewshot_time: Duration,
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let t = Instant::now();
    let v = f();
    (v, t.elapsed())
}

fn run_pipeline(config: ExperimentConfig) -> Result<Pipeline, String> {
    let ctx = Context::new(config, false).map_err(|e| e.to_string())?;
    let e = |e: crowdtemp_cli::CliError| e.to_string();
    run_synth(&ctx).map_err(e)?;
    let estimators = run_train_estimators(&ctx).map_err(e)?;
    let (cbts, t_train) = timed(|| run_train_cbts(&ctx));
    cbts.map_err(e)?;
    let (bench, t_bench) = timed(|| run_truthinf_bench(&ctx));
    let bench = bench.map_err(e)?;
    let labels = run_gen_labels(&ctx).map_err(e)?;
    let (fewshot, fewshot_time) = timed(|| run_fewshot(&ctx));
    let fewshot = fewshot.map_err(e)?;
    let fed = run_fed(&ctx).map_err(e)?;
    run_report(&ctx).map_err(e)?;
    Ok(Pipeline {
        ctx,
        estimators,
        bench,
        labels,
        fewshot,
        fed,
        cbts_time: t_train + t_bench,
        fewshot_time,
    })
}

fn c1_gradients() -> Verdict {
    let t = Instant::now();
    let worst = |net: &Network| {
        (0..100u64)
            .map(|seed| {
                let mut r = rng(seed);
                let params = net.init_params(&mut r);
                let x: Vec<f64> = (0..net.input_dim())
                    .map(|_| r.random_range(-2.0..2.0))
                    .collect();
                let y = r.random_range(-2.0..2.0);
                grad_check(net, &params, &x, y, Loss::GaussianNll, 1e-6).expect("valid inputs")
            })
            .fold(0.0, f64::max)
    };
    let (est, agg) = (worst(&Network::estimator()), worst(&Network::aggregator()));
    let secs = t.elapsed().as_secs_f64();
    check(
        est < 1e-4 && agg < 1e-4 && secs < 60.0,
        format!("max rel err estimator {est:.2e}, aggregator {agg:.2e} (< 1e-4) over 100 seeds in {secs:.1} s (< 60 s)"),
    )
}

fn nll_oracle(mu: f64, sigma: f64, y: f64) -> f64 {
    0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln()
        + (y - mu).powi(2) / (2.0 * sigma * sigma)
}

fn c2_loss() -> Verdict {
    let mut r = rng(2);
    let (mut abs_err, mut rel_err) = (0.0_f64, 0.0_f64);
    let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
    for _ in 0..10_000 {
        let (m, s, y) = (
            r.random_range(-40.0..60.0),
            r.random_range(0.01..5.0),
            r.random_range(-40.0..60.0),
        );
        abs_err =
            abs_err.max((gaussian_nll(m, s, y).expect("sigma > 0") - nll_oracle(m, s, y)).abs());
        let (dm, ds) = gaussian_nll_grad(m, s, y).expect("sigma > 0");
        let h = 1e-6 * s;
        let nm = (nll_oracle(m + h, s, y) - nll_oracle(m - h, s, y)) / (2.0 * h);
        let ns = (nll_oracle(m, s + h, y) - nll_oracle(m, s - h, y)) / (2.0 * h);
        rel_err = rel_err.max(rel(dm, nm)).max(rel(ds, ns));
    }
    check(
        abs_err <= 1e-9 && rel_err <= 1e-5,
        format!("10k triples: closed-form abs err {abs_err:.1e} (<= 1e-9), gradient rel err {rel_err:.1e} (<= 1e-5)"),
    )
}

fn c3_homomorphic() -> Verdict {
    let t = Instant::now();
    let keys = keygen(1024, 3).expect("supported size");
    let mut r = rng(3);
    let grads: Vec<Vec<f64>> = (0..100)
        .map(|_| (0..1000).map(|_| r.random_range(-1.0..1.0)).collect())
        .collect();
    let mut acc = encrypt(&keys.public, &grads[0], 40, &mut r).expect("in range");
    for g in &grads[1..] {
        let c = encrypt(&keys.public, g, 40, &mut r).expect("in range");
        acc = add_encrypted(&keys.public, &acc, &c).expect("same key");
    }
    let sum = decrypt(&keys.private, &acc).expect("own key");
    let err = (0..1000)
        .map(|j| (sum[j] - grads.iter().map(|g| g[j]).sum::<f64>()).abs())
        .fold(0.0, f64::max);
    let secs = t.elapsed().as_secs_f64();
    check(
        err <= 1e-6 && secs < 120.0,
        format!("100 clients x 1000 dims at 1024 bits: max abs err {err:.2e} (<= 1e-6) in {secs:.1} s (< 120 s)"),
    )
}

fn c4_federated(p: &Pipeline) -> Verdict {
    let worst = p
        .fed
        .rounds
        .iter()
        .map(|r| r.max_diff_vs_central)
        .fold(0.0, f64::max);
    let once = p
        .fed
        .rounds
        .iter()
        .enumerate()
        .all(|(i, r)| r.decryptions == i as u64 + 1);
    check(
        worst <= 1e-5 && once && !p.fed.rounds.is_empty(),
        format!(
            "{} sgd rounds, {} disjoint clients: max |fed - central| {worst:.1e} (<= 1e-5), one decryption per round: {once}",
            p.fed.rounds.len(),
            p.fed.rounds.first().map_or(0, |r| r.clients.len())
        ),
    )
}

fn c5_truthinf(p: &Pipeline) -> Verdict {
    let m = |k| p.bench.mae(k, None);
    let (cbts, mean, wa) = (m(Method::Cbts), m(Method::Mean), m(Method::Wa));
    let n = p.bench.result.sizes.len();
    let secs = p.cbts_time.as_secs_f64();
    check(
        n == 6000 && cbts <= 0.85 * mean && cbts <= wa && secs < 600.0,
        format!("{n} groups: CBTS {cbts:.3} <= 0.85 x Mean {mean:.3} = {:.3}, <= WA {wa:.3}; train+bench {secs:.1} s (< 600 s)", 0.85 * mean),
    )
}

fn sse(xs: &[f64]) -> f64 {
    let m = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - m).powi(2)).sum()
}

/// Every assignment of values to `k` non-empty clusters, then the largest,
/// tightest, coldest cluster's mean.
fn mv_oracle(xs: &[f64], k: usize) -> f64 {
    if xs.len() < k {
        return xs.iter().sum::<f64>() / xs.len() as f64;
    }
    let mut best: Option<(f64, Vec<Vec<f64>>)> = None;
    for code in 0..k.pow(xs.len() as u32) {
        let mut blocks = vec![Vec::new(); k];
        let mut c = code;
        for &x in xs {
            blocks[c % k].push(x);
            c /= k;
        }
        if blocks.iter().any(Vec::is_empty) {
            continue;
        }
        let cost: f64 = blocks.iter().map(|b| sse(b)).sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, blocks));
        }
    }
    let mut blocks = best.expect("n >= k").1;
    for b in &mut blocks {
        b.sort_by(f64::total_cmp);
    }
    let mean = |b: &Vec<f64>| b.iter().sum::<f64>() / b.len() as f64;
    let pick = blocks
        .iter()
        .min_by(|a, b| {
            b.len()
                .cmp(&a.len())
                .then((sse(a) / a.len() as f64).total_cmp(&(sse(b) / b.len() as f64)))
                .then(mean(a).total_cmp(&mean(b)))
        })
        .expect("k >= 1");
    mean(pick)
}

fn c6_mv() -> Verdict {
    let mut r = rng(6);
    let (mut agree, mut fallback_ok, mut fallbacks) = (0, true, 0);
    for _ in 0..1000 {
        let size = r.random_range(1..=6);
        let g: Vec<f64> = (0..size).map(|_| r.random_range(10.0..35.0)).collect();
        if [2, 3]
            .iter()
            .all(|&k| mv_infer(&g, k).expect("non-empty") == mv_oracle(&g, k))
        {
            agree += 1;
        }
        if size < 3 {
            fallbacks += 1;
            fallback_ok &=
                mv_infer(&g, 3).expect("non-empty") == mean_infer(&g).expect("non-empty");
        }
    }
    check(
        agree == 1000 && fallback_ok,
        format!("exact agreement with partition oracle on {agree}/1000 groups (k = 2, 3); mean fallback on {fallbacks} small groups: {fallback_ok}"),
    )
}

fn c7_fewshot(p: &Pipeline) -> Verdict {
    let f = &p.fewshot;
    let mut bad = Vec::new();
    for r in &f.rows {
        for l in ["TL", "IL"] {
            let g = |s: &str| {
                f.get(&r.participant, &format!("{s}-{l}"))
                    .expect("strategy column")
            };
            if !(g("MAML") < g("PT") && g("PT") < g("DT")) {
                bad.push(format!("{}/{l}", r.participant));
            }
        }
    }
    let g = |s| f.get("all", s).expect("all row");
    let (maml, pt, dt) = (g("MAML-TL"), g("PT-TL"), g("DT-TL"));
    let secs = p.fewshot_time.as_secs_f64();
    check(
        bad.is_empty() && maml <= 0.8 * pt && secs < 1800.0,
        format!(
            "MAML < PT < DT for every participant (TL and IL){}; overall MAML {maml:.3} <= 0.8 x PT {pt:.3} = {:.3} (DT {dt:.3}); {secs:.0} s (< 1800 s)",
            if bad.is_empty() { String::new() } else { format!(", violated by {bad:?}") },
            0.8 * pt
        ),
    )
}

fn c8_inferred_labels(p: &Pipeline) -> Verdict {
    let f = &p.fewshot;
    let worst = f
        .rows
        .iter()
        .map(|r| {
            let tl = f.get(&r.participant, "MAML-TL").expect("column");
            let il = f.get(&r.participant, "MAML-IL").expect("column");
            ((il - tl).abs() / tl, r.participant.clone())
        })
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .expect("rows");
    let (tl, il) = (
        f.get("all", "MAML-TL").expect("all"),
        f.get("all", "MAML-IL").expect("all"),
    );
    check(
        worst.0 <= 0.15,
        format!(
            "overall MAML-IL {il:.3} vs MAML-TL {tl:.3}; worst relative gap {:.1}% ({}) (<= 15%)",
            100.0 * worst.0,
            worst.1
        ),
    )
}

fn c9_label_quality(p: &Pipeline) -> Verdict {
    let labels = p.labels.overall_mae;
    let cbts = p.bench.mae(Method::Cbts, None);
    check(
        labels <= 1.25 * cbts,
        format!(
            "inferred-label MAE {labels:.3} <= 1.25 x CBTS {cbts:.3} = {:.3}",
            1.25 * cbts
        ),
    )
}

fn c10_uncertainty(p: &Pipeline) -> Verdict {
    let worst = p
        .estimators
        .iter()
        .min_by(|a, b| a.sigma_bias_rho.total_cmp(&b.sigma_bias_rho))
        .expect("estimators");
    check(
        p.estimators.iter().all(|e| e.sigma_bias_rho > 0.2),
        format!(
            "{} estimators; lowest Spearman(sigma, |bias|) {:.3} ({}) (> 0.2)",
            p.estimators.len(),
            worst.sigma_bias_rho,
            worst.phone
        ),
    )
}

fn c11_latency(p: &Pipeline) -> Verdict {
    let ctx = &p.ctx;
    let source = EstimatorModel::load(ctx.path("models/source_maml.json"))
        .expect("fewshot wrote the source model");
    let phones = load_corpus(ctx, Stage::Fewshot).expect("corpus written");
    let part = phones
        .iter()
        .find(|p| p.role() == crowdtemp::data::Role::Participant)
        .expect("a participant");
    let norm = fit_normalizer([&part.train]).expect("enough samples");
    let support = EncodedSet::new(&part.train.samples[..5], &norm);
    let alpha = ctx.config.fewshot.meta.alpha;
    let mut slowest = Duration::ZERO;
    for _ in 0..20 {
        let (r, t) = timed(|| maml_adapt(&source.params, &support, alpha, 20));
        r.expect("adaptation succeeds");
        slowest = slowest.max(t);
    }
    check(
        slowest.as_secs_f64() < 0.1,
        format!(
            "5 samples x 20 steps: slowest of 20 runs {:.2} ms (< 100 ms)",
            slowest.as_secs_f64() * 1e3
        ),
    )
}

fn csv_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).expect("readable output dir") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "jsonl") {
                out.push(p.strip_prefix(root).expect("under root").to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c12_determinism() -> Verdict {
    let dir = tempfile::tempdir().expect("temp dir");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml");
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for stage in Stage::ALL {
            let o = Command::new(env!("CARGO_BIN_EXE_crowdtemp"))
                .args(["--deterministic", "--config"])
                .arg(&config)
                .arg("--out")
                .arg(&out)
                .arg(stage.name())
                .output()
                .expect("binary runs");
            if !o.status.success() {
                return Verdict::Fail(format!(
                    "run {run} stage {stage}: {}",
                    String::from_utf8_lossy(&o.stderr).trim()
                ));
            }
        }
    }
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let files = csv_files(&a);
    if files != csv_files(&b) {
        return Verdict::Fail("the two runs wrote different file sets".into());
    }
    let differing: Vec<_> = files
        .iter()
        .filter(|f| std::fs::read(a.join(f)).ok() != std::fs::read(b.join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    check(
        differing.is_empty() && !files.is_empty(),
        format!(
            "8 stages run twice with --deterministic: {} of {} CSV/JSONL payloads byte-identical{}",
            files.len() - differing.len(),
            files.len(),
            if differing.is_empty() {
                String::new()
            } else {
                format!(", differing: {differing:?}")
            }
        ),
    )
}

fn c13_published() -> Verdict {
    let Ok(path) = std::env::var("CROWDTEMP_PUBLISHED_CONFIG") else {
        return Verdict::Skip(
            "published corpus not available (set CROWDTEMP_PUBLISHED_CONFIG to enable)".into(),
        );
    };
    let config = match ExperimentConfig::load(Path::new(&path)) {
        Ok(c) => c,
        Err(e) => return Verdict::Fail(e.to_string()),
    };
    let p = match run_pipeline(config) {
        Ok(p) => p,
        Err(e) => return Verdict::Fail(e),
    };
    let avg = p.estimators.iter().map(|e| e.val_mae).sum::<f64>() / p.estimators.len() as f64;
    let cbts = p.bench.mae(Method::Cbts, None);
    let maml = p.fewshot.get("all", "MAML-TL").expect("all row");
    check(
        (avg - 0.276).abs() <= 0.08 && (cbts - 0.136).abs() <= 0.05 && (maml - 1.019).abs() <= 0.25,
        format!("contributor MAE {avg:.3} (0.276 +- 0.08), CBTS {cbts:.3} (0.136 +- 0.05), MAML-TL {maml:.3} (1.019 +- 0.25)"),
    )
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let config = ExperimentConfig {
        output_dir: dir.path().to_path_buf(),
        ..ExperimentConfig::default()
    };
    let (pipeline, t) = timed(|| run_pipeline(config));
    println!(
        "default synthetic experiment finished in {:.1} s",
        t.as_secs_f64()
    );
    let from_pipeline = |f: fn(&Pipeline) -> Verdict| match &pipeline {
        Ok(p) => f(p),
        Err(e) => Verdict::Fail(format!("pipeline failed: {e}")),
    };
    let results = [
        ("gradient correctness", c1_gradients()),
        ("loss correctness", c2_loss()),
        ("homomorphic aggregation", c3_homomorphic()),
        (
            "federated/centralized equivalence",
            from_pipeline(c4_federated),
        ),
        ("truth-inference ordering", from_pipeline(c5_truthinf)),
        ("MV oracle equivalence", c6_mv()),
        ("few-shot ordering", from_pipeline(c7_fewshot)),
        (
            "inferred-label training parity",
            from_pipeline(c8_inferred_labels),
        ),
        ("label quality", from_pipeline(c9_label_quality)),
        ("uncertainty usefulness", from_pipeline(c10_uncertainty)),
        ("adaptation latency", from_pipeline(c11_latency)),
        ("determinism", c12_determinism()),
        ("published corpus", c13_published()),
    ];
    let mut failed = 0;
    for (i, (name, v)) in results.iter().enumerate() {
        let (tag, detail) = match v {
            Verdict::Pass(d) => ("PASS", d),
            Verdict::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Verdict::Skip(d) => ("SKIP", d),
        };
        println!("criterion {:>2} {tag} {name}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

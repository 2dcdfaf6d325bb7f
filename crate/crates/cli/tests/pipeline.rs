use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use crowdtemp_cli::stages::{run_report, run_train_estimators, FED_TABLE, REPORT};
use crowdtemp_cli::table::Table;
use crowdtemp_cli::{run_stage, CliError, Context, ExperimentConfig, Stage};

fn quick_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml")
}

fn quick(out: &Path) -> Context {
    let mut c = ExperimentConfig::load(&quick_config_path()).unwrap();
    c.output_dir = out.to_path_buf();
    Context::new(c, true).unwrap()
}

fn run_all(ctx: &Context) {
    for s in Stage::ALL {
        run_stage(ctx, s).unwrap_or_else(|e| panic!("{e}"));
    }
}

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_crowdtemp"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn stage_without_inputs_names_the_missing_stage() {
    let dir = tempfile::tempdir().unwrap();
    let err = run_train_estimators(&quick(dir.path())).unwrap_err();
    assert!(
        matches!(
            err,
            CliError::MissingInput {
                stage: Stage::TrainEstimators,
                needs: Stage::Synth,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn report_is_idempotent_and_fails_cleanly_without_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = quick(dir.path());
    run_all(&ctx);
    let first = std::fs::read(ctx.path(REPORT)).unwrap();
    run_report(&ctx).unwrap();
    assert_eq!(std::fs::read(ctx.path(REPORT)).unwrap(), first);
    let text = String::from_utf8(first).unwrap();
    assert!(text.contains(ctx.checksum()));
    for heading in [
        "## Corpus",
        "## Truth inference",
        "## Few-shot",
        "## Federated",
    ] {
        assert!(text.contains(heading), "missing {heading}");
    }

    std::fs::remove_file(ctx.path(FED_TABLE)).unwrap();
    let err = run_report(&ctx).unwrap_err();
    assert!(
        matches!(
            err,
            CliError::MissingInput {
                stage: Stage::Report,
                needs: Stage::Fed,
                ..
            }
        ),
        "{err}"
    );
}

#[test]
fn tables_carry_checksum_and_stage_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = quick(dir.path());
    run_stage(&ctx, Stage::Synth).unwrap();
    let text = std::fs::read_to_string(ctx.path("tables/corpus.csv")).unwrap();
    let (meta, table) = Table::parse(&text).unwrap();
    assert_eq!(meta["config_checksum"], ctx.checksum());
    assert_eq!(meta["seed"], ctx.seed(Stage::Synth).to_string());
    assert_eq!(meta["stage"], "synth");
    let roles: Vec<&str> = table.rows.iter().map(|r| r[1].as_str()).collect();
    assert_eq!(
        roles,
        [
            "contributor",
            "contributor",
            "contributor",
            "participant",
            "participant"
        ]
    );
}

#[test]
fn binary_exits_nonzero_with_stage_message() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config_path();
    let out = dir.path().to_str().unwrap();
    let o = cli(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        out,
        "fewshot",
    ]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("stage `fewshot`") && err.contains("`synth`"),
        "{err}"
    );

    let o = cli(&["--config", "/nonexistent.toml", "synth"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("config"));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config_path();
    let mut corpora = Vec::new();
    for (sub, seed) in [("a", "1"), ("b", "2")] {
        let out = dir.path().join(sub);
        let o = cli(&[
            "--config",
            config.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            seed,
            "synth",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        corpora.push(std::fs::read_to_string(out.join("corpus/C1.csv")).unwrap());
    }
    assert_ne!(corpora[0], corpora[1]);
}

#[test]
fn show_config_round_trips() {
    let config = quick_config_path();
    let o = cli(&[
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "99",
        "show-config",
    ]);
    assert!(o.status.success());
    let shown = ExperimentConfig::from_toml(&String::from_utf8(o.stdout).unwrap()).unwrap();
    let mut expected = ExperimentConfig::load(&config).unwrap();
    expected.seed = 99;
    assert_eq!(shown, expected);
}

use std::path::{Path, PathBuf};
use std::process::Command;

use esma_cli::commands::{self, load_report, Context, LoadedReport, RunManifest, MANIFEST_FILE};
use esma_cli::plots::{emit_plots, PlotError, PlotSource};
use esma_cli::{exit, exit_code};

fn ctx(out: &Path, plots: Option<Vec<String>>) -> Context {
    Context {
        out: out.to_path_buf(),
        plots,
        seed: Some(3),
        ..Default::default()
    }
}

fn pngs(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .map(|r| r.map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "png")).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn toy_density_run_plots_and_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = commands::toy_density(&ctx(tmp.path(), Some(vec!["consistency".into()]))).unwrap();
    let manifest: RunManifest = serde_json::from_slice(&std::fs::read(dir.join(MANIFEST_FILE)).unwrap()).unwrap();
    assert_eq!(manifest.subcommand, "toy-density");
    assert_eq!(manifest.seed, 3);
    assert!(dir.ends_with(&manifest.run_id[..16]));
    let first = pngs(&dir.join("plots"));
    assert_eq!(first.len(), 4, "{first:?}");
    let bytes: Vec<Vec<u8>> = first.iter().map(|p| std::fs::read(p).unwrap()).collect();
    let report = std::fs::read(dir.join("report.json")).unwrap();

    // Second run reuses the finished report and redraws identical files.
    let again = commands::toy_density(&ctx(tmp.path(), Some(vec!["consistency".into()]))).unwrap();
    assert_eq!(again, dir);
    assert_eq!(std::fs::read(dir.join("report.json")).unwrap(), report);
    let second = pngs(&dir.join("plots"));
    assert_eq!(second, first);
    for (p, b) in second.iter().zip(&bytes) {
        assert_eq!(&std::fs::read(p).unwrap(), b);
    }

    // Standalone rendering from the saved report.
    let (loaded, _) = load_report(&dir.join("report.json")).unwrap();
    let LoadedReport::Toy(toy) = loaded else { panic!("expected a toy report") };
    let source = PlotSource::Toy(&toy);
    let none = tmp.path().join("none");
    assert!(emit_plots(&source, &[], &none, "abc").unwrap().is_empty());
    assert!(!none.exists());
    let grid = emit_plots(&source, &["grid".into()], &tmp.path().join("g"), "0123456789abcdef0123").unwrap();
    assert_eq!(grid.len(), 1);
    assert!(grid[0].file_name().unwrap().to_str().unwrap().starts_with("0123456789abcdef-"));
    match emit_plots(&source, &["scatter3d".into()], &none, "abc") {
        Err(e @ PlotError::UnknownKind { .. }) => {
            let msg = e.to_string();
            for k in ["consistency", "transfer", "erasure", "tampering", "density_shift", "psnr"] {
                assert!(msg.contains(k), "{msg}");
            }
        }
        other => panic!("expected unknown kind, got {other:?}"),
    }
    assert!(matches!(emit_plots(&source, &["erasure".into()], &none, "abc"), Err(PlotError::NoData { .. })));

    // A different seed lands in a different run directory.
    let other = commands::toy_density(&Context {
        seed: Some(4),
        ..ctx(tmp.path(), None)
    })
    .unwrap();
    assert_ne!(other, dir);
}

#[test]
fn make_pools_writes_the_text_container() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = commands::make_pools(&ctx(tmp.path(), None)).unwrap();
    let text = std::fs::read_to_string(dir.join("pools.txt")).unwrap();
    let pools = esma_core::watermark::pools_from_text(&text).unwrap();
    assert_eq!(pools.len(), 4);
    assert!(pools.iter().all(|p| p.message_length() == 30));
}

#[test]
fn exit_codes_are_distinct() {
    let core = |e: esma_core::error::Error| exit_code(&anyhow::Error::from(e));
    assert_eq!(core(esma_core::error::Error::MissingArtifact("x".into())), exit::MISSING_ARTIFACT);
    assert_eq!(core(esma_core::error::Error::Divergence { step: 1, loss: f64::NAN }), exit::NUMERIC);
    assert_eq!(core(esma_core::error::Error::InvalidArgument("x".into())), exit::CONFIG);
    let cfg = esma_cli::config::ConfigError::UnknownKeys(vec!["a".into()]);
    assert_eq!(exit_code(&anyhow::Error::from(cfg).context("loading")), exit::CONFIG);
    assert_eq!(exit_code(&anyhow::anyhow!("other")), exit::OTHER);
    let codes = [exit::OK, exit::OTHER, exit::CONFIG, exit::MISSING_ARTIFACT, exit::NUMERIC];
    let mut sorted = codes.to_vec();
    sorted.dedup();
    assert_eq!(sorted.len(), codes.len());
}

fn esma(args: &[&str], out: &Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_esma"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "error")
        .env_remove("ESMA_SEED")
        .env_remove("ESMA_CACHE_DIR")
        .status()
        .unwrap()
        .code()
        .unwrap()
}

#[test]
fn binary_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "protocol = \"exp1\"\nnonsense = true\n").unwrap();
    assert_eq!(esma(&["run", "--config", bad.to_str().unwrap()], tmp.path()), exit::CONFIG);
    let missing = tmp.path().join("nope.json");
    assert_eq!(esma(&["plots", "--report", missing.to_str().unwrap()], tmp.path()), exit::MISSING_ARTIFACT);
    let gen = tmp.path().join("no-generator");
    let tiny = tmp.path().join("tiny.toml");
    std::fs::write(&tiny, "[dataset]\nkind = \"prototype\"\ntrain_per_class = 2\nattack_per_class = 2\ntest_per_class = 1\n").unwrap();
    assert_eq!(
        esma(&["attack", "--config", tiny.to_str().unwrap(), "--generator", gen.to_str().unwrap()], tmp.path()),
        exit::MISSING_ARTIFACT
    );
    assert_eq!(esma(&["make-pools", "--seed", "5"], tmp.path()), exit::OK);
}

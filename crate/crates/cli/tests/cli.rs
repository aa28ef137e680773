use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = r#"
n_train = 160
n_val = 40
n_test = 40
image_size = 16
epochs = 2
jtt_id_epochs = 1
widths = [4, 8]
strides = [2, 1]
overlay_samples = 1
seeds = [3]
"#;

fn scgs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scgs"))
        .args(args)
        .env("SCGS_LOG", "warn")
        .env_remove("SCGS_ENDPOINT")
        .output()
        .expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn help_lists_subcommands_and_flags() {
    let top = scgs(&["--help"]);
    assert!(top.status.success());
    let t = text(&top);
    for sub in [
        "run", "gen-data", "train", "harvest", "cluster", "cam", "synth", "merge", "retrain", "eval", "report",
        "serve-stub",
    ] {
        assert!(t.contains(sub), "missing {sub}");
    }
    let t = text(&scgs(&["run", "--help"]));
    for flag in ["--config", "--out", "--seed", "--tau", "--cam", "--backend", "--endpoint", "--rounds"] {
        assert!(t.contains(flag), "missing {flag}");
    }
}

#[test]
fn cam_before_harvest_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    for stage in ["gen-data", "train"] {
        let o = scgs(&[stage, "--config", &cfg, "--out", out]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let o = scgs(&["cam", "--config", &cfg, "--out", out]);
    assert_eq!(o.status.code(), Some(3), "{}", text(&o));
    assert!(text(&o).contains("`harvest`"), "{}", text(&o));
}

#[test]
fn stagewise_matches_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let full = dir.path().join("full");
    let staged = dir.path().join("staged");
    let o = scgs(&["run", "--config", &cfg, "--out", full.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o));
    for stage in [
        "gen-data", "train", "harvest", "cluster", "cam", "synth", "merge", "retrain", "eval", "report",
    ] {
        let o = scgs(&[stage, "--config", &cfg, "--out", staged.to_str().unwrap()]);
        assert!(o.status.success(), "{stage}: {}", text(&o));
    }
    let a = scgs_core::pipeline::RunManifest::load(&full.join("run_manifest.json")).unwrap();
    let b = scgs_core::pipeline::RunManifest::load(&staged.join("run_manifest.json")).unwrap();
    assert_eq!(a.stages.keys().collect::<Vec<_>>(), b.stages.keys().collect::<Vec<_>>());
    for (k, ra) in &a.stages {
        assert_eq!(ra.artifacts, b.stages[k].artifacts, "{k}");
    }
    assert_eq!(
        std::fs::read(full.join("report.csv")).unwrap(),
        std::fs::read(staged.join("report.csv")).unwrap()
    );
    // the stored config is the file as written
    assert_eq!(std::fs::read_to_string(full.join("config.toml")).unwrap(), TINY);

    let again = scgs(&["run", "--out", full.to_str().unwrap()]);
    assert!(again.status.success(), "{}", text(&again));
    assert!(!String::from_utf8_lossy(&again.stdout).contains("ran "));
}

#[test]
fn bad_flag_values_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("r");
    let o = scgs(&["gen-data", "--out", out.to_str().unwrap(), "--tau", "1.5"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
    let o = scgs(&["gen-data", "--out", out.to_str().unwrap(), "--cam", "saliency"]);
    assert!(!o.status.success());
    let o = scgs(&["gen-data", "--out", out.to_str().unwrap(), "--backend", "remote"]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o));
}

//! Exit codes of the command-line tool.

use std::path::Path;
use std::process::Command;

const SECTIONS: &str = "[hand]\n[objects]\n[trajgen]\n[gf]\n[rl]\n[eval]\n[server]\n";

fn handgf(root: &Path, args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_handgf"))
        .args(args)
        .env("HANDGF_RUN_ROOT", root)
        .env("RUST_LOG", "error")
        .output()
        .unwrap()
}

fn code(out: &std::process::Output) -> i32 {
    out.status.code().expect("exit code")
}

#[test]
fn missing_or_invalid_config_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&handgf(dir.path(), &["synth-data"])), 2);
    let absent = dir.path().join("absent.toml");
    assert_eq!(
        code(&handgf(
            dir.path(),
            &["--config", absent.to_str().unwrap(), "synth-data"]
        )),
        2
    );

    let unknown = dir.path().join("unknown.toml");
    std::fs::write(&unknown, format!("{SECTIONS}[extra]\n")).unwrap();
    let out = handgf(
        dir.path(),
        &["--config", unknown.to_str().unwrap(), "synth-data"],
    );
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));

    let partial = dir.path().join("partial.toml");
    std::fs::write(&partial, "[hand]\n").unwrap();
    let out = handgf(
        dir.path(),
        &["--config", partial.to_str().unwrap(), "synth-data"],
    );
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("objects"));
}

#[test]
fn bad_arguments_exit_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SECTIONS).unwrap();
    let c = cfg.to_str().unwrap();
    assert_eq!(
        code(&handgf(
            dir.path(),
            &["--config", c, "train-rl", "--flags", "no_such_flag"]
        )),
        2
    );
    assert_eq!(
        code(&handgf(
            dir.path(),
            &["--config", c, "eval", "--split", "nowhere"]
        )),
        2
    );
    assert_eq!(
        code(&handgf(
            dir.path(),
            &["--config", c, "eval", "--noise", "2"]
        )),
        2
    );
    assert_eq!(
        code(&handgf(
            dir.path(),
            &["--config", c, "train-rl", "--flags", "no_rl"]
        )),
        2
    );
}

#[test]
fn missing_artifacts_exit_with_data_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, SECTIONS).unwrap();
    let out = handgf(dir.path(), &["--config", cfg.to_str().unwrap(), "plot"]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    // The run directory is keyed by the config hash and seed.
    let runs: Vec<_> = std::fs::read_dir(dir.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(runs.len(), 1);
    let name = runs[0].file_name().into_string().unwrap();
    assert!(name.ends_with("-s0") && name.len() == 19, "{name}");
    assert!(runs[0].path().join("config.toml").exists());
}

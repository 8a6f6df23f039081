use std::path::PathBuf;
use std::process::Command;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

#[test]
fn simulate_lqr_writes_a_trace() {
    let dir = std::env::temp_dir().join(format!("netc-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let out = dir.join("trace.csv");
    let status = Command::new(env!("CARGO_BIN_EXE_netc"))
        .args(["simulate", "--config"])
        .arg(config("grn-lqr.toml"))
        .arg("--out")
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("t,x1,x2,u1,trigger_flag"));
    assert!(text.lines().count() > 10);
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn missing_method_is_rejected() {
    let dir = std::env::temp_dir().join(format!("netc-cli-bad-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let cfg = dir.join("bad.toml");
    std::fs::write(&cfg, "system = \"grn\"\n").unwrap();
    let output = Command::new(env!("CARGO_BIN_EXE_netc"))
        .args(["bound", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(!output.status.success());
    std::fs::remove_dir_all(&dir).ok();
}

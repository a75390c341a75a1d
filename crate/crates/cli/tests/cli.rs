use std::path::PathBuf;
use std::process::{Command, Output};

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn lab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cima-lab"))
        .args(args)
        .output()
        .expect("spawn cima-lab")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn exit_codes_follow_run_status() {
    let src = scenarios().join("openplc_overflow.mpc");
    let src = src.to_str().unwrap();
    let none = lab(&["exec", src, "--mode", "none"]);
    assert_eq!(none.status.code(), Some(0));
    let abort = lab(&["exec", src, "--mode", "abort"]);
    assert_eq!(abort.status.code(), Some(2));
    assert!(stdout(&abort).contains("\"index\":1024"), "{}", stdout(&abort));
    let cima = lab(&["exec", src, "--mode", "cima"]);
    assert_eq!(cima.status.code(), Some(0));
    assert_eq!(stdout(&cima).lines().filter(|l| l.starts_with("skip ")).count(), 1024);
}

#[test]
fn step_budget_exit_code() {
    let src = scenarios().join("loop_counter_attack.mpc");
    let o = lab(&[
        "exec",
        src.to_str().unwrap(),
        "--mode",
        "cima",
        "--input",
        "5,150",
        "--max-steps",
        "50000",
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
}

#[test]
fn emitted_ir_builds_again() {
    let src = scenarios().join("benign_swat_logic.mpc");
    let ir = lab(&["build", src.to_str().unwrap(), "--mode", "cima", "--emit-ir"]);
    assert!(ir.status.success());
    let path = std::env::temp_dir().join(format!("cima-lab-{}.ir", std::process::id()));
    std::fs::write(&path, &ir.stdout).unwrap();
    let again = lab(&["build", path.to_str().unwrap(), "--mode", "cima", "--emit-ir"]);
    std::fs::remove_file(&path).ok();
    assert!(again.status.success(), "{}", String::from_utf8_lossy(&again.stderr));
    assert_eq!(again.stdout, ir.stdout);
}

#[test]
fn suite_writes_csv_and_fails_on_empty_glob() {
    let pattern = scenarios().join("*.toml");
    let o = lab(&["suite", pattern.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("scenario,mode,mso_us"));
    let empty = lab(&["suite", scenarios().join("nothing_*.toml").to_str().unwrap()]);
    assert_eq!(empty.status.code(), Some(1));
}

#[test]
fn published_figures_reproduce() {
    let o = lab(&["verify-paper"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).matches(" OK").count(), 2);
}

#[test]
fn bad_source_reports_position() {
    let path = std::env::temp_dir().join(format!("cima-lab-bad-{}.mpc", std::process::id()));
    std::fs::write(&path, "func main() { int x = ; }").unwrap();
    let o = lab(&["build", path.to_str().unwrap()]);
    std::fs::remove_file(&path).ok();
    assert_eq!(o.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&o.stderr).contains(":1:"),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

use std::path::Path;
use std::process::{Command, Output};

fn befunet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_befunet")).args(args).current_dir(cwd).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const SMALL: &str = "\
image_h = 32
image_w = 32
base_dim = 8
heads = 1,1,2,2
pdc_blocks = 1
epochs = 1
batch_size = 4
train_manifest = data/train.csv
val_manifest = data/val.csv
";

#[test]
fn flops_prints_both_costs() {
    let dir = tempfile::tempdir().unwrap();
    let o = befunet(&["flops", "--h", "14", "--w", "14", "--c", "96", "--hl", "7", "--wl", "7"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("gca=14601216 lca=9069312 ratio="));
    let full = befunet(&["flops", "--h", "14", "--w", "14", "--c", "96", "--hl", "14", "--wl", "14"], dir.path());
    assert!(stdout(&full).trim_end().ends_with("ratio=1.0"), "{}", stdout(&full));
}

#[test]
fn flops_rejects_window_larger_than_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!befunet(&["flops", "--h", "4", "--w", "4", "--c", "8", "--hl", "5", "--wl", "2"], dir.path()).status.success());
    assert!(!befunet(&["flops", "--h", "0", "--w", "4", "--c", "8", "--hl", "1", "--wl", "1"], dir.path()).status.success());
}

#[test]
fn gradcheck_single_module_and_unknown_module() {
    let dir = tempfile::tempdir().unwrap();
    let o = befunet(&["gradcheck", "--module", "losses"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("gradient checks passed"));
    let bad = befunet(&["gradcheck", "--module", "nonsense"], dir.path());
    assert!(!bad.status.success());
}

#[test]
fn missing_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.txt"), SMALL).unwrap();
    let o = befunet(&["eval", "--config", "run.txt", "--checkpoint", "absent.ckpt", "--manifest", "absent.csv"], dir.path());
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("absent.ckpt"));
    assert!(!befunet(&["train", "--config", "absent.txt"], dir.path()).status.success());
    assert!(!befunet(&["gen-data", "--out", "d", "--val-fraction", "1.5"], dir.path()).status.success());
}

#[test]
fn generate_train_evaluate_infer() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let gen = befunet(&["gen-data", "--out", "data", "--count", "10", "--height", "32", "--width", "32", "--seed", "3"], cwd);
    assert!(gen.status.success());
    assert!(cwd.join("data/train.csv").exists() && cwd.join("data/val.csv").exists());

    std::fs::write(cwd.join("run.txt"), SMALL).unwrap();
    let tr = befunet(&["train", "--config", "run.txt", "--out", "out"], cwd);
    assert!(tr.status.success(), "{}", String::from_utf8_lossy(&tr.stderr));
    assert!(stdout(&tr).contains("best val dice"));
    let log = std::fs::read_to_string(cwd.join("out/metrics.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(cwd.join("out/config.txt").exists());

    let ev = befunet(
        &["eval", "--config", "run.txt", "--checkpoint", "out/best.ckpt", "--manifest", "data/val.csv", "--report", "report.txt"],
        cwd,
    );
    assert!(ev.status.success(), "{}", String::from_utf8_lossy(&ev.stderr));
    assert_eq!(std::fs::read_to_string(cwd.join("report.txt")).unwrap(), stdout(&ev));

    let first_image = std::fs::read_to_string(cwd.join("data/val.csv"))
        .unwrap()
        .lines()
        .find(|l| !l.starts_with('#') && l.contains(".ppm"))
        .and_then(|l| l.split(',').next().map(str::to_owned))
        .unwrap();
    let image = cwd.join("data").join(first_image);
    let inf = befunet(
        &["infer", "--config", "run.txt", "--checkpoint", "out/best.ckpt", "--image", image.to_str().unwrap(), "--output", "pred.pgm"],
        cwd,
    );
    assert!(inf.status.success(), "{}", String::from_utf8_lossy(&inf.stderr));
    let bytes = std::fs::read(cwd.join("pred.pgm")).unwrap();
    assert!(bytes.starts_with(b"P5"));

    // A checkpoint from a different architecture is refused.
    std::fs::write(cwd.join("wide.txt"), SMALL.replace("base_dim = 8", "base_dim = 12")).unwrap();
    let mismatch = befunet(&["eval", "--config", "wide.txt", "--checkpoint", "out/best.ckpt", "--manifest", "data/val.csv"], cwd);
    assert!(!mismatch.status.success());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn slicemil(args: &[&str], out_root: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slicemil"))
        .args(args)
        .env("SLICEMIL_OUT", out_root)
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn checksum(stdout: &str) -> String {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix("checksum "))
        .expect("checksum line")
        .to_string()
}

fn generate(root: &Path, dir: &Path) -> String {
    let d = dir.to_str().unwrap();
    ok(&slicemil(&["generate", "--seed", "7", "--patients", "6", "--domains", "3", "--out", d], root))
}

const SMALL: &[&str] = &[
    "--backbone",
    "tiny-cnn-desk",
    "--input-size",
    "32",
    "--batch-size",
    "2",
    "--section-len",
    "8",
    "--k",
    "2",
];

#[test]
fn generate_is_reproducible_and_uses_out_root() {
    let tmp = tempfile::tempdir().unwrap();
    let a = generate(tmp.path(), &tmp.path().join("a/nested"));
    let b = generate(tmp.path(), &tmp.path().join("b"));
    assert_eq!(checksum(&a), checksum(&b));

    ok(&slicemil(&["generate", "--patients", "2", "--domains", "1", "--first-domain", "3"], tmp.path()));
    let manifest = fs::read_to_string(tmp.path().join("data/manifest.jsonl")).unwrap();
    assert!(manifest.contains("\"D\""));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = slicemil(&["generate", "--patients", "0"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    assert_eq!(slicemil(&["train", "--bogus"], tmp.path()).status.code(), Some(1));
    assert_eq!(slicemil(&[], tmp.path()).status.code(), Some(1));
    assert_eq!(slicemil(&["--help"], tmp.path()).status.code(), Some(0));
    let missing = slicemil(&["eval", "--checkpoint", "nope.ckpt", "--manifest", "nope.jsonl"], tmp.path());
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn resolved_config_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let dump = ok(&slicemil(&["train", "--manifest", "m.jsonl", "--dump-config"], tmp.path()));
    for line in ["section_len = 16", "k = 8", "dropout_rate = 0.7", "batch_size = 10", "enable_noisy_loss = true"] {
        assert!(dump.lines().any(|l| l == line), "missing `{line}` in\n{dump}");
    }
    let off = ok(&slicemil(&["train", "--manifest", "m.jsonl", "--dump-config", "--no-noisy-loss"], tmp.path()));
    assert!(off.lines().any(|l| l == "enable_noisy_loss = false"));

    // the dump round-trips as a config file, and flags override it
    let path = tmp.path().join("c.toml");
    fs::write(&path, &off).unwrap();
    let again = ok(&slicemil(
        &["train", "--manifest", "m.jsonl", "--dump-config", "--config", path.to_str().unwrap(), "--k", "4"],
        tmp.path(),
    ));
    assert_eq!(again, off.replace("\nk = 8\n", "\nk = 4\n"));
}

#[test]
fn train_resume_eval_explain() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    generate(root, &data);
    let manifest = data.join("manifest.jsonl");
    let m = manifest.to_str().unwrap();

    let full = root.join("full");
    let mut args = vec!["train", "--manifest", m, "--iterations", "4", "--checkpoint-every", "2"];
    args.extend_from_slice(SMALL);
    ok(&slicemil(&[args.clone(), vec!["--out", full.to_str().unwrap()]].concat(), root));
    assert!(full.join("checkpoint-000002.ckpt").exists());
    assert_eq!(fs::read_to_string(full.join("train_log.jsonl")).unwrap().lines().count(), 4);
    assert!(full.join("config.toml").exists());

    let resumed = root.join("resumed");
    let ckpt = full.join("checkpoint-000002.ckpt");
    ok(&slicemil(
        &[args.clone(), vec!["--out", resumed.to_str().unwrap(), "--resume", ckpt.to_str().unwrap()]].concat(),
        root,
    ));
    assert_eq!(
        fs::read(full.join("final.ckpt")).unwrap(),
        fs::read(resumed.join("final.ckpt")).unwrap()
    );

    let final_ckpt = full.join("final.ckpt");
    let c = final_ckpt.to_str().unwrap();
    let e1 = root.join("e1");
    let e2 = root.join("e2");
    let text = ok(&slicemil(&["eval", "--checkpoint", c, "--manifest", m, "--out", e1.to_str().unwrap()], root));
    assert!(text.contains("patient level") && text.contains("image level"));
    ok(&slicemil(&["eval", "--checkpoint", c, "--manifest", m, "--out", e2.to_str().unwrap()], root));
    for f in ["report.json", "report.txt", "roc_patient.txt", "roc_image.txt"] {
        assert_eq!(fs::read(e1.join(f)).unwrap(), fs::read(e2.join(f)).unwrap(), "{f}");
    }

    let ex = root.join("ex");
    ok(&slicemil(
        &["explain", "--checkpoint", c, "--manifest", m, "--patient", "p0001", "--out", ex.to_str().unwrap()],
        root,
    ));
    let pdir = ex.join("p0001");
    let slices = fs::read_dir(data.join("slices/p0001")).unwrap().count();
    let overlays = fs::read_dir(&pdir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with(".png"))
        .count();
    assert_eq!(overlays, 2 * slices);
    let profile = fs::read_to_string(pdir.join("profile.csv")).unwrap();
    assert_eq!(profile.lines().count() - 1, (slices / 8).max(1));
    assert!(pdir.join("boxes.json").exists());
}

#[test]
fn sweep_dedupes_and_reports_both_levels() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let data = root.join("data");
    generate(root, &data);
    let m = data.join("manifest.jsonl");
    let mut args = vec![
        "sweep",
        "--param",
        "k",
        "--values",
        "1,2,1",
        "--manifest",
        m.to_str().unwrap(),
        "--holdout-domain",
        "C",
        "--iterations",
        "2",
    ];
    args.extend_from_slice(SMALL);
    let out = slicemil(&args, root);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate"));
    let rows: serde_json::Value = serde_json::from_slice(&fs::read(root.join("sweep/sweep.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2);
    for r in rows {
        assert!(r["patient_accuracy"].is_number() && r["image_accuracy"].is_number());
    }
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ttm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttm")).args(args).env("RUST_LOG", "warn").output().expect("runs ttm")
}

fn ok(args: &[&str]) -> String {
    let out = ttm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, extra: &[&str]) {
    let mut args = vec![
        "gen-data", "--count", "4", "--val", "2", "--reference", "3", "--test", "2", "--size", "32", "--out",
    ];
    let d = dir.to_str().unwrap();
    args.push(d);
    args.extend_from_slice(extra);
    ok(&args);
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(tree(&p));
        } else {
            out.push((p.strip_prefix(dir).unwrap_or(&p).display().to_string(), fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_byte_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen(a.path(), &[]);
    gen(b.path(), &[]);
    let (ta, tb) = (tree(a.path()), tree(b.path()));
    assert!(ta.iter().any(|(n, _)| n.ends_with(".ttmt")));
    assert_eq!(ta, tb);
}

#[test]
fn invalid_acceleration_fails() {
    let d = tempfile::tempdir().unwrap();
    let out = ttm(&["gen-data", "--af", "0.5", "--count", "2", "--size", "32", "--out", d.path().to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("acceleration"));
}

#[test]
fn unknown_strategy_lists_valid_ones() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &[]);
    let out = ttm(&["train", "--strategy", "unet", "--data", d.path().to_str().unwrap(), "--out", "unused"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for s in ["original", "ref_concat", "ttm", "ttm_ha_only", "ttm_sa_only"] {
        assert!(err.contains(s), "{err}");
    }
}

#[test]
fn train_eval_recon_and_attention() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    gen(&data, &[]);
    let data = data.to_str().unwrap();
    let run = d.path().join("run");
    ok(&["train", "--strategy", "ttm", "--data", data, "--epochs", "0", "--out", run.to_str().unwrap()]);
    assert!(run.join("epoch_000.ttmt").exists());
    assert!(!run.join("epoch_001.ttmt").exists());
    let ckpt = run.join("final.ttmt");
    let ckpt = ckpt.to_str().unwrap();

    let ev = d.path().join("eval");
    ok(&["eval", "--checkpoint", ckpt, "--data", data, "--split", "test", "--out", ev.to_str().unwrap()]);
    let csv = fs::read_to_string(ev.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "sample_id,psnr_db,ssim");
    assert_eq!(csv.lines().count(), 3);
    let table = fs::read_to_string(ev.join("table.csv")).unwrap();
    assert!(table.lines().nth(1).unwrap().starts_with("ttm,"));
    assert!(table.contains(" / "));

    let gt = d.path().join("gt");
    ok(&["eval", "--ground-truth", "--data", data, "--out", gt.to_str().unwrap()]);
    let csv = fs::read_to_string(gt.join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        assert!(line.ends_with(",inf,1.000000"), "{line}");
    }

    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(Path::new(data).join("manifest.json")).unwrap()).unwrap();
    let id = manifest["splits"]["test"][0].as_u64().unwrap().to_string();
    let rec = d.path().join("recon");
    ok(&["recon", "--checkpoint", ckpt, "--data", data, "--sample", &id, "--out", rec.to_str().unwrap()]);
    for name in ["recon", "ground_truth", "zero_filled", "abs_diff"] {
        let pgm = fs::read_to_string(rec.join(format!("{name}.pgm"))).unwrap();
        let mut lines = pgm.lines();
        assert_eq!(lines.next(), Some("P2"));
        assert_eq!(lines.next(), Some("32 32"));
        assert_eq!(lines.next(), Some("255"));
        assert_eq!(lines.count(), 32);
    }
    assert!(rec.join("recon.ttmt").exists());

    let attn = d.path().join("attn");
    ok(&["dump-attn", "--checkpoint", ckpt, "--data", data, "--sample", &id, "--out", attn.to_str().unwrap()]);
    let side: serde_json::Value = serde_json::from_str(&fs::read_to_string(attn.join("attention.json")).unwrap()).unwrap();
    assert_eq!(side["grid"], serde_json::json!([3, 3]));
    assert!(attn.join("attention.ttmt").exists());

    let missing = ttm(&["recon", "--checkpoint", ckpt, "--data", data, "--sample", "99999", "--out", "x"]);
    assert!(!missing.status.success());
}

#[test]
fn dump_attn_rejects_plain_backbones() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    gen(&data, &[]);
    let run = d.path().join("run");
    ok(&["train", "--strategy", "original", "--data", data.to_str().unwrap(), "--epochs", "0", "--out", run.to_str().unwrap()]);
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    let id = manifest["splits"]["test"][0].as_u64().unwrap().to_string();
    let out = ttm(&[
        "dump-attn", "--checkpoint", run.join("final").to_str().unwrap(), "--data", data.to_str().unwrap(),
        "--sample", &id, "--out", d.path().join("a").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
}

#[test]
fn unit_acceleration_dataset_is_fully_sampled() {
    let d = tempfile::tempdir().unwrap();
    gen(d.path(), &["--af", "1"]);
    let mask: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(fs::read_dir(d.path().join("test")).unwrap().map(|e| e.unwrap().path()).find(|p| {
            p.to_str().unwrap().ends_with(".mask.json")
        }).unwrap())
        .unwrap(),
    )
    .unwrap();
    assert_eq!(mask["columns"].as_array().unwrap().len(), 32);
}

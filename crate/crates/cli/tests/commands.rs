use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn write_config(dir: &TempDir, name: &str, json: &str) -> PathBuf {
    let path = dir.path().join(name);
    std::fs::write(&path, json).unwrap();
    path
}

fn ann(args: &[&str], config: Option<&Path>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ann"));
    cmd.args(args).env_remove("ANN_THREADS");
    if let Some(c) = config {
        cmd.arg("--config").arg(c);
    }
    cmd.output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const NB_SMALL: &str =
    r#"{"block": "nb", "shape": {"c": 2, "h": 4, "w": 4}, "embed_channels": 2, "seed": 1}"#;

#[test]
fn demo_reports_shape_and_row_sums() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "nb.json", NB_SMALL);
    let out = dir.path().join("y.annt");
    let o = ann(&["demo", "--out", out.to_str().unwrap()], Some(&cfg));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("output 4x4x4"), "{text}");
    assert!(text.contains("PASS"), "{text}");

    let y = ann_cli::annt::read(&out).unwrap();
    assert_eq!(y.shape(), &[4, 4, 4]);
    let bytes = std::fs::read(&out).unwrap();
    assert_eq!(&bytes[..4], b"ANNT");
    assert_eq!(bytes.len(), 12 + 3 * 8 + 64 * 8);

    let again = dir.path().join("y2.annt");
    ann(&["demo", "--out", again.to_str().unwrap()], Some(&cfg));
    assert_eq!(std::fs::read(&again).unwrap(), bytes);
}

#[test]
fn empty_levels_exit_two_and_name_field() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "bad.json",
        r#"{"block": "apnb", "shape": {"c": 2, "h": 4, "w": 4}, "embed_channels": 1,
            "sampler": {"method": "pyramid_average", "levels": []}}"#,
    );
    let o = ann(&["demo"], Some(&cfg));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("levels"), "{}", stderr(&o));
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "typo.json",
        r#"{"block": "nb", "shape": {"c": 2, "h": 4, "w": 4}, "embed_channels": 1, "sead": 3}"#,
    );
    let o = ann(&["demo"], Some(&cfg));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("sead"));
}

const APNB: &str = r#"{"block": "apnb", "shape": {"c": 4, "h": 6, "w": 6}, "embed_channels": 2,
    "sampler": {"method": "pyramid_average", "levels": [1, 2]}, "seed": 3}"#;
const AFNB: &str = r#"{"block": "afnb", "shape": {"c": 3, "h": 4, "w": 4}, "low_shape": {"c": 2, "h": 5, "w": 6},
    "embed_channels": 2, "sampler": {"method": "pyramid_max", "levels": [1, 2]}}"#;

#[test]
fn equivalence_passes_and_negative_control_fails() {
    let dir = TempDir::new().unwrap();
    for (name, json) in [("apnb.json", APNB), ("afnb.json", AFNB)] {
        let cfg = write_config(&dir, name, json);
        let report = dir.path().join(format!("{name}.report.json"));
        let o = ann(
            &["equivalence", "--out", report.to_str().unwrap()],
            Some(&cfg),
        );
        assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
        let parsed: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
        assert_eq!(parsed["cases"].as_array().unwrap().len(), 50);

        let o = ann(&["equivalence", "--corrupt"], Some(&cfg));
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains("seed"), "{}", stderr(&o));
    }
    let cfg = write_config(&dir, "nb.json", NB_SMALL);
    assert_eq!(ann(&["equivalence"], Some(&cfg)).status.code(), Some(2));
}

#[test]
fn table1_flops() {
    let o = ann(&["flops", "--table1"], None);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("57.98") && text.contains("601.3"), "{text}");
    assert!(text.contains("reported"));
    assert!(
        text.lines()
            .any(|l| l.starts_with("apnb,128,256,2048,256,110,") && l.ends_with(",297.9")),
        "{text}"
    );
}

#[test]
fn flops_sweep_rows_and_json() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "sweep.json",
        r#"{"block": "apnb", "shape": {"c": 2048, "h": 128, "w": 256}, "embed_channels": 256, "share_key_value": true,
            "sampler": {"method": "pyramid_average", "levels": [1, 3, 6, 8]},
            "sweep": {"shapes": [{"c": 2048, "h": 96, "w": 96}, {"c": 2048, "h": 128, "w": 256}], "blocks": ["nb", "apnb"]}}"#,
    );
    let json = dir.path().join("rows.json");
    let o = ann(&["flops", "--out", json.to_str().unwrap()], Some(&cfg));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let lines: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(
        lines[0],
        "block,H,W,C,Chat,S,macs_total,macs_matmul,peak_bytes,ratio"
    );
    assert!(lines[1].starts_with("nb,96,96,") && lines[2].starts_with("apnb,96,96,"));
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 4);
    assert_eq!(rows[3]["anchors"], 110);
    let back: serde_json::Value =
        serde_json::from_str(&serde_json::to_string(&rows).unwrap()).unwrap();
    assert_eq!(back, rows);
}

#[test]
fn gradcheck_small_blocks_pass_and_cap_applies() {
    let dir = TempDir::new().unwrap();
    let nb = write_config(
        &dir,
        "nb.json",
        r#"{"block": "nb", "shape": {"c": 2, "h": 3, "w": 3}, "embed_channels": 2}"#,
    );
    let report = dir.path().join("gc.json");
    let o = ann(&["gradcheck", "--out", report.to_str().unwrap()], Some(&nb));
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["passed"], true);
    assert!(parsed["tensors"]
        .as_array()
        .unwrap()
        .iter()
        .all(|t| t["max_rel_error"].as_f64().unwrap() < 1e-4));

    let apnb = write_config(&dir, "apnb.json", APNB);
    assert_eq!(ann(&["gradcheck"], Some(&apnb)).status.code(), Some(0));

    let big = write_config(
        &dir,
        "big.json",
        r#"{"block": "nb", "shape": {"c": 5, "h": 30, "w": 30}, "embed_channels": 2}"#,
    );
    let o = ann(&["gradcheck"], Some(&big));
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("4096"));
}

#[test]
fn bench_toy_pair_and_single() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "bench.json",
        r#"{"block": "apnb", "shape": {"c": 2, "h": 8, "w": 8}, "embed_channels": 2,
            "sampler": {"method": "pyramid_average", "levels": [1, 2]},
            "bench": {"blocks": ["nb", "apnb"], "warmup": 1, "measured": 3}}"#,
    );
    let out = dir.path().join("bench.json.out");
    let o = ann(&["bench", "--out", out.to_str().unwrap()], Some(&cfg));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("speedup"));
    let parsed: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(parsed["reports"].as_array().unwrap().len(), 2);
    assert_eq!(parsed["comparisons"].as_array().unwrap().len(), 1);
    for r in parsed["reports"].as_array().unwrap() {
        assert_eq!(r["phases"].as_array().unwrap().len(), 7);
    }
    let csv = std::fs::read_to_string(out.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("block,phase,run,ms"));

    let single = write_config(&dir, "single.json", NB_SMALL);
    let o = ann(&["bench"], Some(&single));
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    for phase in [
        "projection",
        "sampling",
        "similarity",
        "normalization",
        "aggregation",
        "output_projection",
        "combine",
    ] {
        assert!(text.lines().any(|l| l.starts_with(phase)), "{phase}");
    }
}

#[test]
fn full_size_bench_fails_preflight() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        &dir,
        "full.json",
        r#"{"block": "nb", "shape": {"c": 2048, "h": 128, "w": 256}, "embed_channels": 256, "share_key_value": true}"#,
    );
    let shape = ann_core::Shape3::new(2048, 128, 256);
    let spec = ann_core::bench::BenchSpec::new(
        ann_core::blocks::BlockKind::Nb,
        shape,
        ann_core::blocks::BlockConfig::new(2048, 256).with_shared_key_value(true),
    );
    if ann_core::bench::available_memory()
        .is_none_or(|m| m >= ann_core::bench::required_bytes(&spec))
    {
        eprintln!("skipping: this machine could hold a full-size run");
        return;
    }
    let o = ann(&["bench", "--full"], Some(&cfg));
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("bytes"));
}

#[test]
fn bad_thread_override_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "nb.json", NB_SMALL);
    let o = Command::new(env!("CARGO_BIN_EXE_ann"))
        .args(["bench", "--config"])
        .arg(&cfg)
        .env("ANN_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            ann_cli::ExperimentConfig::load(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 5);
}

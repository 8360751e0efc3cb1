use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use anatomy_core::ltxt::EmbeddingMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

fn merges() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/clip_merges.txt")
}

fn schema(name: &str) -> Value {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../schemas/{name}.v1.json"));
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn assert_valid(name: &str, path: &Path) {
    let instance: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema(name)).unwrap();
    let errors: Vec<String> = validator.iter_errors(&instance).map(|e| format!("{e} at {}", e.instance_path)).collect();
    assert!(errors.is_empty(), "{}: {errors:?}", path.display());
}

fn anatomy(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_anatomy")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gaussian_ltxt(path: &Path, rows: usize, cols: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v = (0..rows * cols).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
    EmbeddingMatrix::new(rows, cols, v).unwrap().write_path(path).unwrap();
}

fn corpus(dir: &Path) -> PathBuf {
    let p = dir.join("p.jsonl");
    let lines = [
        r#"{"text": "a red car", "source": "lvis"}"#,
        r#"{"text": "the man on the left", "source": "refcoco"}"#,
        r#"{"text": "small brown dog", "source": "lvis"}"#,
        r#"{"text": "a person wearing a blue shirt standing next to the white car on the left side of the road", "source": "refcoco"}"#,
        r#"{"text": "A  RED car", "source": "lvis"}"#,
    ];
    std::fs::write(&p, lines.join("\n")).unwrap();
    p
}

#[test]
fn no_subcommand_prints_usage() {
    let o = anatomy(&[]);
    assert_eq!(o.status.code(), Some(1));
    let text = String::from_utf8_lossy(&o.stdout).into_owned() + &stderr(&o);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_flag_is_named() {
    let o = anatomy(&["svd", "--matrix", "x.ltxt", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--frobnicate"));
}

#[test]
fn audit_happy_path() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let out = dir.path().join("r.json");
    let csv = dir.path().join("r.csv");
    let svg = dir.path().join("h.svg");
    let mp = merges();
    let args = ["audit", "--merges", s(&mp), "--corpus", s(&c), "--context", "32,16,8", "--out", s(&out)];
    let o = anatomy(&[&args[..], &["--csv", s(&csv), "--svg", s(&svg)]].concat());
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let contexts = r["contexts"].as_array().unwrap();
    assert_eq!(contexts.len(), 3);
    assert_eq!(contexts.iter().map(|c| c["context"].as_u64().unwrap()).collect::<Vec<_>>(), [32, 16, 8]);
    assert_eq!(r["corpus"]["duplicates_removed"], 1);
    assert_valid("audit", &out);
    assert_valid("manifest", &dir.path().join("r.manifest.json"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 4);
    assert!(std::fs::read_to_string(&svg).unwrap().contains(">refcoco</text>"));

    let first = std::fs::read(&out).unwrap();
    let first_svg = std::fs::read(&svg).unwrap();
    assert_eq!(anatomy(&[&args[..], &["--svg", s(&svg)]].concat()).status.code(), Some(0));
    assert_eq!(std::fs::read(&out).unwrap(), first);
    assert_eq!(std::fs::read(&svg).unwrap(), first_svg);
}

#[test]
fn audit_rejects_short_context() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let out = dir.path().join("r.json");
    let mp = merges();
    let o = anatomy(&["audit", "--merges", s(&mp), "--corpus", s(&c), "--context", "2", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("at least 3"));
}

#[test]
fn id_needs_ten_points() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.ltxt");
    gaussian_ltxt(&x, 5, 4, 1);
    let out = dir.path().join("id.json");
    let o = anatomy(&["id", "--matrix", s(&x), "--method", "twonn", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("n >= 10"), "{}", stderr(&o));
}

#[test]
fn bad_magic_is_an_io_class_error() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("corrupt.ltxt");
    let mut bytes = b"LTXX".to_vec();
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(1u64.to_le_bytes());
    bytes.extend(1u64.to_le_bytes());
    bytes.extend(0f32.to_le_bytes());
    std::fs::write(&x, bytes).unwrap();
    let out = dir.path().join("s.json");
    let o = anatomy(&["svd", "--matrix", s(&x), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(!out.exists());
    let o = anatomy(&["svd", "--matrix", s(&dir.path().join("missing.ltxt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unwritable_output_is_an_io_class_error() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.ltxt");
    gaussian_ltxt(&x, 12, 4, 2);
    let out = dir.path().join("no/such/dir/s.json");
    assert_eq!(anatomy(&["svd", "--matrix", s(&x), "--out", s(&out)]).status.code(), Some(2));
    let svg = dir.path().join("no/such/dir/h.svg");
    let ps = dir.path().join("ps.json");
    let o = anatomy(&["possim", "--matrix", s(&x), "--split", "4", "--out", s(&ps), "--svg", s(&svg)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn matrix_subcommands_are_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.ltxt");
    gaussian_ltxt(&x, 200, 12, 3);
    let p = dir.path().join("p.ltxt");
    gaussian_ltxt(&p, 16, 24, 4);
    let runs: Vec<(&str, Vec<String>, PathBuf)> = vec![
        ("spectrum", vec!["svd".into(), "--matrix".into(), s(&x).into(), "--center".into()], dir.path().join("s.json")),
        ("possim", vec!["possim".into(), "--matrix".into(), s(&p).into(), "--split".into(), "8".into()], dir.path().join("ps.json")),
        (
            "id",
            ["id", "--matrix", s(&x), "--method", "both", "--sample", "150", "--seed", "9"].map(String::from).to_vec(),
            dir.path().join("id.json"),
        ),
    ];
    for (schema_name, args, out) in runs {
        let mut full = args.clone();
        full.extend(["--out".to_string(), s(&out).to_string()]);
        let refs: Vec<&str> = full.iter().map(String::as_str).collect();
        let o = anatomy(&refs);
        assert_eq!(o.status.code(), Some(0), "{schema_name}: {}", stderr(&o));
        assert_valid(schema_name, &out);
        let manifest = out.with_file_name(format!("{}.manifest.json", out.file_stem().unwrap().to_str().unwrap()));
        assert_valid("manifest", &manifest);
        let first = std::fs::read(&out).unwrap();
        assert_eq!(anatomy(&refs).status.code(), Some(0));
        assert_eq!(std::fs::read(&out).unwrap(), first, "{schema_name} rerun differs");
    }
    let id: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("id.json")).unwrap()).unwrap();
    assert_eq!(id["n_used"], 150);
    assert_eq!(id["estimates"].as_array().unwrap().len(), 2);
}

#[test]
fn manifest_digests_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.ltxt");
    gaussian_ltxt(&x, 20, 3, 5);
    let out = dir.path().join("s.json");
    assert_eq!(anatomy(&["svd", "--matrix", s(&x), "--out", s(&out)]).status.code(), Some(0));
    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("s.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "svd");
    assert_eq!(m["inputs"][0]["bytes"], 24 + 20 * 3 * 4);
    let (hex, _) = anatomy_cli::manifest::digest_file(&x).unwrap();
    assert_eq!(m["inputs"][0]["sha256"], hex.as_str());
    assert_eq!(m["config"]["center"], false);
}

#[test]
fn id_repeats_report_spread() {
    let dir = tempfile::tempdir().unwrap();
    let x = dir.path().join("x.ltxt");
    gaussian_ltxt(&x, 120, 6, 8);
    let out = dir.path().join("id.json");
    let args = ["id", "--matrix", s(&x), "--sample", "80", "--seed", "3", "--repeats", "4", "--out", s(&out)];
    assert_eq!(anatomy(&args).status.code(), Some(0));
    assert_valid("id", &out);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    let spread = r["spread"].as_array().unwrap();
    assert_eq!(spread.len(), 2);
    for (sp, est) in spread.iter().zip(r["estimates"].as_array().unwrap()) {
        assert_eq!(sp["seeds"], serde_json::json!([3, 4, 5, 6]));
        assert_eq!(sp["values"][0], est["value"]);
        let (lo, hi, mean) = (sp["min"].as_f64().unwrap(), sp["max"].as_f64().unwrap(), sp["mean"].as_f64().unwrap());
        assert!(lo <= mean && mean <= hi);
    }
    let m: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("id.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["seeds"], serde_json::json!([3, 4, 5, 6]));
    let zero = ["id", "--matrix", s(&x), "--repeats", "0", "--out", s(&out)];
    assert_eq!(anatomy(&zero).status.code(), Some(1));
}

#[test]
fn tokenize_lines() {
    let dir = tempfile::tempdir().unwrap();
    let mp = merges();
    let o = anatomy(&["tokenize", "--merges", s(&mp), "--context", "8", "--text", "a person", "--text", "dog"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<Value> = stdout.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["ids"], serde_json::json!([49406, 320, 2533, 49407, 0, 0, 0, 0]));
    assert_eq!(lines[0]["content_len"], 4);
    let validator = jsonschema::validator_for(&schema("tokenize")).unwrap();
    assert!(lines.iter().all(|l| validator.is_valid(l)));
    let keys: Vec<&str> = stdout.lines().next().unwrap().split('"').skip(1).step_by(2).take(1).collect();
    assert_eq!(keys, ["text"]);

    let c = corpus(dir.path());
    let out = dir.path().join("t.jsonl");
    let o = anatomy(&["tokenize", "--merges", s(&mp), "--context", "16", "--corpus", s(&c), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(3).unwrap().contains("\"truncated\":true"));
    assert_valid("manifest", &dir.path().join("t.manifest.json"));

    let o = anatomy(&["tokenize", "--merges", s(&mp), "--context", "8"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn probe_is_deterministic_and_valid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("probe.json");
    let csv = dir.path().join("probe.csv");
    let args = [
        "probe", "--d", "32", "--keys", "8", "--eps", "0.1", "--eps-mode", "relative", "--instance", "peaked", "--gap", "10",
        "--sharpness", "0.1,1,10", "--seeds", "12", "--out", s(&out), "--csv", s(&csv),
    ];
    let o = anatomy(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_valid("probe", &out);
    assert_valid("manifest", &dir.path().join("probe.manifest.json"));
    assert_eq!(std::fs::read_to_string(&csv).unwrap().lines().count(), 1 + 12 * 3);
    let first = std::fs::read(&out).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_anatomy")).args(args).env("ANATOMY_THREADS", "2").output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read(&out).unwrap(), first);

    let o = anatomy(&["probe", "--d", "8", "--keys", "4", "--sharpness", "10,1", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_thread_count_is_rejected() {
    let o = Command::new(env!("CARGO_BIN_EXE_anatomy"))
        .args(["probe", "--d", "8", "--keys", "4", "--seeds", "1"])
        .env("ANATOMY_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ANATOMY_THREADS"));
}

#[test]
fn report_bundles_everything() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path());
    let x = dir.path().join("x.ltxt");
    gaussian_ltxt(&x, 120, 6, 6);
    let p = dir.path().join("p.ltxt");
    gaussian_ltxt(&p, 16, 24, 7);
    let out = dir.path().join("report.json");
    let svgs = dir.path().join("svg");
    let mp = merges();
    let args = [
        "report", "--merges", s(&mp), "--corpus", s(&c), "--embeddings", s(&x), "--positional", s(&p),
        "--out", s(&out), "--svg-dir", s(&svgs),
    ];
    let o = anatomy(&args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_valid("report", &out);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert!(r["summary"]["twonn"].as_f64().unwrap() > 1.0);
    assert_eq!(r["summary"]["info_density"].as_object().unwrap().len(), 3);
    assert!(svgs.join("hist.svg").exists() && svgs.join("heatmap.svg").exists());
    let first = std::fs::read(&out).unwrap();
    assert_eq!(anatomy(&args).status.code(), Some(0));
    assert_eq!(std::fs::read(&out).unwrap(), first);

    let only_corpus = ["report", "--merges", s(&mp), "--corpus", s(&c), "--out", s(&out)];
    assert_eq!(anatomy(&only_corpus).status.code(), Some(0));
    assert_valid("report", &out);
}

fn distill_corpus(dir: &Path) -> PathBuf {
    let texts = anatomy_distill::synthetic_prompts(60, 3);
    let p = dir.join("d.jsonl");
    let body: String = texts.iter().map(|t| format!("{}\n", serde_json::json!({ "text": t }))).collect();
    std::fs::write(&p, body).unwrap();
    p
}

#[test]
fn distill_run_directory() {
    let dir = tempfile::tempdir().unwrap();
    let c = distill_corpus(dir.path());
    let mp = merges();
    let run = |out: &Path, extra: &[&str]| {
        let base = [
            "distill", "--corpus", s(&c), "--merges", s(&mp), "--context", "12", "--student-layers", "1",
            "--student-width", "16", "--teacher-width", "32", "--steps", "30", "--eval-every", "10", "--seed", "4",
            "--teacher-seed", "5", "--out", s(out),
        ];
        anatomy(&[&base[..], extra].concat())
    };
    let a = dir.path().join("a");
    let o = run(&a, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_valid("distill", &a.join("metrics.json"));
    assert_valid("manifest", &a.join("manifest.json"));
    let curve = std::fs::read_to_string(a.join("curve.csv")).unwrap();
    assert!(curve.starts_with("step,mse,cos,consist,total\n"));
    assert_eq!(curve.lines().count(), 31);
    let n_params = std::fs::read_dir(a.join("params")).unwrap().count();
    assert_eq!(n_params, 5 + 16);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(m["results"]["steps_run"], 30);
    assert_eq!(m["seeds"], serde_json::json!([4, 5]));

    let b = dir.path().join("b");
    assert_eq!(run(&b, &[]).status.code(), Some(0));
    for f in ["metrics.json", "curve.csv", "params/projection.ltxt", "params/layer0.w_q.ltxt"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }

    let f32_run = dir.path().join("f32");
    assert_eq!(run(&f32_run, &["--precision", "32"]).status.code(), Some(0));
    assert_valid("distill", &f32_run.join("metrics.json"));

    let o = run(&dir.path().join("div"), &["--lr", "1e30"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("last finite step"));

    let o = run(&dir.path().join("bad"), &["--student-width", "15", "--student-heads", "2"]);
    assert_eq!(o.status.code(), Some(1));
}

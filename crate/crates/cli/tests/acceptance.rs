//! Acceptance suite: one PASS/FAIL line per criterion, then a nonzero exit
//! if any criterion failed. Runs with `cargo test`; the end-to-end
//! criteria drive the `dissect` binary on a fresh synthetic corpus.
//!
//! `ACCEPTANCE_SKIP_E2E=1` skips the pipeline-based criteria (they are then
//! reported as SKIP, not PASS).

#[path = "../../core/tests/support/oracles.rs"]
mod oracles;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdout, Command, Stdio};
use std::time::{Duration, Instant};

use dissect_core::dissect::{CatalogFile, CATALOG_FILE, MONTAGE_DIR};

/// Settings of the end-to-end run.
const CASES: &str = "200";
const DATA_SEED: &str = "2024";
const TRAIN_SEED: &str = "7";
const EPOCHS: &str = "10";
const LAYER: &str = "conv3";
const K: usize = 12;
const QUANTILE: &str = "0.005";
const MIN_AUC: f64 = 0.85;
const TIME_LIMIT: Duration = Duration::from_secs(600);

type Outcome = Result<String, String>;

struct Report {
    failed: usize,
}

impl Report {
    fn line(&mut self, name: &str, outcome: &Outcome) {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d.as_str()),
            Err(d) => {
                self.failed += 1;
                ("FAIL", d.as_str())
            }
        };
        // Written to the raw stream so the lines show even when the run passes.
        let _ = writeln!(std::io::stderr(), "{tag} {name}: {detail}");
    }

    fn skip(&self, name: &str, why: &str) {
        let _ = writeln!(std::io::stderr(), "SKIP {name}: {why}");
    }
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dissect")
}

fn run(args: &[&str], cwd: &Path) -> Result<String, String> {
    let out = Command::new(bin())
        .args(args)
        .current_dir(cwd)
        .output()
        .map_err(|e| format!("cannot run dissect: {e}"))?;
    if !out.status.success() {
        return Err(format!(
            "`dissect {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

// ---------------------------------------------------------------------------
// end-to-end pipeline
// ---------------------------------------------------------------------------

struct Pipeline {
    dir: PathBuf,
    elapsed: Duration,
    final_auc: Option<f64>,
}

fn pipeline(dir: &Path) -> Result<Pipeline, String> {
    let start = Instant::now();
    run(&["gen-data", "--out", "data", "--cases", CASES, "--seed", DATA_SEED], dir)?;
    run(
        &[
            "train", "--index", "data/index.jsonl", "--out-model", "model/dissectnet", "--seed", TRAIN_SEED,
            "--epochs", EPOCHS,
        ],
        dir,
    )?;
    run(
        &[
            "dissect", "--model", "model/dissectnet.netm", "--index", "data/index.jsonl", "--out", "catalog",
            "--layer", LAYER, "--k", &K.to_string(), "--quantile", QUANTILE, "--seed", TRAIN_SEED,
        ],
        dir,
    )?;
    let elapsed = start.elapsed();
    let metrics = std::fs::read_to_string(dir.join("model/dissectnet.metrics.jsonl"))
        .map_err(|e| format!("metrics file: {e}"))?;
    let last = metrics.lines().last().ok_or("metrics file is empty")?;
    let last: serde_json::Value = serde_json::from_str(last).map_err(|e| format!("metrics line: {e}"))?;
    Ok(Pipeline {
        dir: dir.to_path_buf(),
        elapsed,
        final_auc: last["val_auc"].as_f64(),
    })
}

fn load_catalog(dir: &Path) -> Result<CatalogFile, String> {
    let text = std::fs::read_to_string(dir.join("catalog").join(CATALOG_FILE)).map_err(|e| format!("catalog: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("catalog does not parse: {e}"))
}

fn end_to_end(p: &Pipeline) -> Outcome {
    let auc = p.final_auc.ok_or("no validation AUC recorded")?;
    let catalog = load_catalog(&p.dir)?;
    catalog.validate().map_err(|e| format!("catalog invariant: {e}"))?;
    let montages = std::fs::read_dir(p.dir.join("catalog").join(MONTAGE_DIR))
        .map_err(|e| e.to_string())?
        .filter(|e| e.as_ref().is_ok_and(|e| e.path().extension().is_some_and(|x| x == "png")))
        .count();
    let mut problems = Vec::new();
    if auc < MIN_AUC {
        problems.push(format!("validation AUC {auc:.4} < {MIN_AUC}"));
    }
    if catalog.units.len() != 32 || montages != 32 {
        problems.push(format!("{} units and {montages} montages, expected 32", catalog.units.len()));
    }
    if catalog.units.iter().any(|u| u.top_k.len() != K) {
        problems.push(format!("some unit lacks {K} top patches"));
    }
    if p.elapsed > TIME_LIMIT {
        problems.push(format!("took {:.0?}, limit {TIME_LIMIT:?}", p.elapsed));
    }
    let summary = format!(
        "val AUC {auc:.4}, {} units, {montages} montages, valid catalog, {:.1?}",
        catalog.units.len(),
        p.elapsed
    );
    if problems.is_empty() {
        Ok(summary)
    } else {
        Err(format!("{} ({summary})", problems.join("; ")))
    }
}

fn dissection_sanity(p: &Pipeline) -> Outcome {
    let catalog = load_catalog(&p.dir)?;
    let fractions: Vec<(f64, &str)> = catalog
        .units
        .iter()
        .map(|u| {
            let pos = u
                .top_k
                .iter()
                .filter(|e| catalog.patch(&e.patch_id).is_some_and(|p| p.label))
                .count();
            (pos as f64 / u.top_k.len() as f64, u.unit_id.as_str())
        })
        .collect();
    let (best, id) = fractions
        .iter()
        .copied()
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .ok_or("catalog has no units")?;
    let passing = fractions.iter().filter(|f| f.0 >= 0.75).count();
    let msg = format!("{passing} units with >= 75% positive top-{K}; best {id} at {:.0}%", best * 100.0);
    if best >= 0.75 {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn tree_files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let path = e.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = std::fs::read(&path).unwrap_or_default();
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), bytes);
            }
        }
    }
    out
}

fn determinism(a: &Pipeline, scratch: &Path) -> Outcome {
    let b = pipeline(scratch)?;
    let mut compared = 0;
    for sub in ["data", "model", "catalog"] {
        let fa = tree_files(&a.dir.join(sub));
        let fb = tree_files(&b.dir.join(sub));
        if fa.keys().ne(fb.keys()) {
            return Err(format!("{sub}/ holds different file sets across runs"));
        }
        for (path, bytes) in &fa {
            if fb[path] != *bytes {
                return Err(format!("{sub}/{} differs between runs", path.display()));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} files (data, model, metrics, catalog, montages) byte-identical on rerun"))
}

// ---------------------------------------------------------------------------
// durability
// ---------------------------------------------------------------------------

struct Server {
    child: Child,
    addr: String,
    // Held open so later server output never hits a closed pipe.
    _stdout: BufReader<ChildStdout>,
}

impl Server {
    fn start(catalog: &Path, log: &Path) -> Result<Server, String> {
        let mut child = Command::new(bin())
            .args(["serve", "--port", "0", "--catalog"])
            .arg(catalog)
            .arg("--log")
            .arg(log)
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| format!("cannot start serve: {e}"))?;
        let stdout = child.stdout.take().ok_or("no stdout")?;
        let mut stdout = BufReader::new(stdout);
        let mut line = String::new();
        stdout
            .read_line(&mut line)
            .map_err(|e| format!("reading serve output: {e}"))?;
        let addr = line
            .trim()
            .strip_prefix("listening on http://")
            .ok_or_else(|| format!("unexpected serve banner {line:?}"))?
            .to_string();
        Ok(Server { child, addr, _stdout: stdout })
    }

    fn request(&self, method: &str, path: &str, body: Option<&str>) -> Result<(u16, serde_json::Value), String> {
        let mut s = TcpStream::connect(&self.addr).map_err(|e| format!("connect {}: {e}", self.addr))?;
        s.set_read_timeout(Some(Duration::from_secs(30))).ok();
        let body = body.unwrap_or("");
        write!(
            s,
            "{method} {path} HTTP/1.1\r\nHost: {}\r\nConnection: close\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n{body}",
            self.addr,
            body.len()
        )
        .map_err(|e| e.to_string())?;
        let mut raw = Vec::new();
        s.read_to_end(&mut raw).map_err(|e| e.to_string())?;
        let text = String::from_utf8_lossy(&raw);
        let (head, payload) = text.split_once("\r\n\r\n").ok_or("malformed HTTP response")?;
        let status: u16 = head
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or("missing status code")?;
        let chunked = head.to_ascii_lowercase().contains("transfer-encoding: chunked");
        let payload = if chunked { dechunk(payload) } else { payload.to_string() };
        let json = if payload.trim().is_empty() {
            serde_json::Value::Null
        } else {
            serde_json::from_str(&payload).map_err(|e| format!("response body: {e}"))?
        };
        Ok((status, json))
    }

    fn kill_hard(mut self) -> Result<(), String> {
        // SIGKILL on Unix: no shutdown handlers run.
        self.child.kill().map_err(|e| e.to_string())?;
        self.child.wait().map_err(|e| e.to_string())?;
        Ok(())
    }
}

fn dechunk(s: &str) -> String {
    let mut out = String::new();
    let mut rest = s;
    while let Some((size, tail)) = rest.split_once("\r\n") {
        let n = usize::from_str_radix(size.trim(), 16).unwrap_or(0);
        if n == 0 || tail.len() < n {
            break;
        }
        out.push_str(&tail[..n]);
        rest = tail[n..].trim_start_matches("\r\n");
    }
    out
}

fn completion(server: &Server, reader: &str) -> Result<BTreeMap<String, bool>, String> {
    let (status, list) = server.request("GET", &format!("/api/units?reader={reader}"), None)?;
    if status != 200 {
        return Err(format!("unit list returned {status}"));
    }
    Ok(list["units"]
        .as_array()
        .ok_or("unit list has no units")?
        .iter()
        .map(|u| (u["id"].as_str().unwrap_or_default().to_string(), u["complete"].as_bool().unwrap_or(false)))
        .collect())
}

fn durability(catalog_dir: &Path, scratch: &Path) -> Outcome {
    let log = scratch.join("annotations.jsonl");
    let server = Server::start(catalog_dir, &log)?;
    let reader = "reader-a";
    let before = completion(&server, reader)?;
    let unit = before.keys().next().ok_or("survey has no units")?.clone();
    let body = serde_json::json!({
        "annotation_id": "6f1c2b9e-4d3a-4f5b-9c7e-2a1b3c4d5e6f",
        "reader_id": reader,
        "recognizable": true,
        "phenomena": [
            {"description": "round bright mass", "lexicon_category": "mass_shape_round", "cancer_association": "malignant"},
            {"description": "fine specks", "lexicon_category": "calc_fine_pleomorphic", "cancer_association": "unclear"}
        ]
    })
    .to_string();
    let (status, _) = server.request("POST", &format!("/api/units/{unit}/annotations"), Some(&body))?;
    if status != 201 {
        return Err(format!("POST returned {status}, expected 201"));
    }
    server.kill_hard()?;

    let server = Server::start(catalog_dir, &log)?;
    let (_, report_after_restart) = server.request("GET", "/api/report", None)?;
    let after = completion(&server, reader)?;
    let (replay, _) = server.request("POST", &format!("/api/units/{unit}/annotations"), Some(&body))?;
    let (_, report_after_replay) = server.request("GET", "/api/report", None)?;
    server.kill_hard()?;

    let completed: Vec<&String> = after.iter().filter(|(_, &c)| c).map(|(u, _)| u).collect();
    if completed != vec![&unit] {
        return Err(format!("after restart completed units are {completed:?}, expected [{unit}]"));
    }
    let count = |r: &serde_json::Value, key: &str| r[key].as_u64().unwrap_or(u64::MAX);
    for (key, want) in [("annotation_count", 1), ("annotated_units", 1), ("entangled_units", 1)] {
        if count(&report_after_restart, key) != want {
            return Err(format!("after restart {key} = {}, expected {want}", report_after_restart[key]));
        }
    }
    if report_after_replay != report_after_restart || replay != 200 {
        return Err(format!("replay returned {replay} or changed the report"));
    }
    let lines = std::fs::read_to_string(&log).map_err(|e| e.to_string())?.lines().count();
    if lines != 1 {
        return Err(format!("log holds {lines} records, expected 1"));
    }
    Ok(format!(
        "annotation on {unit} survived SIGKILL: completion intact, report counts unchanged, replay idempotent"
    ))
}

// ---------------------------------------------------------------------------

fn timed(limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> Outcome {
    let t = Instant::now();
    let r = f();
    let el = t.elapsed();
    match (r, limit) {
        (Ok(_), Some(l)) if el > l => Err(format!("took {el:.1?}, limit {l:?}")),
        (Ok(s), _) => Ok(format!("{s} ({el:.1?})")),
        (Err(e), _) => Err(e),
    }
}

fn all_of(parts: Vec<Outcome>) -> Outcome {
    let mut oks = Vec::new();
    for p in parts {
        oks.push(p?);
    }
    Ok(oks.join("; "))
}

fn main() {
    let mut report = Report { failed: 0 };

    report.line(
        "gradient correctness",
        &timed(Some(Duration::from_secs(30)), || oracles::gradient_correctness(20_240_601)),
    );
    report.line(
        "oracle equivalence",
        &all_of(vec![
            oracles::conv_matches_reference(101, 200),
            oracles::topk_matches_full_sort(102, 150, 12),
            oracles::label_patch_matches_oracle(103, 1000),
            oracles::auc_matches_pair_count(104, 100),
        ]),
    );
    report.line("labeling-rule boundary", &oracles::labeling_boundary());
    report.line("quantile sandwich", &oracles::quantile_sandwich(105, 10));

    let e2e_names = ["end-to-end desk-scale run", "dissection sanity", "determinism", "durability"];
    if std::env::var_os("ACCEPTANCE_SKIP_E2E").is_some() {
        for name in e2e_names {
            report.skip(name, "ACCEPTANCE_SKIP_E2E is set");
        }
    } else {
        let root = tempfile::tempdir().expect("temp dir");
        let (first, second, survey) = (root.path().join("run1"), root.path().join("run2"), root.path().join("survey"));
        for d in [&first, &second, &survey] {
            std::fs::create_dir_all(d).expect("create run dir");
        }
        match pipeline(&first) {
            Ok(p) => {
                report.line(e2e_names[0], &end_to_end(&p));
                report.line(e2e_names[1], &dissection_sanity(&p));
                report.line(e2e_names[2], &determinism(&p, &second));
                report.line(e2e_names[3], &durability(&p.dir.join("catalog"), &survey));
            }
            Err(e) => {
                for name in e2e_names {
                    report.line(name, &Err(format!("pipeline failed: {e}")));
                }
            }
        }
    }

    if report.failed > 0 {
        let _ = writeln!(std::io::stderr(), "{} acceptance criteria failed", report.failed);
        std::process::exit(1);
    }
}

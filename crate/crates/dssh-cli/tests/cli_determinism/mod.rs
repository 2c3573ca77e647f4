//! Criterion 9 driver: every CLI command, re-run with an identical config
//! and seed, must produce byte-identical non-timing outputs on 1 thread and
//! on 8 threads.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

const CONFIG: &str = r#"{
  "seed": 11,
  "model": { "obs_dim": 1, "covariate_dim": 1, "latent_dim": 4, "rnn_hidden_dim": 8,
             "rnn_layers": 1, "head_hidden_dims": [8],
             "shrinkage": {"tau0": 1.0, "c0": 2.0, "c1": 1.0}, "sigma_floor": 1e-4 },
  "train": { "batch_size": 8, "num_steps": 12, "learning_rate": 0.001, "seed": 0,
             "checkpoint_every": 6, "grad_clip_norm": 10.0, "validation_fraction": 0.1 },
  "forecast": { "horizon": 6, "num_samples": 10, "quantiles": [0.05, 0.5, 0.95], "seed": 0 },
  "data": { "context_len": 30, "horizon": 6, "stride": 40, "period": null,
            "covariates": { "columns": ["u0"] } }
}"#;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dssh")
}

fn run_cmd(root: &Path, threads: usize, args: &[&str]) -> Result<String, String> {
    let output = Command::new(bin())
        .current_dir(root)
        .arg("--threads")
        .arg(threads.to_string())
        .args(args)
        .output()
        .map_err(|e| format!("spawn failed: {e}"))?;
    if !output.status.success() {
        return Err(format!(
            "command {:?} failed ({}): {}",
            args,
            output.status,
            String::from_utf8_lossy(&output.stderr)
        ));
    }
    Ok(String::from_utf8_lossy(&output.stdout).into_owned())
}

/// Files under `dir`, keyed by relative path, with timing columns stripped.
fn snapshot(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(cur) = stack.pop() {
        for entry in std::fs::read_dir(&cur).map_err(|e| e.to_string())? {
            let entry = entry.map_err(|e| e.to_string())?;
            let path = entry.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .expect("under root")
                .to_string_lossy()
                .into_owned();
            let mut bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
            if rel.ends_with("train_log.csv") {
                bytes = strip_wall_ms(&bytes);
            }
            out.insert(rel, bytes);
        }
    }
    Ok(out)
}

/// Drops the trailing wall_ms column from every line of a train log.
fn strip_wall_ms(bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(bytes);
    let mut out = String::with_capacity(text.len());
    for line in text.lines() {
        match line.rfind(',') {
            Some(pos) => out.push_str(&line[..pos]),
            None => out.push_str(line),
        }
        out.push('\n');
    }
    out.into_bytes()
}

fn compare(label: &str, a: &BTreeMap<String, Vec<u8>>, b: &BTreeMap<String, Vec<u8>>) -> Result<(), String> {
    let keys_a: Vec<&String> = a.keys().collect();
    let keys_b: Vec<&String> = b.keys().collect();
    if keys_a != keys_b {
        return Err(format!("{label}: file sets differ: {keys_a:?} vs {keys_b:?}"));
    }
    for (k, v) in a {
        if b[k] != *v {
            return Err(format!("{label}: file '{k}' differs"));
        }
    }
    Ok(())
}

pub fn run() -> Result<String, String> {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    std::fs::write(root.join("cfg.json"), CONFIG).map_err(|e| e.to_string())?;

    // each (name, argument template) runs three times: 1 thread, 1 thread
    // again (re-run), 8 threads — with {out} substituted per run
    let pipelines: Vec<(&str, Vec<String>)> = vec![
        (
            "simulate",
            vec![
                "simulate", "--config", "cfg.json", "--spec", "linear_ssm", "--out", "{out}",
                "--train-count", "24", "--test-count", "4", "--length", "40",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ),
        (
            "train",
            ["train", "--config", "cfg.json", "--data", "data_a", "--out", "{out}"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        ),
        (
            "forecast",
            [
                "forecast", "--config", "cfg.json", "--data", "data_a", "--checkpoint", "train_a",
                "--out", "{out}",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ),
        (
            "evaluate",
            [
                "evaluate", "--config", "cfg.json", "--data", "data_a", "--checkpoint", "train_a",
                "--out", "{out}",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ),
        (
            "ablate",
            [
                "ablate", "--config", "cfg.json", "--data", "data_a", "--checkpoint", "train_a",
                "--mode", "shrinkage", "--levels", "0.1,0.5", "--out", "{out}",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
        ),
    ];

    let mut compared = 0usize;
    for (name, template) in &pipelines {
        let variants = [("a", 1usize), ("b", 1), ("c8", 8)];
        for (tag, threads) in variants {
            let out_dir = format!("{name}_{tag}");
            let args: Vec<String> = template
                .iter()
                .map(|s| s.replace("{out}", &out_dir))
                .collect();
            let arg_refs: Vec<&str> = args.iter().map(String::as_str).collect();
            run_cmd(root, threads, &arg_refs)?;
        }
        let a = snapshot(&root.join(format!("{name}_a")))?;
        let b = snapshot(&root.join(format!("{name}_b")))?;
        let c = snapshot(&root.join(format!("{name}_c8")))?;
        compare(&format!("{name} re-run"), &a, &b)?;
        compare(&format!("{name} 1 vs 8 threads"), &a, &c)?;
        compared += a.len();
        // downstream commands read the first variant's outputs
        if *name == "simulate" {
            std::fs::rename(root.join("simulate_a"), root.join("data_a")).map_err(|e| e.to_string())?;
        }
    }

    // gradcheck emits no files; its stdout must be identical across reruns
    let g1 = run_cmd(root, 1, &["gradcheck"])?;
    let g2 = run_cmd(root, 8, &["gradcheck"])?;
    if g1 != g2 {
        return Err("gradcheck output differs between thread counts".into());
    }

    Ok(format!(
        "5 commands × (re-run + thread-count) byte-identical over {compared} files, gradcheck output stable"
    ))
}

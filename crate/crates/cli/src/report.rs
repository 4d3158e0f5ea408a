//! CSV and summary emission. Every CSV starts with `#`-prefixed metadata
//! lines (seed, git describe, config hash); every number in `summary.txt`
//! also appears in the experiment's CSV.

use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use crate::experiments::ExperimentOutput;

pub struct RunMeta {
    pub seed: u64,
    pub git_describe: String,
    pub config_hash: String,
}

impl RunMeta {
    pub fn new(seed: u64, config_text: &str) -> Self {
        let git_describe = std::process::Command::new("git")
            .args(["describe", "--always", "--dirty"])
            .output()
            .ok()
            .filter(|o| o.status.success())
            .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
            .unwrap_or_else(|| "unknown".to_string());
        let config_hash = format!("{:x}", Sha256::digest(config_text.as_bytes()));
        RunMeta {
            seed,
            git_describe,
            config_hash,
        }
    }

    fn header(&self) -> String {
        format!(
            "# seed: {}\n# git: {}\n# config_sha256: {}\n",
            self.seed, self.git_describe, self.config_hash
        )
    }
}

pub fn write_outputs(
    outputs: &[ExperimentOutput],
    meta: &RunMeta,
    out_dir: &Path,
) -> Result<Vec<String>> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("cannot create output directory {}", out_dir.display()))?;
    // fail on unwritable targets before any computation output is lost
    let probe = out_dir.join(".write_probe");
    fs::write(&probe, b"ok").with_context(|| format!("{} is not writable", out_dir.display()))?;
    fs::remove_file(&probe).ok();

    let mut written = Vec::new();
    for output in outputs {
        let file = out_dir.join(format!("{}.csv", output.name));
        let body = format!("{}{}", meta.header(), output.csv_body());
        fs::write(&file, body).with_context(|| format!("writing {}", file.display()))?;
        written.push(file.display().to_string());
    }
    let summary = summary_text(outputs, meta);
    let file = out_dir.join("summary.txt");
    fs::write(&file, summary).with_context(|| format!("writing {}", file.display()))?;
    written.push(file.display().to_string());
    Ok(written)
}

pub fn summary_text(outputs: &[ExperimentOutput], meta: &RunMeta) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "run summary (seed {}, git {}, config {})\n\n",
        meta.seed, meta.git_describe, meta.config_hash
    ));
    let mut n_checks = 0usize;
    let mut n_failed = 0usize;
    for output in outputs {
        out.push_str(&format!("[{}] kind={}\n", output.name, output.kind));
        let mut any = false;
        for check in output.checks() {
            any = true;
            n_checks += 1;
            let verdict = if check.pass == Some(true) {
                "PASS"
            } else {
                n_failed += 1;
                "FAIL"
            };
            out.push_str(&format!("  {verdict} {}: value={}", check.label, check.value));
            if let Some(t) = check.target {
                out.push_str(&format!(" target={t}"));
            }
            if let Some(tol) = check.tolerance {
                out.push_str(&format!(" tol={tol}"));
            }
            if let Some(se) = check.se {
                out.push_str(&format!(" se={se}"));
            }
            if let Some(z) = check.z {
                out.push_str(&format!(" z={z}"));
            }
            out.push('\n');
        }
        if !any {
            out.push_str("  (no checks; data export only)\n");
        }
    }
    out.push_str(&format!(
        "\n{} checks, {} failed{}\n",
        n_checks,
        n_failed,
        if n_checks == 0 { " (zero checks declared)" } else { "" }
    ));
    out
}

//! Run manifests: the single file that records what a command did and how to
//! do it again.
//!
//! All metadata (command, run id, timestamp, suite fingerprint, emitted
//! files, preset verdicts) is written as `#` comment lines above the fully
//! resolved `key = value` configuration echo, so a manifest is itself a valid
//! config: re-running the same subcommand with `--config manifest.txt`
//! reproduces every emitted file byte for byte. The run id hashes the command
//! and resolved configuration, so it is stable across reruns; only the
//! timestamp line varies.

use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::{Path, PathBuf};

pub struct Manifest {
    command: String,
    resolved: Vec<(String, String)>,
    fingerprint: Option<String>,
    emitted: Vec<String>,
    checks: Vec<(String, bool, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

impl Manifest {
    pub fn new(command: &str, resolved: Vec<(String, String)>) -> Self {
        Manifest {
            command: command.to_string(),
            resolved,
            fingerprint: None,
            emitted: Vec::new(),
            checks: Vec::new(),
        }
    }

    /// Content hash of the serialized task suite the run operated on.
    pub fn set_suite_fingerprint(&mut self, suite_text: &str) {
        self.fingerprint = Some(format!("sha256:{}", sha256_hex(suite_text.as_bytes())));
    }

    pub fn record_file(&mut self, name: &str) {
        self.emitted.push(name.to_string());
    }

    /// A preset's machine-checked pass/fail predicate.
    pub fn record_check(&mut self, name: &str, pass: bool, detail: &str) {
        self.checks.push((name.to_string(), pass, detail.to_string()));
    }

    pub fn all_checks_pass(&self) -> bool {
        self.checks.iter().all(|(_, pass, _)| *pass)
    }

    fn run_id(&self) -> String {
        let mut body = self.command.clone();
        for (k, v) in &self.resolved {
            body.push('\n');
            body.push_str(k);
            body.push('=');
            body.push_str(v);
        }
        sha256_hex(body.as_bytes())[..12].to_string()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str("# tracelab run manifest\n");
        out.push_str(&format!(
            "# artifact: tracelab {}\n",
            env!("CARGO_PKG_VERSION")
        ));
        out.push_str(&format!("# command: {}\n", self.command));
        out.push_str(&format!("# run: {}\n", self.run_id()));
        out.push_str(&format!(
            "# time: {}\n",
            chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
        ));
        if let Some(fp) = &self.fingerprint {
            out.push_str(&format!("# suite: {fp}\n"));
        }
        for name in &self.emitted {
            out.push_str(&format!("# emitted: {name}\n"));
        }
        for (name, pass, detail) in &self.checks {
            out.push_str(&format!(
                "# check {name}: {} - {detail}\n",
                if *pass { "PASS" } else { "FAIL" }
            ));
        }
        for (k, v) in &self.resolved {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<PathBuf> {
        let path = dir.join("manifest.txt");
        let mut file = std::fs::File::create(&path)?;
        file.write_all(self.render().as_bytes())?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;

    #[test]
    fn manifest_parses_back_as_a_config() {
        let mut m = Manifest::new(
            "train",
            vec![
                ("suite.family".into(), "modchain".into()),
                ("train.K".into(), "8".into()),
            ],
        );
        m.set_suite_fingerprint("suite body");
        m.record_file("metrics.csv");
        m.record_check("marginal-improved", true, "0.1 -> 0.9");
        let text = m.render();
        let cfg = Config::parse(&text).unwrap();
        assert_eq!(cfg.get_usize("train.K", 0, 1, 64).unwrap(), 8);
        assert_eq!(
            cfg.get_choice("suite.family", "parity", &["modchain", "parity"])
                .unwrap(),
            "modchain"
        );
        cfg.finish().unwrap();
    }

    #[test]
    fn run_id_is_stable_and_config_sensitive() {
        let a = Manifest::new("train", vec![("train.K".into(), "8".into())]);
        let b = Manifest::new("train", vec![("train.K".into(), "8".into())]);
        let c = Manifest::new("train", vec![("train.K".into(), "4".into())]);
        assert_eq!(a.run_id(), b.run_id());
        assert_ne!(a.run_id(), c.run_id());
    }
}

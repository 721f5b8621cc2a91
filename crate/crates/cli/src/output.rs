//! Output files. Every data file carries the run manifest (config, hash,
//! seed, artifact list, tool version) but no timestamps; those go to
//! `manifest.json` alone, so re-runs reproduce data files byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub artifacts: Vec<String>,
    pub config: Value,
}

/// SHA-256 of the command name and the compact JSON of the resolved config.
pub fn config_hash(command: &str, config: &Value) -> Result<String> {
    let mut h = Sha256::new();
    h.update(command.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(config)?);
    Ok(hex::encode(h.finalize()))
}

pub struct Run {
    dir: PathBuf,
    manifest: RunManifest,
    started: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl Run {
    pub fn new(dir: &Path, command: &str, config: &impl Serialize, seed: u64, artifacts: Vec<String>) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let config = serde_json::to_value(config)?;
        let manifest = RunManifest {
            tool: "duallora".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash: config_hash(command, &config)?,
            seed,
            artifacts,
            config,
        };
        Ok(Self { dir: dir.to_path_buf(), manifest, started: unix_now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn manifest_line(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.manifest)?)
    }

    /// `# manifest {...}` then the header and rows.
    pub fn write_csv(&self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<PathBuf> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        let body = w.into_inner().map_err(|e| e.into_error())?;
        let mut out = format!("# manifest {}\n", self.manifest_line()?).into_bytes();
        out.extend(body);
        let path = self.path(name);
        fs::write(&path, out)?;
        Ok(path)
    }

    /// Pretty JSON object `{"manifest": ..., "data": ...}`.
    pub fn write_json(&self, name: &str, data: &impl Serialize) -> Result<PathBuf> {
        let v = json!({ "manifest": self.manifest, "data": data });
        let path = self.path(name);
        fs::write(&path, serde_json::to_string_pretty(&v)? + "\n")?;
        Ok(path)
    }

    /// First line `{"manifest": ...}`, then one compact JSON value per line.
    pub fn write_jsonl(&self, name: &str, lines: &[Value]) -> Result<PathBuf> {
        let mut s = serde_json::to_string(&json!({ "manifest": self.manifest }))? + "\n";
        for l in lines {
            s.push_str(&serde_json::to_string(l)?);
            s.push('\n');
        }
        let path = self.path(name);
        fs::write(&path, s)?;
        Ok(path)
    }

    /// Embeds the manifest in a `<metadata>` element after the root tag.
    pub fn write_svg(&self, name: &str, svg: &str) -> Result<PathBuf> {
        let meta = format!("<metadata>{}</metadata>", crate::svg::escape(&self.manifest_line()?));
        let out = match svg.find('>') {
            Some(i) => format!("{}\n{meta}{}", &svg[..=i], &svg[i + 1..]),
            None => svg.to_string(),
        };
        let path = self.path(name);
        fs::write(&path, out)?;
        Ok(path)
    }

    /// Writes `manifest.json` with start and finish timestamps.
    pub fn finish(self) -> Result<()> {
        let v = json!({
            "manifest": self.manifest,
            "started_unix": self.started,
            "finished_unix": unix_now(),
        });
        fs::write(self.dir.join("manifest.json"), serde_json::to_string_pretty(&v)? + "\n")?;
        Ok(())
    }
}

/// Header and rows of a CSV written by [`Run::write_csv`].
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let header = r.headers()?.iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.map(|r| r.iter().map(String::from).collect())).collect::<std::result::Result<_, _>>()?;
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_manifest_and_commas() {
        let dir = tempfile::tempdir().unwrap();
        let run = Run::new(dir.path(), "test", &json!({"a": 1}), 0, vec!["t.csv".into()]).unwrap();
        let rows = vec![vec!["moe-[2,2]".to_string(), "1.5".to_string()]];
        let p = run.write_csv("t.csv", &["variant", "x"], &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# manifest {"));
        let (h, r) = read_csv(&p).unwrap();
        assert_eq!(h, ["variant", "x"]);
        assert_eq!(r, rows);
    }

    #[test]
    fn hash_depends_on_config_and_command() {
        let a = config_hash("x", &json!({"k": 1})).unwrap();
        assert_eq!(a, config_hash("x", &json!({"k": 1})).unwrap());
        assert_ne!(a, config_hash("x", &json!({"k": 2})).unwrap());
        assert_ne!(a, config_hash("y", &json!({"k": 1})).unwrap());
        assert_eq!(a.len(), 64);
    }
}

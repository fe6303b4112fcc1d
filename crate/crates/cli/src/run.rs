//! Run directories: config snapshot, checkpoint and per-epoch metrics.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use disc_core::disc::EpochMetrics;

use crate::config::RunConfig;

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "epoch,L_D,L_G,total,train_acc,val_acc,wall_seconds";

pub struct RunDir {
    pub path: PathBuf,
}

impl RunDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        RunDir { path: path.into() }
    }

    pub fn config(&self) -> PathBuf {
        self.path.join(CONFIG_FILE)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path.join(CHECKPOINT_FILE)
    }

    pub fn metrics(&self) -> PathBuf {
        self.path.join(METRICS_FILE)
    }

    /// Fresh run: refuses to overwrite an existing checkpoint.
    pub fn create(&self, config: &RunConfig) -> Result<()> {
        if self.checkpoint().exists() {
            bail!(
                "{} already holds a run; pass --resume {} to continue it",
                self.path.display(),
                self.path.display()
            );
        }
        std::fs::create_dir_all(&self.path)
            .with_context(|| format!("creating {}", self.path.display()))?;
        self.write_config(config)?;
        std::fs::write(self.metrics(), format!("{METRICS_HEADER}\n"))?;
        Ok(())
    }

    pub fn write_config(&self, config: &RunConfig) -> Result<()> {
        std::fs::write(self.config(), config.to_json())
            .with_context(|| format!("writing {}", self.config().display()))
    }

    pub fn read_config(&self) -> Result<RunConfig> {
        let text = std::fs::read_to_string(self.config())
            .with_context(|| format!("reading {}", self.config().display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", self.config().display()))
    }

    /// Drops rows for epochs at or after `epoch`, which a resumed run
    /// will produce again.
    pub fn truncate_metrics(&self, epoch: usize) -> Result<()> {
        let path = self.metrics();
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        if lines.next() != Some(METRICS_HEADER) {
            bail!("{}: unexpected header", path.display());
        }
        let mut out = format!("{METRICS_HEADER}\n");
        for (i, line) in lines.enumerate() {
            let e: usize = line
                .split(',')
                .next()
                .and_then(|f| f.parse().ok())
                .with_context(|| format!("{}: malformed row {}", path.display(), i + 2))?;
            if e < epoch {
                out.push_str(line);
                out.push('\n');
            }
        }
        std::fs::write(&path, out)?;
        Ok(())
    }

    pub fn append_metrics(&self, m: &EpochMetrics, wall_seconds: Option<f64>) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(self.metrics())?;
        f.write_all(metrics_row(m, wall_seconds).as_bytes())?;
        f.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// One CSV row; floats use the shortest representation that parses back
/// to the same value.
pub fn metrics_row(m: &EpochMetrics, wall_seconds: Option<f64>) -> String {
    format!(
        "{},{},{},{},{},{},{}\n",
        m.epoch,
        m.l_d,
        m.l_g,
        m.total,
        m.train_acc,
        opt(m.val_acc),
        opt(wall_seconds)
    )
}

pub fn exists(path: &Path) -> bool {
    path.join(CHECKPOINT_FILE).exists()
}

#[cfg(test)]
mod tests {
    use super::*;
    use disc_core::disc::TrainConfig;

    fn m(epoch: usize) -> EpochMetrics {
        EpochMetrics {
            epoch,
            l_d: 0.1 + epoch as f64,
            l_g: 0.0,
            total: 1.0 / 3.0,
            train_acc: 0.5,
            val_acc: if epoch == 0 { None } else { Some(0.25) },
        }
    }

    #[test]
    fn rows_round_trip_floats() {
        let row = metrics_row(&m(2), None);
        assert_eq!(row, "2,2.1,0,0.3333333333333333,0.5,0.25,\n");
        let total: f64 = row.split(',').nth(3).unwrap().parse().unwrap();
        assert_eq!(total.to_bits(), (1.0f64 / 3.0).to_bits());
        assert_eq!(
            metrics_row(&m(0), Some(1.5)),
            "0,0.1,0,0.3333333333333333,0.5,,1.5\n"
        );
    }

    #[test]
    fn truncate_keeps_earlier_epochs() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path().join("r"));
        let rc = RunConfig::new("d".into(), "s".into(), "x".into(), 4, TrainConfig::desk());
        run.create(&rc).unwrap();
        for e in 0..5 {
            run.append_metrics(&m(e), None).unwrap();
        }
        run.truncate_metrics(3).unwrap();
        let text = std::fs::read_to_string(run.metrics()).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().starts_with("2,"));
        assert_eq!(run.read_config().unwrap(), rc);
        std::fs::write(run.checkpoint(), "{}").unwrap();
        assert!(run.create(&rc).is_err());
        assert!(exists(&run.path));
    }
}

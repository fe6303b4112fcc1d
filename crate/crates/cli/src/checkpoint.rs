//! Model checkpoints as self-describing JSON.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use disc_core::autodiff::Tensor;
use disc_core::disc::{Architecture, Model};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;

/// All randomness is drawn from counter-keyed streams, so the seed and the
/// next epoch index fully determine what comes next.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRecord {
    pub name: String,
    pub shape: [usize; 2],
    pub value: Vec<f64>,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub architecture: Architecture,
    /// Completed epochs.
    pub epoch: usize,
    pub config_hash: String,
    pub rng: RngState,
    pub params: Vec<ParamRecord>,
}

impl Checkpoint {
    pub fn capture(model: &Model, epoch: usize, config_hash: &str, seed: u64) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape(),
                value: p.value.data().to_vec(),
                first_moment: p.first_moment.clone(),
                second_moment: p.second_moment.clone(),
                step: p.step,
            })
            .collect();
        Checkpoint {
            format_version: FORMAT_VERSION,
            architecture: model.arch,
            epoch,
            config_hash: config_hash.to_string(),
            rng: RngState {
                seed,
                next_epoch: epoch,
            },
            params,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serialises");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text).context("malformed checkpoint")?;
        ensure!(
            c.format_version == FORMAT_VERSION,
            "checkpoint format version {} is not supported (expected {FORMAT_VERSION})",
            c.format_version
        );
        ensure!(
            c.rng.next_epoch == c.epoch,
            "checkpoint rng.next_epoch {} disagrees with epoch {}",
            c.rng.next_epoch,
            c.epoch
        );
        for p in &c.params {
            let n = p.shape[0] * p.shape[1];
            ensure!(
                p.value.len() == n && p.first_moment.len() == n && p.second_moment.len() == n,
                "parameter `{}`: shape {}x{} needs {n} values, found {}/{}/{}",
                p.name,
                p.shape[0],
                p.shape[1],
                p.value.len(),
                p.first_moment.len(),
                p.second_moment.len()
            );
        }
        Ok(c)
    }

    /// Written through a temporary file so an interrupted save never
    /// leaves a truncated checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, self.to_json())
            .with_context(|| format!("writing {}", tmp.display()))?;
        std::fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }

    /// Accepts a checkpoint file or a run directory containing one.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(crate::run::CHECKPOINT_FILE)
        } else {
            path.to_path_buf()
        };
        let text = std::fs::read_to_string(&file)
            .with_context(|| format!("reading {}", file.display()))?;
        Self::from_json(&text).with_context(|| format!("loading {}", file.display()))
    }

    /// Rebuild the model; every parameter of the architecture must be
    /// present exactly once with the layout the architecture expects.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::init(self.architecture, self.rng.seed)
            .context("checkpoint architecture is invalid")?;
        let mut by_name: HashMap<&str, &ParamRecord> = HashMap::new();
        for p in &self.params {
            if by_name.insert(p.name.as_str(), p).is_some() {
                bail!("parameter `{}` appears twice", p.name);
            }
        }
        ensure!(
            by_name.len() == model.store.len(),
            "checkpoint has {} parameters, architecture needs {}",
            by_name.len(),
            model.store.len()
        );
        let ids: Vec<_> = model
            .store
            .iter()
            .map(|(id, p)| (id, p.name.clone(), p.value.shape()))
            .collect();
        for (id, name, shape) in ids {
            let rec = by_name
                .get(name.as_str())
                .with_context(|| format!("parameter `{name}` missing"))?;
            ensure!(
                rec.shape == shape,
                "parameter `{name}`: checkpoint shape {}x{}, architecture expects {}x{}",
                rec.shape[0],
                rec.shape[1],
                shape[0],
                shape[1]
            );
            let p = model.store.get_mut(id);
            p.value = Tensor::new(shape[0], shape[1], rec.value.clone())?;
            p.first_moment = rec.first_moment.clone();
            p.second_moment = rec.second_moment.clone();
            p.step = rec.step;
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use disc_core::disc::{Mode, TrainConfig};

    fn model() -> Model {
        let cfg = TrainConfig {
            mode: Mode::Disc,
            ..TrainConfig::desk()
        };
        let mut m = Model::init(cfg.architecture(4), 11).unwrap();
        // Values that only survive an exact round trip.
        for (i, p) in m.store.iter_mut().enumerate() {
            p.first_moment
                .iter_mut()
                .for_each(|v| *v = 0.1 + i as f64 / 3.0);
            p.second_moment
                .iter_mut()
                .for_each(|v| *v = f64::MIN_POSITIVE * 3.0);
            p.step = 7;
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact_and_byte_identical() {
        let m = model();
        let c = Checkpoint::capture(&m, 3, "h", 11);
        let text = c.to_json();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back.to_json(), text);
        let m2 = back.model().unwrap();
        for ((_, a), (_, b)) in m.store.iter().zip(m2.store.iter()) {
            let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a.value.data()), bits(b.value.data()));
            assert_eq!(bits(&a.first_moment), bits(&b.first_moment));
            assert_eq!(bits(&a.second_moment), bits(&b.second_moment));
            assert_eq!(a.step, b.step);
        }
        assert_eq!(m2, m);
    }

    #[test]
    fn layout_errors_are_rejected() {
        let c = Checkpoint::capture(&model(), 0, "h", 11);
        let mut bad = c.clone();
        bad.params[0].shape = [1, 1];
        assert!(Checkpoint::from_json(&bad.to_json()).is_err());
        let mut bad = c.clone();
        let n = bad.params[0].value.len();
        bad.params[0].shape = [n, 1];
        let err = Checkpoint::from_json(&bad.to_json())
            .unwrap()
            .model()
            .unwrap_err()
            .to_string();
        assert!(err.contains("architecture expects"), "{err}");
        let mut bad = c.clone();
        bad.params.pop();
        assert!(bad.model().is_err());
        let mut bad = c.clone();
        bad.params[1].name = bad.params[0].name.clone();
        assert!(bad.model().is_err());
        let mut bad = c;
        bad.format_version = 99;
        assert!(Checkpoint::from_json(&bad.to_json()).is_err());
    }
}

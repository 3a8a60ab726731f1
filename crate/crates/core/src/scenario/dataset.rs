use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::generator::{generate_scenario_of_kind, GeneratorConfig, ScenarioKind};
use super::io::{load_scenario, scenario_to_json};
use super::Scenario;
use crate::error::{Error, Result};
use crate::par;

pub const MANIFEST_FILE: &str = "manifest.json";
const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: u32,
    pub seed: u64,
    pub config_digest: String,
    pub config: GeneratorConfig,
    /// Scenario paths relative to the manifest directory.
    pub splits: BTreeMap<Split, Vec<PathBuf>>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Parse { field: path.display().to_string(), message: e.to_string() })?;
        if m.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::Schema { found: m.schema_version, expected: MANIFEST_SCHEMA_VERSION });
        }
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.check_disjoint()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serialization is infallible");
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (split, paths) in &self.splits {
            for p in paths {
                if !seen.insert(p) {
                    return Err(Error::invariant(
                        format!("splits.{split:?}"),
                        format!("{} listed more than once", p.display()),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn paths(&self, split: Split) -> Vec<PathBuf> {
        self.splits.get(&split).map(|ps| ps.iter().map(|p| self.root.join(p)).collect()).unwrap_or_default()
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<(PathBuf, Scenario)>> {
        let paths = self.paths(split);
        let loaded = par::map(&paths, |p| load_scenario(p).map(|s| (p.clone(), s)));
        loaded.into_iter().collect()
    }
}

/// Kind of the `index`-th scenario: Stop scenarios are spread evenly so every
/// contiguous split keeps the configured balance.
fn kind_for(cfg: &GeneratorConfig, index: usize) -> ScenarioKind {
    let hits = |f: f64, i: usize| ((i + 1) as f64 * f).floor() > (i as f64 * f).floor();
    if !hits(cfg.stop_fraction, index) {
        return ScenarioKind::Go;
    }
    let stop_rank = ((index + 1) as f64 * cfg.stop_fraction).floor() as usize - 1;
    if hits(cfg.group_fraction, stop_rank) {
        ScenarioKind::GroupStop
    } else {
        ScenarioKind::Stop
    }
}

/// Writes `n` scenarios (seed + index each) and a manifest into `out_dir`.
pub fn generate_dataset(cfg: &GeneratorConfig, n: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if n == 0 {
        return Err(Error::Config("dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let docs = par::map_range(n, |i| {
        generate_scenario_of_kind(cfg, kind_for(cfg, i), seed.wrapping_add(i as u64)).map(|s| scenario_to_json(&s))
    });

    let n_train = (n as f64 * cfg.train_fraction).round() as usize;
    let n_val = ((n as f64 * cfg.val_fraction).round() as usize).min(n - n_train);
    let mut splits: BTreeMap<Split, Vec<PathBuf>> = BTreeMap::new();
    for (i, doc) in docs.into_iter().enumerate() {
        let doc = doc?;
        let name = PathBuf::from(format!("scenario_{i:05}.json"));
        let path = out_dir.join(&name);
        fs::write(&path, doc).map_err(|e| Error::io(&path, e))?;
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        splits.entry(split).or_default().push(name);
    }

    let manifest = DatasetManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        seed,
        config_digest: cfg.digest(),
        config: cfg.clone(),
        splits,
        root: out_dir.to_path_buf(),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

//! TOML configuration files for runs, matrices and grids.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xeroalign_core::data::synth::{synth_generate, SynthSpec};
use xeroalign_core::data::Corpus;
use xeroalign_core::encoder::Preset;
use xeroalign_core::training::{Mode, TrainConfig};

use crate::{relative_to, CliError, CliResult};

/// The `[data]` table: a directory of JSONL files, or a generator spec (the
/// shipped default when neither is given).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
}

impl DataSource {
    pub fn load(&self, base: Option<&Path>) -> CliResult<Corpus> {
        match (&self.dir, &self.spec) {
            (Some(_), Some(_)) => Err(CliError::Config("give data.dir or data.spec, not both".into())),
            (Some(dir), None) => Ok(Corpus::load_dir(relative_to(base, dir))?),
            (None, Some(spec)) => {
                let spec = SynthSpec::load(relative_to(base, spec))?;
                Ok(synth_generate(&spec)?.corpus)
            }
            (None, None) => Ok(synth_generate(&SynthSpec::default_spec())?.corpus),
        }
    }
}

pub fn read_toml<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// A single training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub data: DataSource,
    pub train: TrainConfig,
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_presets() -> Vec<Preset> {
    vec![Preset::Tiny]
}

/// One configuration row of a matrix; any other key overrides the shared
/// `[train]` table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    /// Row name; defaults to the mode, suffixed with alignment languages.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(flatten)]
    pub overrides: toml::Table,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixConfig {
    #[serde(default)]
    pub data: DataSource,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_presets")]
    pub presets: Vec<Preset>,
    /// Settings shared by every cell.
    #[serde(default)]
    pub train: toml::Table,
    pub cells: Vec<CellSpec>,
}

/// A fully resolved matrix cell.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: String,
    pub preset: Preset,
    pub seed: u64,
    pub config: TrainConfig,
}

impl Cell {
    pub fn dir_name(&self) -> String {
        format!("{}__{}__seed{}", self.preset.name(), self.label, self.seed)
    }
}

/// Builds a [`TrainConfig`] from the shared table plus overrides.
pub fn resolve_train(
    base: &toml::Table,
    overrides: &toml::Table,
    preset: Preset,
    seed: u64,
) -> CliResult<TrainConfig> {
    let mut t = base.clone();
    for (k, v) in overrides {
        t.insert(k.clone(), v.clone());
    }
    for key in ["seed", "preset"] {
        if t.contains_key(key) {
            return Err(CliError::Config(format!("`{key}` is set by the matrix, not per cell")));
        }
    }
    t.insert("seed".into(), toml::Value::Integer(seed as i64));
    t.insert("preset".into(), toml::Value::String(preset.name().into()));
    let cfg: TrainConfig = toml::Value::Table(t)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

fn default_label(cfg: &TrainConfig) -> String {
    if cfg.align_languages.is_empty() {
        cfg.mode.name().to_string()
    } else {
        format!("{}-{}", cfg.mode.name(), cfg.align_languages.join("+"))
    }
}

impl MatrixConfig {
    /// Expands rows, presets and seeds into validated, unique cells.
    pub fn cells(&self) -> CliResult<Vec<Cell>> {
        if self.seeds.is_empty() || self.presets.is_empty() || self.cells.is_empty() {
            return Err(CliError::Config("matrix needs seeds, presets and cells".into()));
        }
        let mut out: Vec<Cell> = Vec::new();
        for preset in &self.presets {
            for spec in &self.cells {
                for &seed in &self.seeds {
                    let config = resolve_train(&self.train, &spec.overrides, *preset, seed)?;
                    let label = spec.label.clone().unwrap_or_else(|| default_label(&config));
                    if label.is_empty() || label.contains(['/', '\\']) {
                        return Err(CliError::Config(format!("invalid label `{label}`")));
                    }
                    let cell = Cell {
                        label,
                        preset: *preset,
                        seed,
                        config,
                    };
                    if out.iter().any(|c| c.dir_name() == cell.dir_name()) {
                        return Err(CliError::Config(format!("duplicate cell {}", cell.dir_name())));
                    }
                    out.push(cell);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    #[serde(default)]
    pub data: DataSource,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub preset: Preset,
    /// Settings shared by every run; `mode` is set by the grid.
    #[serde(default)]
    pub train: toml::Table,
}

impl GridConfig {
    /// Zero-shot baselines plus one single-language alignment row per target.
    pub fn cells(&self, targets: &[String]) -> CliResult<Vec<Cell>> {
        if targets.len() < 2 {
            return Err(CliError::Config(format!(
                "the one-language grid needs at least 2 target languages, corpus has {}",
                targets.len()
            )));
        }
        if self.seeds.is_empty() {
            return Err(CliError::Config("grid needs at least one seed".into()));
        }
        if self.train.contains_key("mode") || self.train.contains_key("align_languages") {
            return Err(CliError::Config("grid sets `mode` and `align_languages` itself".into()));
        }
        let mut rows: Vec<(String, toml::Table)> = Vec::new();
        let mut zs = toml::Table::new();
        zs.insert("mode".into(), Mode::ZeroShot.name().into());
        rows.push((Mode::ZeroShot.name().into(), zs));
        for lang in targets {
            let mut t = toml::Table::new();
            t.insert("mode".into(), Mode::XeroAlign.name().into());
            t.insert("align_languages".into(), toml::Value::Array(vec![lang.clone().into()]));
            rows.push((format!("align-{lang}"), t));
        }
        let mut out = Vec::new();
        for (label, overrides) in rows {
            for &seed in &self.seeds {
                out.push(Cell {
                    label: label.clone(),
                    preset: self.preset,
                    seed,
                    config: resolve_train(&self.train, &overrides, self.preset, seed)?,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_expands_and_rejects_duplicates() {
        let m: MatrixConfig = toml::from_str(
            r#"
seeds = [1, 2]
[train]
epochs = 2
[[cells]]
mode = "zero_shot"
[[cells]]
mode = "xeroalign"
align_languages = ["xa"]
"#,
        )
        .unwrap();
        let cells = m.cells().unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[2].label, "xeroalign-xa");
        assert_eq!(cells[3].config.seed, 2);
        assert_eq!(cells[0].config.epochs, 2);

        let mut dup = m.clone();
        dup.cells.push(dup.cells[0].clone());
        assert!(matches!(dup.cells(), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_cell_is_a_config_error() {
        let m: MatrixConfig = toml::from_str(
            r#"
[[cells]]
mode = "zero_shot"
align_languages = ["xa"]
"#,
        )
        .unwrap();
        assert!(matches!(m.cells(), Err(CliError::Config(_))));
        let m: MatrixConfig = toml::from_str("[[cells]]\nmode = \"nope\"\n").unwrap();
        assert!(matches!(m.cells(), Err(CliError::Config(_))));
    }

    #[test]
    fn grid_needs_two_targets() {
        let g: GridConfig = toml::from_str("seeds = [0]").unwrap();
        assert!(matches!(g.cells(&["xa".into()]), Err(CliError::Config(_))));
        let cells = g.cells(&["xa".into(), "xb".into(), "xc".into()]).unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[1].config.align_languages, vec!["xa".to_string()]);
    }

    #[test]
    fn shipped_configs_expand() {
        let run: RunConfig = toml::from_str(include_str!("../configs/run.toml")).unwrap();
        run.train.validate().unwrap();
        let m: MatrixConfig = toml::from_str(include_str!("../configs/matrix.toml")).unwrap();
        assert_eq!(m.cells().unwrap().len(), 7 * 2 * 5);
        let g: GridConfig = toml::from_str(include_str!("../configs/grid.toml")).unwrap();
        assert_eq!(g.cells(&["xa".into(), "xb".into(), "xc".into()]).unwrap().len(), 4 * 5);
    }
}

//! Run configuration: a flat `section.key = value` text format covering
//! the model plan, the scattering settings, the training hyperparameters
//! and the data source.
//!
//! Parsing is strict: unknown or duplicate keys are errors that name the
//! key, so a typo cannot silently fall back to a default. Serialization
//! writes keys in a fixed order and floats in shortest round-trip form, so
//! parse -> serialize -> parse is the identity.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::{AblationMode, HfSubvariant, HfVariant};
use crate::network::SpecOptions;
use crate::train::TrainConfig;

/// The `model.*` section: the backbone plan and fusion variant.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub resolution: usize,
    pub input_channels: usize,
    pub num_classes: usize,
    pub variant: HfVariant,
    pub subvariant: HfSubvariant,
    pub width_mult: f64,
    pub depth_mult: f64,
    pub se_reduction: usize,
    pub survival_p: f64,
}

/// The `scattering.*` section: scales of the two fusion rows plus the
/// shared angle/phase grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ScatteringSection {
    pub j1: usize,
    pub j2: usize,
    pub angles: usize,
    pub phases: usize,
    pub include_order0: bool,
}

/// The `data.*` section: where samples come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSection {
    /// Seeded oriented-texture generator.
    Synthetic {
        classes: usize,
        per_class: usize,
        seed: u64,
    },
    /// Folder with `train/` and `test/` subtrees of per-class images.
    Folder { path: String },
}

/// One experiment: model, scattering, training and data settings plus the
/// output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelSection,
    pub scattering: ScatteringSection,
    pub train: TrainConfig,
    pub data: DataSection,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelSection {
                resolution: 32,
                input_channels: 1,
                num_classes: 8,
                variant: HfVariant::E,
                subvariant: HfSubvariant::Plain0,
                width_mult: 1.0,
                depth_mult: 1.0,
                se_reduction: 4,
                survival_p: 0.8,
            },
            scattering: ScatteringSection {
                j1: 2,
                j2: 3,
                angles: 8,
                phases: 4,
                include_order0: true,
            },
            train: TrainConfig::default(),
            data: DataSection::Synthetic {
                classes: 8,
                per_class: 250,
                seed: 0,
            },
            out_dir: "runs/out".to_string(),
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse value '{value}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got '{value}'"
        ))),
    }
}

fn parse_variant(key: &str, value: &str) -> Result<HfVariant> {
    match value {
        "E" => Ok(HfVariant::E),
        "Z" => Ok(HfVariant::Z),
        "H" => Ok(HfVariant::H),
        _ => Err(Error::Config(format!(
            "{key}: expected E, Z or H, got '{value}'"
        ))),
    }
}

fn variant_label(v: HfVariant) -> &'static str {
    match v {
        HfVariant::E => "E",
        HfVariant::Z => "Z",
        HfVariant::H => "H",
    }
}

fn parse_ablation(key: &str, value: &str) -> Result<AblationMode> {
    match value {
        "none" => Ok(AblationMode::None),
        "scat" => Ok(AblationMode::ScatDisabled),
        "net" => Ok(AblationMode::NetDisabled),
        _ => Err(Error::Config(format!(
            "{key}: expected none, scat or net, got '{value}'"
        ))),
    }
}

pub fn ablation_label(a: AblationMode) -> &'static str {
    match a {
        AblationMode::None => "none",
        AblationMode::ScatDisabled => "scat",
        AblationMode::NetDisabled => "net",
    }
}

impl RunConfig {
    /// Parses the flat `section.key = value` format.
    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut seen: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected 'section.key = value', got '{line}'",
                    lineno + 1
                ))
            })?;
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if !key.contains('.') {
                return Err(Error::Config(format!(
                    "line {}: key '{key}' is missing its section prefix",
                    lineno + 1
                )));
            }
            if seen.insert(key.clone(), value).is_some() {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
        }

        let mut cfg = RunConfig::default();
        // The data source key switches which sibling keys are meaningful,
        // so resolve it before the field loop.
        if let Some(source) = seen.remove("data.source") {
            cfg.data = match source.as_str() {
                "synthetic" => DataSection::Synthetic {
                    classes: 8,
                    per_class: 250,
                    seed: 0,
                },
                "folder" => DataSection::Folder {
                    path: String::new(),
                },
                _ => {
                    return Err(Error::Config(format!(
                        "data.source: expected synthetic or folder, got '{source}'"
                    )))
                }
            };
        }
        for (key, value) in seen {
            cfg.apply(&key, &value)?;
        }
        if let DataSection::Folder { path } = &cfg.data {
            if path.is_empty() {
                return Err(Error::Config(
                    "data.path: required when data.source = folder".into(),
                ));
            }
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "model.resolution" => self.model.resolution = parse_value(key, value)?,
            "model.input_channels" => self.model.input_channels = parse_value(key, value)?,
            "model.num_classes" => self.model.num_classes = parse_value(key, value)?,
            "model.variant" => self.model.variant = parse_variant(key, value)?,
            "model.subvariant" => {
                let label: u8 = parse_value(key, value)?;
                self.model.subvariant = HfSubvariant::from_label(label)
                    .map_err(|e| Error::Config(format!("{key}: {e}")))?;
            }
            "model.width_mult" => self.model.width_mult = parse_value(key, value)?,
            "model.depth_mult" => self.model.depth_mult = parse_value(key, value)?,
            "model.se_reduction" => self.model.se_reduction = parse_value(key, value)?,
            "model.survival_p" => self.model.survival_p = parse_value(key, value)?,
            "scattering.j1" => self.scattering.j1 = parse_value(key, value)?,
            "scattering.j2" => self.scattering.j2 = parse_value(key, value)?,
            "scattering.angles" => self.scattering.angles = parse_value(key, value)?,
            "scattering.phases" => self.scattering.phases = parse_value(key, value)?,
            "scattering.include_order0" => {
                self.scattering.include_order0 = parse_bool(key, value)?
            }
            "train.epochs" => self.train.epochs = parse_value(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, value)?,
            "train.lr0" => self.train.lr0 = parse_value(key, value)?,
            "train.lr_min" => self.train.lr_min = parse_value(key, value)?,
            "train.momentum" => self.train.momentum = parse_value(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_value(key, value)?,
            "train.seed" => self.train.seed = parse_value(key, value)?,
            "train.subsample_fraction" => {
                self.train.subsample_fraction = parse_value(key, value)?
            }
            "train.ablation" => self.train.ablation = parse_ablation(key, value)?,
            "train.flip" => self.train.flip = parse_bool(key, value)?,
            "data.classes" => match &mut self.data {
                DataSection::Synthetic { classes, .. } => *classes = parse_value(key, value)?,
                _ => return Err(Error::Config(format!("{key}: only valid for data.source = synthetic"))),
            },
            "data.per_class" => match &mut self.data {
                DataSection::Synthetic { per_class, .. } => {
                    *per_class = parse_value(key, value)?
                }
                _ => return Err(Error::Config(format!("{key}: only valid for data.source = synthetic"))),
            },
            "data.seed" => match &mut self.data {
                DataSection::Synthetic { seed, .. } => *seed = parse_value(key, value)?,
                _ => return Err(Error::Config(format!("{key}: only valid for data.source = synthetic"))),
            },
            "data.path" => match &mut self.data {
                DataSection::Folder { path } => *path = value.to_string(),
                _ => return Err(Error::Config(format!("{key}: only valid for data.source = folder"))),
            },
            "output.dir" => self.out_dir = value.to_string(),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Serializes in fixed key order; floats use shortest round-trip form.
    pub fn to_ini(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        let _ = writeln!(out, "model.resolution = {}", m.resolution);
        let _ = writeln!(out, "model.input_channels = {}", m.input_channels);
        let _ = writeln!(out, "model.num_classes = {}", m.num_classes);
        let _ = writeln!(out, "model.variant = {}", variant_label(m.variant));
        let _ = writeln!(out, "model.subvariant = {}", m.subvariant.label());
        let _ = writeln!(out, "model.width_mult = {}", m.width_mult);
        let _ = writeln!(out, "model.depth_mult = {}", m.depth_mult);
        let _ = writeln!(out, "model.se_reduction = {}", m.se_reduction);
        let _ = writeln!(out, "model.survival_p = {}", m.survival_p);
        let s = &self.scattering;
        let _ = writeln!(out, "scattering.j1 = {}", s.j1);
        let _ = writeln!(out, "scattering.j2 = {}", s.j2);
        let _ = writeln!(out, "scattering.angles = {}", s.angles);
        let _ = writeln!(out, "scattering.phases = {}", s.phases);
        let _ = writeln!(out, "scattering.include_order0 = {}", s.include_order0);
        let t = &self.train;
        let _ = writeln!(out, "train.epochs = {}", t.epochs);
        let _ = writeln!(out, "train.batch_size = {}", t.batch_size);
        let _ = writeln!(out, "train.lr0 = {}", t.lr0);
        let _ = writeln!(out, "train.lr_min = {}", t.lr_min);
        let _ = writeln!(out, "train.momentum = {}", t.momentum);
        let _ = writeln!(out, "train.weight_decay = {}", t.weight_decay);
        let _ = writeln!(out, "train.seed = {}", t.seed);
        let _ = writeln!(out, "train.subsample_fraction = {}", t.subsample_fraction);
        let _ = writeln!(out, "train.ablation = {}", ablation_label(t.ablation));
        let _ = writeln!(out, "train.flip = {}", t.flip);
        match &self.data {
            DataSection::Synthetic {
                classes,
                per_class,
                seed,
            } => {
                let _ = writeln!(out, "data.source = synthetic");
                let _ = writeln!(out, "data.classes = {classes}");
                let _ = writeln!(out, "data.per_class = {per_class}");
                let _ = writeln!(out, "data.seed = {seed}");
            }
            DataSection::Folder { path } => {
                let _ = writeln!(out, "data.source = folder");
                let _ = writeln!(out, "data.path = {path}");
            }
        }
        let _ = writeln!(out, "output.dir = {}", self.out_dir);
        out
    }

    /// Reads and parses a config file. A missing file is a config error so
    /// the CLI exits with code 1.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("config file not found: {} ({e})", path.display()))
        })?;
        RunConfig::parse_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_ini())?;
        Ok(())
    }

    /// Spec options for the hybrid arm (or the baseline when
    /// `baseline` is set).
    pub fn spec_options(&self, baseline: bool) -> SpecOptions {
        SpecOptions {
            resolution: self.model.resolution,
            input_channels: self.model.input_channels,
            num_classes: self.model.num_classes,
            fusion: if baseline {
                None
            } else {
                Some((self.model.variant, self.model.subvariant))
            },
            fusion_j: [self.scattering.j1, self.scattering.j2],
            width_mult: self.model.width_mult,
            depth_mult: self.model.depth_mult,
            angles: self.scattering.angles,
            phases: self.scattering.phases,
            include_order0: self.scattering.include_order0,
            se_reduction: self.model.se_reduction,
            survival_p: self.model.survival_p,
        }
    }

    /// Cross-field validation: training hyperparameters, the model plan
    /// (including the fusion alignment law) and data consistency.
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        crate::network::build_spec(&self.spec_options(false)).map_err(|e| {
            Error::Config(format!("model/scattering sections are inconsistent: {e}"))
        })?;
        if let DataSection::Synthetic { classes, .. } = &self.data {
            if *classes != self.model.num_classes {
                return Err(Error::Config(format!(
                    "data.classes = {} does not match model.num_classes = {}",
                    classes, self.model.num_classes
                )));
            }
        }
        Ok(())
    }
}

//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ssl_lab::backbones::{BackboneConfig, Family, TokenPooling};
use ssl_lab::data::AugmentationPolicy;
use ssl_lab::simsiam::SiameseConfig;
use ssl_lab::train::{AdamConfig, LossKind, Regime, TrainConfig};

use crate::Failure;

/// Every accepted key with its default. `auto` defers to the regime, dataset or backbone family.
pub const KEYS: &[(&str, &str)] = &[
    ("data", "shapes"),
    ("data_dir", ""),
    ("train_split", "auto"),
    ("test_split", "test"),
    ("input_size", "3x32x32"),
    ("synth_items", "2048"),
    ("synth_test_items", "1000"),
    ("synth_classes", "4"),
    ("synth_attributes", "0"),
    ("data_seed", "1"),
    ("backbone", "resnet_small"),
    ("embed_dim", "auto"),
    ("depth", "auto"),
    ("heads", "auto"),
    ("patch_size", "auto"),
    ("width_multiplier", "auto"),
    ("stages", "auto"),
    ("mlp_ratio", "auto"),
    ("pooling", "auto"),
    ("projection_dim", "256"),
    ("projection_output_bn", "false"),
    ("stop_gradient", "true"),
    ("augment", "auto"),
    ("crop_min", "auto"),
    ("crop_max", "auto"),
    ("flip_p", "auto"),
    ("jitter_p", "auto"),
    ("grayscale_p", "auto"),
    ("blur_p", "auto"),
    ("batch_size", "64"),
    ("accumulation", "8"),
    ("epochs", "100"),
    ("base_lr", "1e-3"),
    ("weight_decay", "1e-5"),
    ("decoupled_decay", "false"),
    ("val_fraction", "0.1"),
    ("loss", "auto"),
    ("seed", "0"),
    ("init", "random"),
    ("out", "runs/latest"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            values: KEYS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

fn parse_line(line: &str) -> Option<Result<(String, String), String>> {
    let line = line.split('#').next().unwrap_or("").trim();
    if line.is_empty() {
        return None;
    }
    Some(match line.split_once('=') {
        Some((k, v)) => Ok((k.trim().to_string(), v.trim().to_string())),
        None => Err(format!("expected key = value, got `{line}`")),
    })
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (n, line) in text.lines().enumerate() {
            if let Some(kv) = parse_line(line) {
                let (k, v) = kv.map_err(|e| Failure::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
                cfg.set(&k, &v)?;
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Failure::Input(format!("unknown config key `{key}`"))),
        }
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), Failure> {
        match parse_line(pair) {
            Some(Ok((k, v))) => self.set(&k, &v),
            _ => Err(Failure::Input(format!("--set expects key=value, got `{pair}`"))),
        }
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    fn is_auto(&self, key: &str) -> bool {
        self.raw(key) == "auto"
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, Failure> {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|_| Failure::Input(format!("config key `{key}`: cannot parse `{raw}`")))
    }

    fn get_or<T: FromStr>(&self, key: &str, fallback: T) -> Result<T, Failure> {
        if self.is_auto(key) {
            Ok(fallback)
        } else {
            self.get(key)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        PathBuf::from(self.raw("out"))
    }

    pub fn input_size(&self) -> Result<[usize; 3], Failure> {
        let raw = self.raw("input_size");
        let dims: Vec<usize> = raw.split('x').filter_map(|d| d.trim().parse().ok()).collect();
        match dims[..] {
            [c, h, w] => Ok([c, h, w]),
            _ => Err(Failure::Input(format!("input_size must look like 3x32x32, got `{raw}`"))),
        }
    }

    pub fn backbone(&self, input_size: [usize; 3]) -> Result<BackboneConfig, Failure> {
        let family = Family::parse(self.raw("backbone")).map_err(Failure::from)?;
        let d = BackboneConfig::for_family(family, input_size);
        let pooling = match self.raw("pooling") {
            "auto" => d.pooling,
            "class_token" => TokenPooling::ClassToken,
            "mean" => TokenPooling::Mean,
            other => return Err(Failure::Input(format!("pooling must be class_token or mean, got `{other}`"))),
        };
        let cfg = BackboneConfig {
            embed_dim: self.get_or("embed_dim", d.embed_dim)?,
            depth: self.get_or("depth", d.depth)?,
            heads: self.get_or("heads", d.heads)?,
            patch_size: self.get_or("patch_size", d.patch_size)?,
            width_multiplier: self.get_or("width_multiplier", d.width_multiplier)?,
            stages: self.get_or("stages", d.stages)?,
            mlp_ratio: self.get_or("mlp_ratio", d.mlp_ratio)?,
            pooling,
            ..d
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn siamese(&self) -> Result<SiameseConfig, Failure> {
        let cfg = SiameseConfig {
            projection_dim: self.get("projection_dim")?,
            projection_output_bn: self.get("projection_output_bn")?,
            stop_gradient: self.get("stop_gradient")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Policy preset: `default` for pretraining, `weak` for fine-tuning, none for probing.
    pub fn augmentation(&self, regime: Regime, shape: [usize; 3]) -> Result<Option<AugmentationPolicy>, Failure> {
        let seed = self.get("seed")?;
        let preset = match (self.raw("augment"), regime) {
            ("auto", Regime::Pretrain) => "default",
            ("auto", Regime::Finetune) => "weak",
            ("auto", Regime::Probe) => "none",
            (p, _) => p,
        };
        let base = match preset {
            "default" => AugmentationPolicy::default_for(shape, seed),
            "weak" => AugmentationPolicy::weak(shape, seed),
            "identity" => AugmentationPolicy::identity(shape, seed),
            "none" => {
                if regime == Regime::Pretrain {
                    return Err(Failure::Input("pretraining needs augmentation; augment=none is not allowed".into()));
                }
                return Ok(None);
            }
            other => {
                return Err(Failure::Input(format!(
                    "augment must be auto, default, weak, identity or none, got `{other}`"
                )))
            }
        };
        let policy = AugmentationPolicy {
            crop_scale: (self.get_or("crop_min", base.crop_scale.0)?, self.get_or("crop_max", base.crop_scale.1)?),
            flip_p: self.get_or("flip_p", base.flip_p)?,
            jitter_p: self.get_or("jitter_p", base.jitter_p)?,
            grayscale_p: self.get_or("grayscale_p", base.grayscale_p)?,
            blur_p: self.get_or("blur_p", base.blur_p)?,
            ..base
        };
        policy.validate()?;
        Ok(Some(policy))
    }

    pub fn train(&self, regime: Regime, multi_label: bool) -> Result<TrainConfig, Failure> {
        let supervised = if multi_label { LossKind::BinaryCrossEntropy } else { LossKind::CrossEntropy };
        let loss = match (self.raw("loss"), regime) {
            (_, Regime::Pretrain) => LossKind::CosineSymmetric,
            ("auto", _) => supervised,
            ("ce", _) => LossKind::CrossEntropy,
            ("bce", _) => LossKind::BinaryCrossEntropy,
            (other, _) => return Err(Failure::Input(format!("loss must be auto, ce or bce, got `{other}`"))),
        };
        let cfg = TrainConfig {
            regime,
            loss,
            batch_size: self.get("batch_size")?,
            accumulation: self.get("accumulation")?,
            epochs: self.get("epochs")?,
            base_lr: self.get("base_lr")?,
            adam: AdamConfig {
                weight_decay: self.get("weight_decay")?,
                decoupled: self.get("decoupled_decay")?,
                ..AdamConfig::default()
            },
            seed: self.get("seed")?,
            val_fraction: self.get("val_fraction")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Records a derived value in place of `auto`.
    pub fn resolve(&mut self, key: &str, value: impl ToString) {
        if self.is_auto(key) {
            self.values.insert(key.to_string(), value.to_string());
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_and_unknown_keys() {
        let mut cfg = RunConfig::default();
        cfg.set_pair("epochs=3").unwrap();
        assert_eq!(cfg.get::<usize>("epochs").unwrap(), 3);
        assert!(matches!(cfg.set_pair("epoch=3"), Err(Failure::Input(_))));
        assert!(matches!(cfg.set_pair("epochs"), Err(Failure::Input(_))));
    }

    #[test]
    fn render_round_trips_through_a_file() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.set("backbone", "vit_tiny").unwrap();
        cfg.resolve("depth", 4);
        let path = dir.path().join("c.txt");
        std::fs::write(&path, format!("# comment\n\n{}", cfg.render())).unwrap();
        assert_eq!(RunConfig::from_file(&path).unwrap(), cfg);
    }

    #[test]
    fn auto_keys_follow_the_family() {
        let mut cfg = RunConfig::default();
        cfg.set("backbone", "pit_tiny").unwrap();
        cfg.set("heads", "2").unwrap();
        let b = cfg.backbone([3, 32, 32]).unwrap();
        assert_eq!(b.family, Family::PitTiny);
        assert_eq!(b.heads, 2);
        assert_eq!(b.embed_dim, BackboneConfig::pit_tiny([3, 32, 32]).embed_dim);
    }

    #[test]
    fn projection_dim_must_divide_by_four() {
        let mut cfg = RunConfig::default();
        cfg.set("projection_dim", "30").unwrap();
        assert!(matches!(cfg.siamese(), Err(Failure::Input(_))));
    }

    #[test]
    fn regime_picks_the_augmentation_preset() {
        let cfg = RunConfig::default();
        let shape = [3, 32, 32];
        assert_eq!(cfg.augmentation(Regime::Probe, shape).unwrap(), None);
        let weak = cfg.augmentation(Regime::Finetune, shape).unwrap().unwrap();
        assert_eq!(weak.jitter_p, 0.0);
        let full = cfg.augmentation(Regime::Pretrain, shape).unwrap().unwrap();
        assert_eq!(full.jitter_p, 0.8);
    }
}

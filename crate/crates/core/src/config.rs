//! Flat `key = value` run configuration covering the model and training.
//!
//! `#` starts a comment. A `preset` line (toy, micro or tiny) is applied
//! before every other key regardless of where it appears.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::gat::Connectivity;
use crate::loss::LossWeights;
use crate::model::{ModelConfig, STAGES};
use crate::optim::AdamWConfig;
use crate::ssm::ScanKernel;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stops after this many optimizer steps when set, even mid-epoch.
    pub max_steps: Option<u64>,
    /// `None` disables augmentation.
    pub augment: Option<AugmentConfig>,
    pub checkpoint_every: u64,
    pub loss: LossWeights,
    /// Seed for shuffling and augmentation (the model seed lives in the model config).
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optim: AdamWConfig::default(),
            batch_size: 4,
            epochs: 1,
            max_steps: None,
            augment: Some(AugmentConfig::default()),
            checkpoint_every: 500,
            loss: LossWeights::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("cannot parse `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects true/false, got `{v}`"))),
    }
}

fn parse_list<T: FromStr + Copy + Default, const N: usize>(key: &str, v: &str) -> Result<[T; N]> {
    let items: Vec<&str> = v.split(',').map(str::trim).collect();
    if items.len() != N {
        return Err(Error::Config(format!("`{key}` expects {N} comma-separated values, got `{v}`")));
    }
    let mut out = [T::default(); N];
    for (o, s) in out.iter_mut().zip(items) {
        *o = parse(key, s)?;
    }
    Ok(out)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    match name {
        "toy" => Ok(ModelConfig::toy()),
        "micro" => Ok(ModelConfig::micro()),
        "tiny" => Ok(ModelConfig::tiny()),
        _ => Err(Error::Config(format!("unknown preset `{name}` (toy, micro, tiny)"))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got `{line}`", no + 1)))?;
            pairs.push((no + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = RunConfig::default();
        if let Some((_, _, v)) = pairs.iter().rev().find(|(_, k, _)| k == "preset") {
            cfg.model = preset(v)?;
        }
        for (no, k, v) in &pairs {
            cfg.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::Config(format!("line {no}: {m}")),
                e => e,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.as_ref().display())))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "preset" => {}
            "base_channels" => m.base_channels = parse(key, v)?,
            "encoder_depths" => m.encoder_depths = parse_list(key, v)?,
            "decoder_depths" => m.decoder_depths = parse_list(key, v)?,
            "d_state" => m.d_state = parse(key, v)?,
            "ssm_expand" => m.ssm_expand = parse(key, v)?,
            "connectivity" => {
                m.connectivity =
                    Connectivity::from_count(parse(key, v)?).map_err(|_| Error::Config(format!("connectivity must be 4 or 8, got `{v}`")))?
            }
            "rgca_strides" => {
                m.rgca_strides = if v == "auto" { None } else { Some(parse_list::<usize, STAGES>(key, v)?) }
            }
            "input_size" => m.input_size = parse(key, v)?,
            "model_seed" => m.seed = parse(key, v)?,
            "use_dshgam" => m.use_dshgam = parse_bool(key, v)?,
            "use_mcaem" => m.use_mcaem = parse_bool(key, v)?,
            "use_less2d" => m.use_less2d = parse_bool(key, v)?,
            "shared_directions" => m.shared_directions = parse_bool(key, v)?,
            "scan_kernel" => {
                m.scan_kernel = match v {
                    "sequential" => ScanKernel::Sequential,
                    "parallel" => ScanKernel::Parallel,
                    _ => return Err(Error::Config(format!("scan_kernel must be sequential or parallel, got `{v}`"))),
                }
            }
            "lr" => t.optim.lr = parse(key, v)?,
            "beta1" => t.optim.beta1 = parse(key, v)?,
            "beta2" => t.optim.beta2 = parse(key, v)?,
            "adam_eps" => t.optim.eps = parse(key, v)?,
            "weight_decay" => t.optim.weight_decay = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "max_steps" => t.max_steps = if v == "none" { None } else { Some(parse(key, v)?) },
            "augment" => {
                t.augment = if parse_bool(key, v)? {
                    Some(t.augment.unwrap_or_default())
                } else {
                    None
                }
            }
            "flip_prob" | "scale_min" | "scale_max" => {
                let a = t.augment.get_or_insert_with(AugmentConfig::default);
                let x = parse(key, v)?;
                match key {
                    "flip_prob" => a.flip_prob = x,
                    "scale_min" => a.scale_min = x,
                    _ => a.scale_max = x,
                }
            }
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "loss_lambda" => t.loss.lambda = parse_list(key, v)?,
            "iou_eps" => t.loss.eps = parse(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        if t.batch_size == 0 || t.epochs == 0 || t.checkpoint_every == 0 {
            return Err(Error::Config("batch_size, epochs and checkpoint_every must be >= 1".into()));
        }
        let o = &t.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return Err(Error::Config(format!("invalid optimizer settings {o:?}")));
        }
        if let Some(a) = &t.augment {
            if !(0.0..=1.0).contains(&a.flip_prob) || a.scale_min <= 0.0 || a.scale_max < a.scale_min {
                return Err(Error::Config(format!("invalid augmentation settings {a:?}")));
            }
        }
        Ok(())
    }

    /// Every key, in a form [`RunConfig::parse`] reads back to an equal config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("base_channels", m.base_channels.to_string());
        kv("encoder_depths", join(&m.encoder_depths));
        kv("decoder_depths", join(&m.decoder_depths));
        kv("d_state", m.d_state.to_string());
        kv("ssm_expand", m.ssm_expand.to_string());
        kv("connectivity", m.connectivity.count().to_string());
        kv("rgca_strides", m.rgca_strides.map_or("auto".into(), |s| join(&s)));
        kv("input_size", m.input_size.to_string());
        kv("model_seed", m.seed.to_string());
        kv("use_dshgam", m.use_dshgam.to_string());
        kv("use_mcaem", m.use_mcaem.to_string());
        kv("use_less2d", m.use_less2d.to_string());
        kv("shared_directions", m.shared_directions.to_string());
        let kernel = match m.scan_kernel {
            ScanKernel::Sequential => "sequential",
            ScanKernel::Parallel => "parallel",
        };
        kv("scan_kernel", kernel.into());
        kv("lr", format!("{:?}", t.optim.lr));
        kv("beta1", format!("{:?}", t.optim.beta1));
        kv("beta2", format!("{:?}", t.optim.beta2));
        kv("adam_eps", format!("{:?}", t.optim.eps));
        kv("weight_decay", format!("{:?}", t.optim.weight_decay));
        kv("batch_size", t.batch_size.to_string());
        kv("epochs", t.epochs.to_string());
        kv("max_steps", t.max_steps.map_or("none".into(), |v| v.to_string()));
        kv("augment", t.augment.is_some().to_string());
        if let Some(a) = &t.augment {
            kv("flip_prob", format!("{:?}", a.flip_prob));
            kv("scale_min", format!("{:?}", a.scale_min));
            kv("scale_max", format!("{:?}", a.scale_max));
        }
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("loss_lambda", t.loss.lambda.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(","));
        kv("iou_eps", format!("{:?}", t.loss.eps));
        kv("seed", t.seed.to_string());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::parse("preset = micro\nlr = 0.001\naugment = false\nrgca_strides = 2,1,1,1\n").unwrap();
        assert_eq!(cfg.model.base_channels, 16);
        assert_eq!(cfg.train.optim.lr, 1e-3);
        assert!(cfg.train.augment.is_none());
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.train.augment = Some(AugmentConfig { flip_prob: 0.25, ..Default::default() });
        cfg.train.max_steps = Some(12);
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn preset_applies_first() {
        let cfg = RunConfig::parse("base_channels = 8 # override\npreset = tiny\n").unwrap();
        assert_eq!(cfg.model.base_channels, 8);
        assert_eq!(cfg.model.d_state, 2);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("lr = 1e-3\nbogus = 1\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(RunConfig::parse("connectivity = 6").is_err());
        assert!(RunConfig::parse("input_size = 40").is_err());
        assert!(RunConfig::parse("no equals sign").is_err());
    }
}

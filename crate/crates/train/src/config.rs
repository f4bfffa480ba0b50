//! Training hyperparameters, read from the `[train]` section of a
//! key-value document.

use serde::{Deserialize, Serialize};

use ddnet_core::kv::{Document, Entry, Section};
use ddnet_core::WeightStrategy;
use ddnet_data::Flip;

use crate::error::{Result, TrainError};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    /// Iterations between learning-rate decays.
    pub decay_interval: usize,
    pub weight_decay: f64,
    pub dropout: f64,
    pub batch: usize,
    pub iterations: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub weight_strategy: WeightStrategy,
    pub aux_weight: f64,
    /// Lower bound of the dynamic weights.
    pub l: f64,
    pub gamma: f64,
    /// Random crop `(height, width)`; `None` trains on whole images.
    pub crop: Option<(usize, usize)>,
    /// Crops drawn per image and epoch.
    pub windows: usize,
    pub flip: Flip,
    pub flip_prob: f64,
    pub eval_fraction: f64,
    pub eval_batch: usize,
    /// Also checkpoint at every evaluation that is a multiple of this.
    pub checkpoint_interval: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            decay_factor: 0.1,
            decay_interval: 200_000,
            weight_decay: 1e-4,
            dropout: 0.1,
            batch: 4,
            iterations: 2000,
            eval_interval: 100,
            seed: 0,
            weight_strategy: WeightStrategy::Dynamic,
            aux_weight: 1.0,
            l: 5.0,
            gamma: 2.0,
            crop: None,
            windows: 2,
            flip: Flip::Vertical,
            flip_prob: 0.5,
            eval_fraction: 0.2,
            eval_batch: 8,
            checkpoint_interval: None,
        }
    }
}

const KEYS: &[&str] = &[
    "lr",
    "decay_factor",
    "decay_interval",
    "weight_decay",
    "dropout",
    "batch",
    "iterations",
    "eval_interval",
    "seed",
    "weights",
    "aux_weight",
    "l",
    "gamma",
    "crop",
    "windows",
    "flip",
    "flip_prob",
    "eval_fraction",
    "eval_batch",
    "checkpoint_interval",
];

fn nonneg(e: &Entry) -> Result<f64> {
    let v: f64 = e.parse()?;
    if !(v >= 0.0 && v.is_finite()) {
        return Err(e.invalid(format!("`{}` must be finite and nonnegative", e.key)).into());
    }
    Ok(v)
}

impl TrainConfig {
    /// `lr0 * decay_factor ^ floor(iteration / decay_interval)`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.lr0 * self.decay_factor.powi((iteration / self.decay_interval) as i32)
    }

    /// Defaults overridden by the `[train]` section of `doc`, if present.
    pub fn from_document(doc: &Document) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        if let Some(sec) = doc.section("train") {
            cfg.apply(sec)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        TrainConfig::from_document(&Document::parse(text)?)
    }

    fn apply(&mut self, sec: &Section) -> Result<()> {
        sec.expect_keys(KEYS)?;
        for e in &sec.entries {
            match e.key.as_str() {
                "lr" => self.lr0 = e.positive()?,
                "decay_factor" => self.decay_factor = e.positive()?,
                "decay_interval" => self.decay_interval = e.positive()?,
                "weight_decay" => self.weight_decay = nonneg(e)?,
                "dropout" => {
                    self.dropout = nonneg(e)?;
                    if self.dropout >= 1.0 {
                        return Err(e.invalid("`dropout` must be below 1").into());
                    }
                }
                "batch" => self.batch = e.positive()?,
                "iterations" => self.iterations = e.parse()?,
                "eval_interval" => self.eval_interval = e.positive()?,
                "seed" => self.seed = e.parse()?,
                "weights" => self.weight_strategy = e.parse::<WeightStrategy>()?,
                "aux_weight" => self.aux_weight = nonneg(e)?,
                "l" => self.l = e.positive()?,
                "gamma" => {
                    self.gamma = nonneg(e)?;
                    if self.gamma > 5.0 {
                        return Err(e.invalid("`gamma` must be in [0, 5]").into());
                    }
                }
                "crop" => {
                    if e.value == "none" {
                        self.crop = None;
                    } else {
                        let v: Vec<usize> = e.parse_list()?;
                        match v[..] {
                            [h, w] if h > 0 && w > 0 => self.crop = Some((h, w)),
                            _ => return Err(e.invalid("`crop` takes `height, width` or `none`").into()),
                        }
                    }
                }
                "windows" => self.windows = e.positive()?,
                "flip" => self.flip = e.parse()?,
                "flip_prob" => {
                    self.flip_prob = nonneg(e)?;
                    if self.flip_prob > 1.0 {
                        return Err(e.invalid("`flip_prob` must be in [0, 1]").into());
                    }
                }
                "eval_fraction" => {
                    self.eval_fraction = e.positive()?;
                    if self.eval_fraction >= 1.0 {
                        return Err(e.invalid("`eval_fraction` must be in (0, 1)").into());
                    }
                }
                "eval_batch" => self.eval_batch = e.positive()?,
                "checkpoint_interval" => self.checkpoint_interval = Some(e.positive()?),
                _ => unreachable!("keys checked above"),
            }
        }
        Ok(())
    }

    /// Checks constraints that span fields or come from code rather than text.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Invalid(m.to_string()));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) || !(self.decay_factor > 0.0) {
            return bad("learning rate and decay factor must be positive");
        }
        if self.decay_interval == 0 || self.eval_interval == 0 || self.batch == 0 || self.eval_batch == 0 || self.windows == 0 {
            return bad("intervals, batch sizes and window count must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..=5.0).contains(&self.gamma) {
            return bad("gamma must be in [0, 5]");
        }
        if !(self.l > 0.0) || self.weight_decay < 0.0 || self.aux_weight < 0.0 {
            return bad("L must be positive; weight decay and aux weight nonnegative");
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction < 1.0) {
            return bad("eval fraction must be in (0, 1)");
        }
        Ok(())
    }

    /// The `[train]` section that reproduces this config.
    pub fn to_text(&self) -> String {
        let mut s = String::from("[train]\n");
        let mut kv = |k: &str, v: String| {
            s.push_str(&format!("{k} = {v}\n"));
        };
        kv("lr", format!("{:e}", self.lr0));
        kv("decay_factor", self.decay_factor.to_string());
        kv("decay_interval", self.decay_interval.to_string());
        kv("weight_decay", format!("{:e}", self.weight_decay));
        kv("dropout", self.dropout.to_string());
        kv("batch", self.batch.to_string());
        kv("iterations", self.iterations.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        kv("seed", self.seed.to_string());
        kv("weights", self.weight_strategy.as_str().to_string());
        kv("aux_weight", self.aux_weight.to_string());
        kv("l", self.l.to_string());
        kv("gamma", self.gamma.to_string());
        kv("crop", self.crop.map_or("none".to_string(), |(h, w)| format!("{h}, {w}")));
        kv("windows", self.windows.to_string());
        kv(
            "flip",
            match self.flip {
                Flip::Vertical => "vertical",
                Flip::Horizontal => "horizontal",
                Flip::None => "none",
            }
            .to_string(),
        );
        kv("flip_prob", self.flip_prob.to_string());
        kv("eval_fraction", self.eval_fraction.to_string());
        kv("eval_batch", self.eval_batch.to_string());
        if let Some(c) = self.checkpoint_interval {
            kv("checkpoint_interval", c.to_string());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = TrainConfig::default();
        assert_eq!(TrainConfig::parse(&cfg.to_text()).unwrap(), cfg);
        let mut other = cfg.clone();
        other.crop = Some((32, 48));
        other.weight_strategy = WeightStrategy::FocalDynamic;
        other.checkpoint_interval = Some(100);
        other.flip = Flip::Horizontal;
        assert_eq!(TrainConfig::parse(&other.to_text()).unwrap(), other);
    }

    #[test]
    fn schedule_decays_tenfold_per_interval() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 2e-4);
        assert_eq!(cfg.lr_at(199_999), 2e-4);
        assert!((cfg.lr_at(2 * cfg.decay_interval) - cfg.lr0 / 100.0).abs() < 1e-18);
    }

    #[test]
    fn errors_point_at_the_value() {
        let e = TrainConfig::parse("[train]\nbatch = 4\ngamma = 7\n").unwrap_err();
        assert!(matches!(e, TrainError::Config { line: 3, column: 9, .. }), "{e}");
        let e = TrainConfig::parse("[train]\nlearning_rate = 1\n").unwrap_err();
        assert!(matches!(e, TrainError::Config { line: 2, column: 1, .. }), "{e}");
        assert!(TrainConfig::parse("[train]\nweights = magic\n").is_err());
    }

    #[test]
    fn other_sections_are_ignored() {
        let cfg = TrainConfig::parse("num_classes = 3\n[decoder]\nunits = 2\n[train]\nlr = 1e-3\n").unwrap();
        assert_eq!(cfg.lr0, 1e-3);
    }
}

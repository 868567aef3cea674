//! Plain `key=value` run configuration with dotted section names.
//!
//! Every key has a default. A config file and `--set` overrides are layered
//! on top; unknown keys are an error. The resolved configuration is echoed
//! back to disk and hashed for artifact names.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::NetArch;
use crate::sampler::{InversionConfig, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::training::TrainConfig;

/// `(key, default, meaning)`
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "0", "root seed; every random stream derives from it"),
    ("run_dir", "runs/default", "output directory"),
    ("threads", "0", "worker threads, 0 = all cores"),
    ("schedule.T", "100", "diffusion steps"),
    ("schedule.beta_start", "0.0001", "first beta of the linear schedule"),
    ("schedule.beta_end", "0.1", "last beta of the linear schedule"),
    ("data.size", "8192", "training images"),
    ("net.hidden", "512", "MLP width"),
    ("net.depth", "3", "hidden layers"),
    ("net.time_dim", "32", "sinusoidal time embedding width"),
    ("train.grad_chunk", "32", "rows per gradient chunk"),
    ("base.steps", "20000", "base training steps"),
    ("base.batch", "64", "base batch size"),
    ("base.lr", "0.001", "base learning rate"),
    ("base.cosine", "true", "cosine learning-rate decay"),
    ("base.lr_floor", "0.05", "final learning rate as a fraction of base.lr"),
    ("base.cond_dropout", "0.1", "probability of training with the null condition"),
    ("base.degraded_at", "0.05", "fraction of base training at which the degraded predictor is saved"),
    ("refiner.steps", "1000", "refiner training steps"),
    ("refiner.batch", "64", "refiner batch size"),
    ("refiner.lr", "0.0001", "refiner learning rate"),
    ("refiner.cosine", "true", "cosine learning-rate decay"),
    ("refiner.lr_floor", "0.05", "final learning rate as a fraction of refiner.lr"),
    ("refiner.mode", "msd", "msd | full_grad"),
    ("refiner.source", "offline", "offline (pair archive) | online"),
    ("pairs.count", "8192", "pairs generated before filtering"),
    ("pairs.filter_q", "25", "percentage of pairs kept by quality"),
    ("pairs.quality_draws", "8", "(t, eps) draws per quality score"),
    ("guidance.w", "4", "classifier-free scale for `sample`"),
    ("guidance.s", "2.5", "degraded-predictor scale for `sample`"),
    ("guidance.w_min", "3", "lower end of the training-time w range"),
    ("guidance.w_max", "5", "upper end of the training-time w range"),
    ("guidance.s_min", "2", "lower end of the training-time s range"),
    ("guidance.s_max", "3", "upper end of the training-time s range"),
    ("sampler.N", "10", "guidance-free sampling steps"),
    ("sampler.N_guided", "20", "guided steps used for targets"),
    ("inversion.k", "5", "fixed-point iterations per inversion step"),
    ("sample.count", "16", "images per `sample` call"),
    ("sample.class", "0", "class id for `sample`, or `null`"),
    ("sample.refined", "false", "start `sample` from refined noise"),
    ("eval.per_class", "200", "generated images per class for MMD"),
    ("accept.prop1_pairs", "200", "pairs for the distance-correlation check"),
    ("accept.inversion_samples", "100", "guided samples for the inversion check"),
    ("accept.prop2_batches", "32", "batches for the gradient-cosine check"),
    ("accept.prop2_batch", "8", "rows per gradient-cosine batch"),
    ("accept.prop2_steps", "3", "rollout steps for the gradient-cosine check"),
    ("accept.cross_trials", "100", "trials for the cross-condition probe"),
    ("accept.seeds", "0,1,2", "refiner/evaluation seeds"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect() }
    }
}

fn parse_line(line: &str, origin: &str) -> Result<Option<(String, String)>> {
    let line = line.trim();
    if line.is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let (k, v) = line
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("{origin}: expected key=value, got `{line}`")))?;
    let k = k.trim();
    if k.is_empty() {
        return Err(Error::Config(format!("{origin}: empty key")));
    }
    Ok(Some((k.to_string(), v.trim().to_string())))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    /// Applies `key=value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            if let Some((k, v)) = parse_line(line, &format!("{origin}:{}", n + 1))? {
                self.set(&k, &v).map_err(|e| Error::Config(format!("{origin}:{}: {e}", n + 1)))?;
            }
        }
        Ok(())
    }

    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        match parse_line(kv, "--set")? {
            Some((k, v)) => self.set(&k, &v),
            None => Err(Error::Config(format!("--set expects key=value, got `{kv}`"))),
        }
    }

    /// Defaults, then `path` (if any), then `overrides` in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            cfg.apply_text(&text, &p.display().to_string())?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn raw(&self, key: &str) -> Result<&str> {
        self.values.get(key).map(String::as_str).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.raw(key)?;
        raw.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{raw}`")))
    }

    /// Sorted `key=value` lines.
    pub fn resolved(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// First 12 hex digits of the SHA-256 of [`RunConfig::resolved`], with
    /// `run_dir` and `threads` excluded since they do not change results.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if k != "run_dir" && k != "threads" {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        h.finalize().iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        for (k, _, _) in KEYS {
            self.raw(k)?;
        }
        self.schedule()?;
        self.base_train()?.validate()?;
        self.refiner_train()?.validate()?;
        self.refiner_mode()?;
        self.online_pairs()?;
        self.sample_class()?;
        self.seeds()?;
        for k in ["sampler.N", "sampler.N_guided", "inversion.k", "sample.count", "eval.per_class", "data.size"] {
            self.get::<usize>(k)?;
        }
        for k in ["guidance.w", "guidance.s"] {
            let v: f64 = self.get(k)?;
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("`{k}` must be a finite non-negative number")));
            }
        }
        self.get::<bool>("sample.refined")?;
        Ok(())
    }

    pub fn seed(&self) -> Result<u64> {
        self.get("seed")
    }

    pub fn run_dir(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.raw("run_dir")?))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.get("schedule.T")?, self.get("schedule.beta_start")?, self.get("schedule.beta_end")?)
            .map_err(|e| Error::Config(format!("schedule: {e}")))
    }

    pub fn arch(&self) -> Result<NetArch> {
        Ok(NetArch {
            image_shape: vec![1, crate::training::SIDE, crate::training::SIDE],
            time_dim: self.get("net.time_dim")?,
            num_classes: crate::training::CLASS_NAMES.len(),
            hidden: self.get("net.hidden")?,
            depth: self.get("net.depth")?,
            max_timestep: self.get("schedule.T")?,
        })
    }

    fn train(&self, section: &str) -> Result<TrainConfig> {
        let k = |name: &str| format!("{section}.{name}");
        let mut cfg = TrainConfig {
            steps: self.get(&k("steps"))?,
            batch_size: self.get(&k("batch"))?,
            lr: self.get(&k("lr"))?,
            cosine_decay: self.get(&k("cosine"))?,
            lr_floor: self.get(&k("lr_floor"))?,
            sampler_steps: self.get("sampler.N")?,
            guided_steps: self.get("sampler.N_guided")?,
            filter_q: self.get("pairs.filter_q")?,
            w_range: (self.get("guidance.w_min")?, self.get("guidance.w_max")?),
            s_range: (self.get("guidance.s_min")?, self.get("guidance.s_max")?),
            quality_draws: self.get("pairs.quality_draws")?,
            grad_chunk: self.get("train.grad_chunk")?,
            seed: self.seed()?,
            ..TrainConfig::default()
        };
        if section == "base" {
            cfg.cond_dropout = self.get("base.cond_dropout")?;
            cfg.degraded_at = self.get("base.degraded_at")?;
        }
        cfg.validate().map_err(|e| Error::Config(format!("{section}: {e}")))?;
        Ok(cfg)
    }

    pub fn base_train(&self) -> Result<TrainConfig> {
        self.train("base")
    }

    pub fn refiner_train(&self) -> Result<TrainConfig> {
        self.train("refiner")
    }

    pub fn refiner_mode(&self) -> Result<crate::training::RefinerMode> {
        match self.raw("refiner.mode")? {
            "msd" => Ok(crate::training::RefinerMode::Msd),
            "full_grad" => Ok(crate::training::RefinerMode::FullGrad),
            v => Err(Error::Config(format!("refiner.mode must be msd or full_grad, got `{v}`"))),
        }
    }

    /// `true` for online pair generation.
    pub fn online_pairs(&self) -> Result<bool> {
        match self.raw("refiner.source")? {
            "offline" => Ok(false),
            "online" => Ok(true),
            v => Err(Error::Config(format!("refiner.source must be offline or online, got `{v}`"))),
        }
    }

    pub fn sampler(&self) -> Result<SamplerConfig> {
        Ok(SamplerConfig { steps: self.get("sampler.N")?, guided_steps: self.get("sampler.N_guided")? })
    }

    pub fn inversion(&self) -> Result<InversionConfig> {
        Ok(InversionConfig { steps: self.get("sampler.N")?, fixed_point_iters: self.get("inversion.k")? })
    }

    pub fn sample_class(&self) -> Result<crate::nets::Condition> {
        match self.raw("sample.class")? {
            "null" => Ok(crate::nets::Condition::Null),
            v => {
                let c: usize = v.parse().map_err(|_| Error::Config(format!("sample.class: cannot parse `{v}`")))?;
                if c >= crate::training::CLASS_NAMES.len() {
                    return Err(Error::Config(format!("sample.class {c} out of range")));
                }
                Ok(crate::nets::Condition::Class(c))
            }
        }
    }

    pub fn seeds(&self) -> Result<Vec<u64>> {
        self.raw("accept.seeds")?
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("accept.seeds: cannot parse `{s}`"))))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_schedule_is_terminal() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let s = c.schedule().unwrap();
        assert!(s.alpha(100) < 0.01);
        assert_eq!(c.seeds().unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut c = RunConfig::default();
        assert!(matches!(c.apply_text("sampler.N=5\nbogus.key=1\n", "f"), Err(Error::Config(_))));
        assert!(c.apply_override("nope=1").is_err());
        assert!(c.apply_override("novalue").is_err());
    }

    #[test]
    fn layering_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.cfg");
        std::fs::write(&p, "# comment\n\nsampler.N = 5\nseed=3\n").unwrap();
        let c = RunConfig::load(Some(&p), &["seed=9".into()]).unwrap();
        assert_eq!(c.get::<usize>("sampler.N").unwrap(), 5);
        assert_eq!(c.seed().unwrap(), 9);
        assert!(RunConfig::load(None, &["sampler.N=abc".into()]).is_err());
        assert!(RunConfig::load(None, &["pairs.filter_q=0".into()]).is_err());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("guidance.w", "0").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.resolved(), "echo").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        assert_ne!(RunConfig::default().hash(), c.hash());
        let mut moved = c.clone();
        moved.set("run_dir", "elsewhere").unwrap();
        assert_eq!(moved.hash(), c.hash());
        assert_eq!(c.hash().len(), 12);
    }
}

//! Pipeline configuration and the flat `key = value` config file format.

use std::path::Path;

use crate::error::{Error, Result};

/// Every knob of the mask-guided transfer pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceConfig {
    /// Diffusion step count.
    pub t_total: usize,
    /// Binarization threshold on the standardized noise-difference map.
    pub theta_mask: f64,
    /// Mix ratio toward the structure trajectory outside the mask.
    pub omega_mix: f64,
    pub lambda_app: f64,
    pub lambda_struct: f64,
    /// Weight of the masked pixel term inside the appearance loss.
    pub lambda_mse: f64,
    /// Temperature of the patch-similarity kernel.
    pub tau: f64,
    /// Repetitions per step while mask mixing is active.
    pub n_resample: usize,
    /// Fraction of the reverse steps (from the noisy end) with mask mixing.
    pub mask_guidance_fraction: f64,
    /// Run-level probability of disabling mask mixing entirely.
    pub mask_skip_prob: f64,
    /// Multiplier on the guidance loss gradient.
    pub guidance_scale: f64,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            t_total: 60,
            theta_mask: -0.2,
            omega_mix: 0.98,
            lambda_app: 0.1,
            lambda_struct: 1.0,
            lambda_mse: 0.1,
            tau: 0.5,
            n_resample: 10,
            mask_guidance_fraction: 0.5,
            mask_skip_prob: 0.2,
            guidance_scale: 30.0,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        let range = |name: &str, v: f64, lo: f64, hi: f64| -> Result<()> {
            if v < lo || v > hi || !v.is_finite() {
                Err(Error::Config(format!("{name} = {v} outside [{lo}, {hi}]")))
            } else {
                Ok(())
            }
        };
        if self.t_total < 1 {
            return Err(Error::Config("T must be >= 1".into()));
        }
        if self.n_resample < 1 {
            return Err(Error::Config("n_resample must be >= 1".into()));
        }
        if !self.theta_mask.is_finite() {
            return Err(Error::Config("theta_mask must be finite".into()));
        }
        range("omega_mix", self.omega_mix, 0.0, 1.0)?;
        range("mask_guidance_fraction", self.mask_guidance_fraction, 0.0, 1.0)?;
        range("mask_skip_prob", self.mask_skip_prob, 0.0, 1.0)?;
        range("lambda_app", self.lambda_app, 0.0, f64::INFINITY)?;
        range("lambda_struct", self.lambda_struct, 0.0, f64::INFINITY)?;
        range("lambda_mse", self.lambda_mse, 0.0, f64::INFINITY)?;
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau = {} must be positive", self.tau)));
        }
        if !(self.guidance_scale > 0.0) || !self.guidance_scale.is_finite() {
            return Err(Error::Config(format!("guidance_scale = {} must be positive", self.guidance_scale)));
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; unknown keys are rejected, missing
    /// keys keep their defaults. Blank lines and `#` comment lines are
    /// ignored.
    pub fn parse(text: &str) -> Result<GuidanceConfig> {
        let mut cfg = GuidanceConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            let key = key.trim();
            let value = value.trim();
            let fval = || -> Result<f64> {
                value
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?} as a number")))
            };
            match key {
                "T" => {
                    cfg.t_total = value
                        .parse()
                        .map_err(|_| Error::Config(format!("T: cannot parse {value:?} as an integer")))?
                }
                "theta_mask" => cfg.theta_mask = fval()?,
                "omega_mix" => cfg.omega_mix = fval()?,
                "lambda_app" => cfg.lambda_app = fval()?,
                "lambda_struct" => cfg.lambda_struct = fval()?,
                "lambda_mse" => cfg.lambda_mse = fval()?,
                "tau" => cfg.tau = fval()?,
                "n_resample" => {
                    cfg.n_resample = value
                        .parse()
                        .map_err(|_| Error::Config(format!("n_resample: cannot parse {value:?} as an integer")))?
                }
                "mask_guidance_fraction" => cfg.mask_guidance_fraction = fval()?,
                "mask_skip_prob" => cfg.mask_skip_prob = fval()?,
                "guidance_scale" => cfg.guidance_scale = fval()?,
                "seed" => {
                    cfg.seed = value
                        .parse()
                        .map_err(|_| Error::Config(format!("seed: cannot parse {value:?} as an unsigned integer")))?
                }
                _ => return Err(Error::Config(format!("unknown key {key:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<GuidanceConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {}", path.display(), msg)),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = GuidanceConfig::parse("").unwrap();
        assert_eq!(cfg.t_total, 60);
        assert_eq!(cfg.theta_mask, -0.2);
        assert_eq!(cfg.omega_mix, 0.98);
        assert_eq!(cfg.lambda_app, 0.1);
        assert_eq!(cfg.lambda_struct, 1.0);
        assert_eq!(cfg.n_resample, 10);
        assert_eq!(cfg.mask_skip_prob, 0.2);
        assert_eq!(cfg.mask_guidance_fraction, 0.5);
    }

    #[test]
    fn out_of_range_value_errors() {
        let err = GuidanceConfig::parse("omega_mix = 1.5").unwrap_err();
        assert!(err.to_string().contains("omega_mix"));
    }

    #[test]
    fn override_single_key() {
        let cfg = GuidanceConfig::parse("T = 8").unwrap();
        assert_eq!(cfg.t_total, 8);
        assert_eq!(cfg.n_resample, 10);
    }

    #[test]
    fn unknown_key_errors_by_name() {
        let err = GuidanceConfig::parse("omega = 0.5").unwrap_err();
        assert!(err.to_string().contains("omega"));
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = GuidanceConfig::parse("# a comment\n\n  tau = 0.25  \n").unwrap();
        assert_eq!(cfg.tau, 0.25);
    }

    #[test]
    fn unparsable_value_errors() {
        assert!(GuidanceConfig::parse("tau = fast").is_err());
        assert!(GuidanceConfig::parse("n_resample = 0").is_err());
    }
}

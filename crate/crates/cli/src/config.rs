//! Run configuration: a TOML file whose tables mirror the library configs.
//! Every table is optional; unknown keys are rejected. Command-line flags
//! are applied on top by the subcommands.

use std::path::Path;

use serde::Deserialize;
use spaer_core::diffeo::SvfConfig;
use spaer_core::eqfeatures::inverse_softplus;
use spaer_core::{ChannelSpec, Error, FilterBank, Result, SimConfig, TrackOptions, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub simulate: SimConfig,
    pub bank: Option<BankConfig>,
    pub train: TrainConfig,
    pub track: TrackSettings,
}

/// Channels with their effective (non-negative) gains.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankConfig {
    pub channels: Vec<ChannelSpec>,
    /// One per channel; all 1 when omitted.
    #[serde(default)]
    pub gains: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackSettings {
    pub diffeo: bool,
    /// Refine clouds with the model's attention stack when a model is given.
    pub attention: bool,
    pub svf: SvfConfig,
}

impl Default for TrackSettings {
    fn default() -> Self {
        Self {
            diffeo: false,
            attention: true,
            svf: SvfConfig::default(),
        }
    }
}

impl TrackSettings {
    pub fn options(&self) -> TrackOptions {
        TrackOptions {
            diffeo: self.diffeo,
            svf: self.svf,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.into(),
            reason: e.message().to_string(),
        })
    }

    pub fn bank(&self) -> Result<FilterBank> {
        let Some(cfg) = &self.bank else {
            return Ok(FilterBank::default_bank());
        };
        let gains = match &cfg.gains {
            None => vec![1.0; cfg.channels.len()],
            Some(g) if g.len() == cfg.channels.len() => g.clone(),
            Some(g) => {
                return Err(Error::InvalidConfig(format!(
                    "bank has {} channels but {} gains",
                    cfg.channels.len(),
                    g.len()
                )))
            }
        };
        if let Some(g) = gains.iter().find(|g| !(**g > 0.0) || !g.is_finite()) {
            return Err(Error::InvalidConfig(format!("bank gains must be positive and finite, got {g}")));
        }
        FilterBank::new(cfg.channels.clone(), gains.iter().map(|&g| inverse_softplus(g)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use spaer_core::ChannelKind;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg: RunConfig = toml::from_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.bank().unwrap(), FilterBank::default_bank());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("colour = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[simulate]\nsead = 3").is_err());
        assert!(toml::from_str::<RunConfig>("[track.svf]\nrounds = 3").is_err());
    }

    #[test]
    fn tables_fill_in_partially() {
        let text = r#"
            [simulate]
            seed = 9
            t_max_mm = 30.0

            [train]
            epochs = 3

            [track]
            diffeo = true

            [bank]
            channels = [
                { kind = "smoothed_intensity", sigma_mm = 3.0 },
                { kind = "intensity_power", sigma_mm = 6.0, power = 4.0 },
            ]
            gains = [1.0, 0.5]
        "#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.simulate.seed, 9);
        assert_eq!(cfg.simulate.t_max_mm, 30.0);
        assert_eq!(cfg.simulate.frames, SimConfig::default().frames);
        assert_eq!(cfg.train.epochs, 3);
        assert!(cfg.track.diffeo && cfg.track.attention);
        let bank = cfg.bank().unwrap();
        assert_eq!(bank.channels[1], ChannelSpec::new(ChannelKind::IntensityPower, 6.0, 4.0));
        let g = bank.gains();
        assert!((g[0] - 1.0).abs() < 1e-12 && (g[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bad_gains_are_rejected() {
        let text = "[bank]\nchannels = [{ kind = \"smoothed_intensity\", sigma_mm = 3.0 }]\ngains = [1.0, 2.0]";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert!(matches!(cfg.bank(), Err(Error::InvalidConfig(_))));
        let text = "[bank]\nchannels = [{ kind = \"smoothed_intensity\", sigma_mm = 3.0 }]\ngains = [0.0]";
        let cfg: RunConfig = toml::from_str(text).unwrap();
        assert!(matches!(cfg.bank(), Err(Error::InvalidConfig(_))));
    }
}

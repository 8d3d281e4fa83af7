//! One TOML document holding every tunable of the pipeline.
//!
//! Every section and key is optional; missing values take the defaults of
//! the corresponding parameter struct. Unknown keys are rejected.
//!
//! ```toml
//! [features]    # FeatureParams
//! [augment]     # AugmentParams
//! [encoder]     # EncoderConfig
//! [train]       # TrainConfig
//! [index]       # IvfPqParams
//! [search]      # SearchConfig
//! [eval]        # EvalSpec
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::AugmentParams;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalSpec;
use crate::frontend::FeatureParams;
use crate::index::IvfPqParams;
use crate::search::SearchConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub features: FeatureParams,
    pub augment: AugmentParams,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub index: IvfPqParams,
    pub search: SearchConfig,
    pub eval: EvalSpec,
}

impl Config {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Effective configuration, including defaults, as TOML.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Checks each section and their mutual consistency.
    pub fn validate(&self) -> Result<()> {
        self.features.validate()?;
        self.augment.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.encoder.mel_bins != self.features.mel_bins {
            return Err(Error::Config(format!(
                "encoder.mel_bins = {} but features.mel_bins = {}",
                self.encoder.mel_bins, self.features.mel_bins
            )));
        }
        let frames = self.features.segment_frames();
        if self.encoder.frames != frames {
            return Err(Error::Config(format!(
                "encoder.frames = {} but one segment yields {frames} frames",
                self.encoder.frames
            )));
        }
        if self.search.k == 0 {
            return Err(Error::Config("search.k must be at least 1".into()));
        }
        if self.index.nlist == 0 || self.index.nprobe == 0 {
            return Err(Error::Config("index.nlist and index.nprobe must be positive".into()));
        }
        Ok(())
    }
}

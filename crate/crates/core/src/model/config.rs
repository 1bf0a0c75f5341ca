use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Prior concatenated into a spatial residual branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Prior {
    /// The appearance flow (residual flow branch).
    Flow,
    /// The initial light field (residual intensity branch).
    Intensity,
}

/// Which residual branches exist and which prior each one sees, first
/// branch first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualOrder {
    #[default]
    FlowThenIntensity,
    IntensityThenFlow,
    SingleFlow,
    SingleIntensity,
    FlowFlow,
    IntensityIntensity,
}

impl ResidualOrder {
    pub const ALL: [ResidualOrder; 6] = [
        ResidualOrder::SingleFlow,
        ResidualOrder::SingleIntensity,
        ResidualOrder::FlowFlow,
        ResidualOrder::IntensityIntensity,
        ResidualOrder::IntensityThenFlow,
        ResidualOrder::FlowThenIntensity,
    ];

    pub fn branches(self) -> &'static [Prior] {
        use Prior::*;
        match self {
            ResidualOrder::FlowThenIntensity => &[Flow, Intensity],
            ResidualOrder::IntensityThenFlow => &[Intensity, Flow],
            ResidualOrder::SingleFlow => &[Flow],
            ResidualOrder::SingleIntensity => &[Intensity],
            ResidualOrder::FlowFlow => &[Flow, Flow],
            ResidualOrder::IntensityIntensity => &[Intensity, Intensity],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ResidualOrder::FlowThenIntensity => "flow_then_intensity",
            ResidualOrder::IntensityThenFlow => "intensity_then_flow",
            ResidualOrder::SingleFlow => "single_flow",
            ResidualOrder::SingleIntensity => "single_intensity",
            ResidualOrder::FlowFlow => "flow_flow",
            ResidualOrder::IntensityIntensity => "intensity_intensity",
        }
    }
}

/// Network hyper-parameters. The network is fully convolutional, so
/// `input_hw` is the nominal inference size; any extent divisible by
/// `2^depth` can be run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub input_hw: [usize; 2],
    pub views: usize,
    pub channels: usize,
    /// Channels per view produced by the spatial residual branches.
    pub out_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub eta: f64,
    pub sr_factor: usize,
    #[serde(default)]
    pub residual_order: ResidualOrder,
    #[serde(default = "default_slope")]
    pub leaky_slope: f64,
}

fn default_slope() -> f64 {
    0.2
}

impl NetConfig {
    /// Small CPU-trainable network: 64x64 luminance input, 5x5 views.
    pub fn desk() -> Self {
        Self {
            input_hw: [64, 64],
            views: 5,
            channels: 1,
            out_channels: 1,
            base_filters: 8,
            depth: 4,
            eta: 0.8,
            sr_factor: 2,
            residual_order: ResidualOrder::FlowThenIntensity,
            leaky_slope: 0.2,
        }
    }

    /// Full-size network: 128x128 input, 8x8 views, 16 base filters, five
    /// encoder levels and three output channels per view in the spatial
    /// branches.
    pub fn table() -> Self {
        Self {
            input_hw: [128, 128],
            views: 8,
            channels: 1,
            out_channels: 3,
            base_filters: 16,
            depth: 5,
            eta: 0.8,
            sr_factor: 2,
            residual_order: ResidualOrder::FlowThenIntensity,
            leaky_slope: 0.2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.depth < 2 {
            return cfg(format!("depth must be at least 2, got {}", self.depth));
        }
        if self.base_filters == 0 || self.channels == 0 || self.out_channels == 0 {
            return cfg("base_filters, channels and out_channels must be positive".into());
        }
        if self.out_channels != self.channels && self.channels != 1 {
            return cfg(format!(
                "out_channels {} must equal channels {} unless the input is single-channel",
                self.out_channels, self.channels
            ));
        }
        let [h, w] = self.input_hw;
        self.check_extent(h, w)?;
        if self.views == 0 || (self.views % 2 == 0 && self.views != 8) {
            return cfg(format!(
                "views must be odd (or 8 for the full-size network), got {}",
                self.views
            ));
        }
        if !self.eta.is_finite() {
            return cfg(format!("eta must be finite, got {}", self.eta));
        }
        if self.sr_factor != 2 {
            return cfg(format!("sr_factor must be 2, got {}", self.sr_factor));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope.is_finite()) {
            return cfg(format!(
                "leaky_slope must be positive, got {}",
                self.leaky_slope
            ));
        }
        Ok(())
    }

    /// Checks that an `h x w` input survives `depth` stride-2 levels.
    pub fn check_extent(&self, h: usize, w: usize) -> Result<()> {
        let m = 1usize << self.depth;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::Config(format!(
                "input {h}x{w} is not divisible by 2^depth = {m}"
            )));
        }
        Ok(())
    }

    /// Encoder filters at level `k` (1-based).
    pub fn enc_filters(&self, k: usize) -> usize {
        self.base_filters << (k - 1)
    }

    pub fn bottleneck_filters(&self) -> usize {
        self.base_filters << self.depth
    }

    /// Decoder filters at level `k`: encoder width, floored at four times
    /// the base width.
    pub fn dec_filters(&self, k: usize) -> usize {
        self.enc_filters(k).max(4 * self.base_filters)
    }

    pub fn view_count(&self) -> usize {
        self.views * self.views
    }

    pub fn flow_channels(&self) -> usize {
        2 * self.view_count()
    }

    pub fn residual_channels(&self) -> usize {
        self.view_count() * self.out_channels
    }

    pub fn prior_channels(&self, prior: Prior) -> usize {
        match prior {
            Prior::Flow => self.flow_channels(),
            Prior::Intensity => self.view_count() * self.channels,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// 64-bit FNV-1a hash of the compact JSON form.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(self.to_json().as_bytes())
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

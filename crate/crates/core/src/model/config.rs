use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How each input window is normalized before modelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    /// Subtract the last lookback value of every channel.
    #[default]
    LastValue,
    /// Subtract the window mean and divide by the window standard deviation.
    MeanStd,
}

/// Operating width of the selective state-space block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MambaWidth {
    /// Width equals the channel count; the block mixes channels.
    #[default]
    Channels,
    /// Width one, shared across channels.
    PerChannel,
}

/// Which of the four ablation variants a configuration describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "M&LR")]
    MambaLr,
    #[serde(rename = "LR")]
    Lr,
    #[serde(rename = "M")]
    Mamba,
    #[serde(rename = "none")]
    Plain,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::MambaLr, Variant::Lr, Variant::Mamba, Variant::Plain];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::MambaLr => "M&LR",
            Variant::Lr => "LR",
            Variant::Mamba => "M",
            Variant::Plain => "none",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.tag().eq_ignore_ascii_case(tag))
    }

    pub fn use_mamba(self) -> bool {
        matches!(self, Variant::MambaLr | Variant::Mamba)
    }

    pub fn use_lr(self) -> bool {
        matches!(self, Variant::MambaLr | Variant::Lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub channels: usize,
    pub seg_len: usize,
    pub d_model: usize,
    pub dropout: f64,
    pub use_mamba: bool,
    /// Implicit segmentation together with the residual bypass.
    pub use_lr: bool,
    pub use_conv: bool,
    pub d_state: usize,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default)]
    pub norm: NormKind,
    /// One compress map per segment instead of a single shared one.
    #[serde(default)]
    pub per_segment_compress: bool,
    #[serde(default)]
    pub mamba_width: MambaWidth,
}

fn default_conv_kernel() -> usize {
    4
}

impl ModelConfig {
    /// Full model with default toggles for the given shape.
    pub fn new(lookback: usize, horizon: usize, channels: usize, seg_len: usize, d_model: usize) -> Self {
        Self {
            lookback,
            horizon,
            channels,
            seg_len,
            d_model,
            dropout: 0.0,
            use_mamba: true,
            use_lr: true,
            use_conv: false,
            d_state: 4,
            conv_kernel: default_conv_kernel(),
            norm: NormKind::LastValue,
            per_segment_compress: false,
            mamba_width: MambaWidth::Channels,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.use_mamba = variant.use_mamba();
        self.use_lr = variant.use_lr();
        self
    }

    pub fn variant(&self) -> Variant {
        match (self.use_mamba, self.use_lr) {
            (true, true) => Variant::MambaLr,
            (false, true) => Variant::Lr,
            (true, false) => Variant::Mamba,
            (false, false) => Variant::Plain,
        }
    }

    /// Number of input segments, `L / w`.
    pub fn n_segments(&self) -> usize {
        self.lookback / self.seg_len
    }

    /// Number of decoded segments, `ceil(H / w)`.
    pub fn m_segments(&self) -> usize {
        self.horizon.div_ceil(self.seg_len)
    }

    /// Width of the state-space block's model dimension.
    pub fn mamba_d_model(&self) -> usize {
        match self.mamba_width {
            MambaWidth::Channels => self.channels,
            MambaWidth::PerChannel => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lookback", self.lookback),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("seg_len", self.seg_len),
            ("d_model", self.d_model),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::param(name, "must be positive"));
            }
        }
        if !self.lookback.is_multiple_of(self.seg_len) {
            return Err(Error::param(
                "seg_len",
                format!("lookback {} is not divisible by seg_len {}", self.lookback, self.seg_len),
            ));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::param("d_model", format!("{} must be even", self.d_model)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::param("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        if self.use_mamba && self.d_state == 0 {
            return Err(Error::param("d_state", "must be positive"));
        }
        if self.use_mamba && self.use_conv && self.conv_kernel == 0 {
            return Err(Error::param("conv_kernel", "must be positive"));
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Conv2dSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum HeadMode {
    /// Two outputs, the gaze position in screen pixels.
    Regression,
    /// One logit per gaze cluster.
    Classification { classes: usize },
}

impl HeadMode {
    pub fn outputs(&self) -> usize {
        match self {
            HeadMode::Regression => 2,
            HeadMode::Classification { classes } => *classes,
        }
    }
}

/// Hyperparameters of the network. Defaults give the full-size model
/// (129 electrodes × 500 samples, ViT-Base encoder).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub timesteps: usize,
    pub temporal_filters: usize,
    pub temporal_kernel: (usize, usize),
    pub temporal_stride: (usize, usize),
    pub temporal_pad: (usize, usize),
    /// Whether the depthwise-separable block sits between the temporal and
    /// channel convolutions.
    pub ds_block: bool,
    /// Odd-sized kernel, stride 1, padded to keep the grid size.
    pub ds_depthwise_kernel: (usize, usize),
    pub ds_pointwise_out: usize,
    pub channel_kernel: (usize, usize),
    pub channel_stride: (usize, usize),
    pub channel_pad: (usize, usize),
    pub token_dim: usize,
    pub hidden_dim: usize,
    pub encoder_depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub dropout_p: f64,
    pub head: HeadMode,
    /// Regression outputs are `offset + scale · raw`, so the network works
    /// in roughly unit range while predictions come out in pixels.
    pub output_offset: [f64; 2],
    pub output_scale: [f64; 2],
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 129,
            timesteps: 500,
            temporal_filters: 256,
            temporal_kernel: (1, 36),
            temporal_stride: (1, 36),
            temporal_pad: (0, 2),
            ds_block: true,
            ds_depthwise_kernel: (3, 3),
            ds_pointwise_out: 512,
            channel_kernel: (8, 1),
            channel_stride: (8, 1),
            channel_pad: (1, 0),
            token_dim: 512,
            hidden_dim: 768,
            encoder_depth: 12,
            heads: 12,
            mlp_dim: 3072,
            dropout_p: 0.1,
            head: HeadMode::Regression,
            output_offset: [400.0, 300.0],
            output_scale: [400.0, 300.0],
            norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    /// Small configuration used for smoke tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            channels: 8,
            timesteps: 40,
            temporal_filters: 8,
            ds_pointwise_out: 16,
            token_dim: 16,
            hidden_dim: 32,
            encoder_depth: 2,
            heads: 2,
            mlp_dim: 64,
            ..Self::default()
        }
    }

    pub fn with_head(mut self, head: HeadMode) -> Self {
        self.head = head;
        self
    }

    pub fn temporal_spec(&self) -> Result<Conv2dSpec> {
        Conv2dSpec::new(
            1,
            self.temporal_filters,
            self.temporal_kernel,
            self.temporal_stride,
            self.temporal_pad,
            1,
        )
    }

    pub fn ds_depthwise_spec(&self) -> Result<Conv2dSpec> {
        let (kh, kw) = self.ds_depthwise_kernel;
        Conv2dSpec::new(
            self.temporal_filters,
            self.temporal_filters,
            (kh, kw),
            (1, 1),
            (kh / 2, kw / 2),
            self.temporal_filters,
        )
    }

    pub fn ds_pointwise_spec(&self) -> Result<Conv2dSpec> {
        Conv2dSpec::new(self.temporal_filters, self.ds_pointwise_out, (1, 1), (1, 1), (0, 0), 1)
    }

    /// Depthwise convolution across electrodes; one group per incoming
    /// feature map.
    pub fn channel_spec(&self) -> Result<Conv2dSpec> {
        let input = if self.ds_block {
            self.ds_pointwise_out
        } else {
            self.temporal_filters
        };
        Conv2dSpec::new(
            input,
            self.token_dim,
            self.channel_kernel,
            self.channel_stride,
            self.channel_pad,
            input,
        )
    }

    /// Spatial size after the temporal convolution.
    pub fn temporal_grid(&self) -> Result<(usize, usize)> {
        self.temporal_spec()?.output_size(self.channels, self.timesteps)
    }

    /// Token grid (rows, columns) produced by the patch embedding.
    pub fn token_grid(&self) -> Result<(usize, usize)> {
        let (h, w) = self.temporal_grid()?;
        self.channel_spec()?.output_size(h, w)
    }

    pub fn num_tokens(&self) -> Result<usize> {
        let (h, w) = self.token_grid()?;
        Ok(h * w)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 || self.timesteps == 0 {
            return bad("channels and timesteps must be positive".into());
        }
        if self.ds_block {
            let (kh, kw) = self.ds_depthwise_kernel;
            if kh % 2 == 0 || kw % 2 == 0 {
                return bad(format!("depthwise kernel {kh}x{kw} must be odd to keep the grid size"));
            }
            self.ds_depthwise_spec()?;
            self.ds_pointwise_spec()?;
        }
        self.token_grid()?;
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.mlp_dim == 0 {
            return bad("mlp_dim must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if let HeadMode::Classification { classes } = self.head {
            if classes < 2 {
                return bad(format!("classification needs at least 2 classes, got {classes}"));
            }
        }
        if self.norm_eps <= 0.0 {
            return bad("norm_eps must be positive".into());
        }
        Ok(())
    }
}

/// Returns `config` with the depthwise-separable block switched on or off.
/// Applying it twice gives back the original configuration.
pub fn ds_block_toggle(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        ds_block: !config.ds_block,
        ..config.clone()
    }
}

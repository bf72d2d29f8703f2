use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Geometry of a grouped 2-D cross-correlation (no kernel flip).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        groups: usize,
    ) -> Result<Self> {
        let spec = Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            groups,
            ..
        } = *self;
        if in_channels == 0 || out_channels == 0 || groups == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv channels and groups must be positive: {self:?}"
            )));
        }
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::InvalidConfig(format!(
                "conv kernel and stride must be positive: {self:?}"
            )));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {in_channels}->{out_channels} not divisible by groups {groups}"
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    /// `floor((n + 2p - k) / s) + 1` along both axes; errors when either side
    /// would be empty.
    pub fn output_size(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let axis = |n: usize, k: usize, s: usize, p: usize, name: &str| {
            let padded = n + 2 * p;
            if padded < k {
                return Err(Error::shape(
                    "conv2d",
                    format!("{name}: padded extent {padded} smaller than kernel {k}"),
                ));
            }
            Ok((padded - k) / s + 1)
        };
        let h = axis(height, self.kernel.0, self.stride.0, self.padding.0, "height")?;
        let w = axis(width, self.kernel.1, self.stride.1, self.padding.1, "width")?;
        Ok((h, w))
    }

    pub fn parameter_count(&self, bias: bool) -> usize {
        let w: usize = self.weight_shape().iter().product();
        w + if bias { self.out_channels } else { 0 }
    }
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn check_shapes(
    spec: &Conv2dSpec,
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
) -> Result<ConvDims> {
    spec.validate()?;
    if input.len() != 4 {
        return Err(Error::shape("conv2d", format!("input must be rank 4, got {input:?}")));
    }
    if input[1] != spec.in_channels {
        return Err(Error::shape(
            "conv2d",
            format!("input has {} channels, spec expects {}", input[1], spec.in_channels),
        ));
    }
    if weight != spec.weight_shape() {
        return Err(Error::shape(
            "conv2d",
            format!("weight {weight:?}, expected {:?}", spec.weight_shape()),
        ));
    }
    if let Some(b) = bias {
        if b != [spec.out_channels] {
            return Err(Error::shape(
                "conv2d",
                format!("bias {b:?}, expected [{}]", spec.out_channels),
            ));
        }
    }
    let (out_h, out_w) = spec.output_size(input[2], input[3])?;
    Ok(ConvDims {
        batch: input[0],
        height: input[2],
        width: input[3],
        out_h,
        out_w,
    })
}

/// Visits every (output index, input index, weight index) triple that
/// contributes to the convolution. Both the forward pass and the two
/// backward passes are expressed through this one walk so they share the
/// padding and grouping logic.
#[inline]
fn for_each_tap(
    spec: &Conv2dSpec,
    d: &ConvDims,
    mut f: impl FnMut(usize, usize, usize),
) {
    let cin_g = spec.in_channels / spec.groups;
    let cout_g = spec.out_channels / spec.groups;
    let (kh, kw) = spec.kernel;
    let (sh, sw) = spec.stride;
    let (ph, pw) = spec.padding;
    for b in 0..d.batch {
        for oc in 0..spec.out_channels {
            let g = oc / cout_g;
            let out_base = (b * spec.out_channels + oc) * d.out_h * d.out_w;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                let in_base = (b * spec.in_channels + ic) * d.height * d.width;
                for ki in 0..kh {
                    for kj in 0..kw {
                        let w_idx = ((oc * cin_g + icg) * kh + ki) * kw + kj;
                        for oh in 0..d.out_h {
                            let ih = (oh * sh + ki) as isize - ph as isize;
                            if ih < 0 || ih as usize >= d.height {
                                continue;
                            }
                            let row_in = in_base + ih as usize * d.width;
                            let row_out = out_base + oh * d.out_w;
                            for ow in 0..d.out_w {
                                let iw = (ow * sw + kj) as isize - pw as isize;
                                if iw < 0 || iw as usize >= d.width {
                                    continue;
                                }
                                f(row_out + ow, row_in + iw as usize, w_idx);
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(
    spec: &Conv2dSpec,
    d: &ConvDims,
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
) -> Vec<f64> {
    let plane = d.out_h * d.out_w;
    let mut out = vec![0.0; d.batch * spec.out_channels * plane];
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(plane).enumerate() {
            chunk.fill(bias[i % spec.out_channels]);
        }
    }
    for_each_tap(spec, d, |o, i, w| out[o] += input[i] * weight[w]);
    out
}

pub(crate) fn backward_input(
    spec: &Conv2dSpec,
    d: &ConvDims,
    grad_out: &[f64],
    weight: &[f64],
) -> Vec<f64> {
    let mut gi = vec![0.0; d.batch * spec.in_channels * d.height * d.width];
    for_each_tap(spec, d, |o, i, w| gi[i] += grad_out[o] * weight[w]);
    gi
}

pub(crate) fn backward_weight(
    spec: &Conv2dSpec,
    d: &ConvDims,
    grad_out: &[f64],
    input: &[f64],
) -> Vec<f64> {
    let mut gw = vec![0.0; spec.weight_shape().iter().product()];
    for_each_tap(spec, d, |o, i, w| gw[w] += grad_out[o] * input[i]);
    gw
}

pub(crate) fn backward_bias(spec: &Conv2dSpec, d: &ConvDims, grad_out: &[f64]) -> Vec<f64> {
    let plane = d.out_h * d.out_w;
    let mut gb = vec![0.0; spec.out_channels];
    for (i, chunk) in grad_out.chunks(plane).enumerate() {
        gb[i % spec.out_channels] += chunk.iter().sum::<f64>();
    }
    gb
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_size_formula() {
        let spec = Conv2dSpec::new(1, 256, (1, 36), (1, 36), (0, 2), 1).unwrap();
        assert_eq!(spec.output_size(129, 500).unwrap(), (129, 14));
        let chan = Conv2dSpec::new(512, 512, (8, 1), (8, 1), (1, 0), 512).unwrap();
        assert_eq!(chan.output_size(129, 14).unwrap(), (16, 14));
    }

    #[test]
    fn rejects_bad_groups_and_empty_output() {
        assert!(Conv2dSpec::new(3, 4, (1, 1), (1, 1), (0, 0), 2).is_err());
        let spec = Conv2dSpec::new(1, 1, (5, 5), (1, 1), (0, 0), 1).unwrap();
        assert!(spec.output_size(3, 8).is_err());
    }

    #[test]
    fn depthwise_flag() {
        let spec = Conv2dSpec::new(4, 8, (3, 3), (1, 1), (1, 1), 4).unwrap();
        assert!(spec.is_depthwise());
        assert_eq!(spec.weight_shape(), [8, 1, 3, 3]);
        assert_eq!(spec.parameter_count(true), 8 * 9 + 8);
    }
}

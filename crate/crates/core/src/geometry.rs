//! Dilated convolution geometry.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Square-input convolution geometry: input extent `m`, zero padding `p`,
/// kernel size `k`, dilation rate `r` and stride `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub input_size: usize,
    pub padding: usize,
    pub kernel_size: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl ConvGeometry {
    /// Geometry with stride 1 and "same" padding `p = dilation * (k - 1) / 2`.
    pub fn same(input_size: usize, kernel_size: usize, dilation: usize) -> Self {
        Self {
            input_size,
            padding: dilation * (kernel_size - 1) / 2,
            kernel_size,
            dilation,
            stride: 1,
        }
    }

    /// Span covered by the dilated kernel: `k + (k - 1)(r - 1)`.
    pub fn effective_kernel(&self) -> usize {
        self.kernel_size + (self.kernel_size.saturating_sub(1)) * (self.dilation.saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.kernel_size == 0 {
            return Err(Error::InvalidGeometry(format!(
                "input size and kernel size must be positive ({self:?})"
            )));
        }
        if self.dilation == 0 || self.stride == 0 {
            return Err(Error::InvalidGeometry(format!(
                "dilation and stride must be at least 1 ({self:?})"
            )));
        }
        let padded = self.input_size + 2 * self.padding;
        let eff = self.effective_kernel();
        if eff > padded {
            return Err(Error::InvalidGeometry(format!(
                "effective kernel {eff} exceeds padded input {padded}"
            )));
        }
        Ok(())
    }

    /// Output extent `floor((m + 2p - k') / s) + 1`.
    pub fn output_size(&self) -> Result<usize> {
        self.validate()?;
        Ok((self.input_size + 2 * self.padding - self.effective_kernel()) / self.stride + 1)
    }
}

pub fn output_size(g: &ConvGeometry) -> Result<usize> {
    g.output_size()
}

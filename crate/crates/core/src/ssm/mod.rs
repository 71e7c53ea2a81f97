//! State space sublayers: kernel generation (structured diagonal systems or
//! unstructured filters), batched FFT convolution and width projection.

mod conv;
mod diagonal;
mod unstructured;

pub use conv::{conv_op, multichannel_convolution};
pub use diagonal::{init_s4d, structured_kernel, DiagonalSsm, DiagonalVars, DiscreteSsm, DELTA_MAX, DELTA_MIN};
pub use unstructured::{
    build_unstructured, filter_positions, init_unstructured, positional_encoding, UnstructuredFilter, UnstructuredVars,
    POS_FEATURES, POS_FREQS,
};

use crate::context::Variant;
use crate::error::{config_err, dim_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    Structured,
    Unstructured,
}

impl KernelFamily {
    pub fn name(self) -> &'static str {
        match self {
            Self::Structured => "structured",
            Self::Unstructured => "unstructured",
        }
    }
}

impl std::str::FromStr for KernelFamily {
    type Err = crate::BstError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structured" | "s4" | "ssm" => Ok(Self::Structured),
            "unstructured" | "filter" => Ok(Self::Unstructured),
            _ => Err(config_err(format!("unknown kernel family `{s}`"))),
        }
    }
}

/// Materialised kernels, shape (len, channels, dims).
#[derive(Clone, Debug)]
pub struct KernelBank<T: Real = f64> {
    pub family: KernelFamily,
    pub kernels: Tensor<T>,
}

impl<T: Real> KernelBank<T> {
    pub fn len(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.kernels.shape()[1]
    }

    pub fn dims(&self) -> usize {
        self.kernels.shape()[2]
    }

    /// One kernel as a sequence over time.
    pub fn kernel(&self, channel: usize, dim: usize) -> Result<Vec<T>> {
        let (c, d) = (self.channels(), self.dims());
        if channel >= c || dim >= d {
            return Err(dim_err(format!("kernel ({channel}, {dim}) outside ({c}, {d})")));
        }
        Ok((0..self.len()).map(|t| self.kernels.data()[(t * c + channel) * d + dim]).collect())
    }
}

/// Either generator, able to produce a bank at any length.
#[derive(Clone, Debug)]
pub enum KernelSource<T: Real = f64> {
    Structured(DiagonalSsm<T>),
    Unstructured(UnstructuredFilter<T>),
}

impl<T: Real> KernelSource<T> {
    pub fn family(&self) -> KernelFamily {
        match self {
            Self::Structured(_) => KernelFamily::Structured,
            Self::Unstructured(_) => KernelFamily::Unstructured,
        }
    }

    pub fn materialize(&self, len: usize) -> Result<KernelBank<T>> {
        let kernels = match self {
            Self::Structured(s) => s.materialize_kernel(len)?,
            Self::Unstructured(f) => f.build(len)?,
        };
        Ok(KernelBank { family: self.family(), kernels })
    }
}

/// Width of the SSM path. With down-sampling it is a quarter of the model
/// width (an eighth for the multi-filter variant), otherwise the full width.
pub fn ssm_width(d_model: usize, variant: Variant, downsample: bool) -> Result<usize> {
    if !downsample {
        return Ok(d_model);
    }
    let div = match variant {
        Variant::MultiFilter => 8,
        _ => 4,
    };
    if !d_model.is_multiple_of(div) || d_model == 0 {
        return Err(config_err(format!(
            "model width {d_model} is not divisible by {div} for {} down-sampling",
            variant.name()
        )));
    }
    Ok(d_model / div)
}

//! Dense tensors, reverse-mode differentiation and the primitive operations the model is built
//! from.

pub mod drt1;
pub mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod scalar;
mod tensor;

pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use params::{ParamStore, MANIFEST};
pub use scalar::Scalar;
pub use tensor::Tensor;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// 1x1 convolution, kernel `(c_out, c_in)`.
    Pointwise,
    /// 3x3 per-channel convolution with same padding, kernel `(c, 3, 3)`.
    Depthwise3x3,
}

/// Convolution over a `(c, h, w)` feature map; spatial extents are preserved.
pub fn conv2d<T: Scalar>(g: &mut Graph<T>, x: Var, kernel: Var, kind: ConvKind) -> Result<Var> {
    match kind {
        ConvKind::Pointwise => {
            let xd = g.dims(x).to_vec();
            let kd = g.dims(kernel).to_vec();
            if xd.len() != 3 || kd.len() != 2 || kd[1] != xd[0] {
                return Err(Error::dim("conv2d", format!("{xd:?} with 1x1 kernel {kd:?}")));
            }
            let flat = g.reshape(x, &[xd[0], xd[1] * xd[2]])?;
            let y = g.matmul(kernel, flat)?;
            g.reshape(y, &[kd[0], xd[1], xd[2]])
        }
        ConvKind::Depthwise3x3 => g.depthwise3x3(x, kernel),
    }
}

/// `W x + b` for a vector `x`; `W` is `(out, in)`, `b` is `(out)`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let n = g.value(x).len();
    let col = g.reshape(x, &[n, 1])?;
    let y = g.matmul(w, col)?;
    let out = g.dims(y)[0];
    let y = g.reshape(y, &[out])?;
    match b {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Everything the renderer needs is expressed with the primitives here, so a
//! single forward pass over the whole image can be differentiated end to end.
//! Fused operations specific to a stage (projection, bilinear sampling,
//! positional encoding) live next to the stage that uses them.

mod nn;
mod ops;
mod tensor;
mod var;

pub use nn::{he_uniform, lecun_uniform, Conv2d, Linear, LstmCell, Parameters};
pub(crate) use nn::join_prefix;
pub use tensor::{gemm, Scalar, Tensor};
pub use var::{BackwardFn, Gradients, Var};

/// Flushes subnormal floats to zero on the current thread while alive.
///
/// Saturated sigmoids produce subnormal gradients, which are two orders of
/// magnitude slower on x86; training and rendering run under this guard.
pub struct FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    saved: u32,
}

impl FlushDenormals {
    #[cfg(target_arch = "x86_64")]
    #[allow(deprecated)]
    pub fn new() -> Self {
        use std::arch::x86_64::{_mm_getcsr, _mm_setcsr};
        const FTZ_DAZ: u32 = 0x8040;
        // SAFETY: only the FTZ and DAZ control bits are changed; SSE is always present on x86_64.
        let saved = unsafe { _mm_getcsr() };
        unsafe { _mm_setcsr(saved | FTZ_DAZ) };
        Self { saved }
    }

    #[cfg(not(target_arch = "x86_64"))]
    pub fn new() -> Self {
        Self {}
    }
}

impl Default for FlushDenormals {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for FlushDenormals {
    fn drop(&mut self) {
        #[cfg(target_arch = "x86_64")]
        #[allow(deprecated)]
        // SAFETY: restores the value read in `new`.
        unsafe {
            std::arch::x86_64::_mm_setcsr(self.saved)
        };
    }
}


/// Turns every parameter into a constant (`trainable = false`) or back into
/// a gradient-tracking leaf.
pub fn set_trainable<T: Scalar, M: Parameters<T> + ?Sized>(module: &mut M, trainable: bool) {
    module.visit_mut("", &mut |_, v| {
        let value = v.value().clone();
        *v = if trainable {
            Var::leaf(value)
        } else {
            Var::constant(value)
        };
    });
}

/// Named copies of all parameter values, in visiting order.
pub fn export_parameters<T: Scalar, M: Parameters<T> + ?Sized>(module: &M) -> Vec<(String, Tensor<T>)> {
    let mut out = Vec::new();
    module.visit("", &mut |name, v| out.push((name.to_string(), v.value().clone())));
    out
}

/// Error raised when imported parameters do not line up with a module.
#[derive(Debug, thiserror::Error)]
#[error("parameter mismatch at {name}: {reason}")]
pub struct ParameterMismatch {
    pub name: String,
    pub reason: String,
}

/// Overwrites parameter values by name, converting the element type.
/// Trainability of each parameter is preserved.
pub fn import_parameters<T: Scalar, U: Scalar, M: Parameters<T> + ?Sized>(
    module: &mut M,
    values: &[(String, Tensor<U>)],
) -> Result<(), ParameterMismatch> {
    let mut idx = 0;
    let mut err = None;
    module.visit_mut("", &mut |name, v| {
        if err.is_some() {
            return;
        }
        let Some((src_name, src)) = values.get(idx) else {
            err = Some(ParameterMismatch {
                name: name.to_string(),
                reason: "missing from source".into(),
            });
            return;
        };
        idx += 1;
        if src_name != name || src.shape() != v.shape() {
            err = Some(ParameterMismatch {
                name: name.to_string(),
                reason: format!("found {src_name} with shape {:?}, expected {:?}", src.shape(), v.shape()),
            });
            return;
        }
        let value = src.cast::<T>();
        *v = if v.requires_grad() {
            Var::leaf(value)
        } else {
            Var::constant(value)
        };
    });
    if let Some(e) = err {
        return Err(e);
    }
    if idx != values.len() {
        return Err(ParameterMismatch {
            name: values[idx].0.clone(),
            reason: "unexpected extra parameter".into(),
        });
    }
    Ok(())
}

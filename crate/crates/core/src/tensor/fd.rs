//! Central finite differences, the numerical oracle for backward passes.

use crate::error::Result;
use crate::tensor::{Elem, Tensor};

/// Estimates `∂f/∂x` element-wise via the central difference
/// `(f(x + h·e_i) - f(x - h·e_i)) / (2h)`.
///
/// `f` is evaluated `2·len(x)` times, so this is strictly a test oracle for
/// small tensors. Panics if `h` is not positive.
pub fn finite_difference_gradient<T, F>(mut f: F, x: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Elem,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    assert!(h > T::zero(), "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    let two_h = h + h;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / two_h;
    }
    Ok(grad)
}

//! Forward and backward kernels for the layers the network is built from.

pub mod conv;
pub mod norm;
pub mod resample;

pub use conv::{conv3d, conv3d_backward, ConvGeometry};

use crate::tensor::{Real, Tensor5};

pub fn relu_in_place<T: Real>(x: &mut Tensor5<T>) {
    for v in x.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Masks `dy` by the activation pattern recorded in the ReLU output `y`.
pub fn relu_backward<T: Real>(y: &Tensor5<T>, mut dy: Tensor5<T>) -> Tensor5<T> {
    for (g, &o) in dy.data_mut().iter_mut().zip(y.data()) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
    dy
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn add_into<T: Real>(acc: &mut Tensor5<T>, other: &Tensor5<T>) {
    debug_assert_eq!(acc.shape(), other.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(other.data()) {
        *a += b;
    }
}

use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Element type a [`Graph`](super::Graph) computes in. Tensors always store
/// f32; a graph over f64 widens them on binding.
pub trait Real:
    Float + AddAssign + SubAssign + MulAssign + DivAssign + Sum + Debug + Send + Sync + 'static
{
    fn of_f32(x: f32) -> Self;
    fn as_f32(self) -> f32;
    fn as_f64(self) -> f64;
    fn same_bits(self, other: Self) -> bool;
}

impl Real for f32 {
    fn of_f32(x: f32) -> Self {
        x
    }
    fn as_f32(self) -> f32 {
        self
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn same_bits(self, other: Self) -> bool {
        self.to_bits() == other.to_bits()
    }
}

impl Real for f64 {
    fn of_f32(x: f32) -> Self {
        f64::from(x)
    }
    fn as_f32(self) -> f32 {
        self as f32
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn same_bits(self, other: Self) -> bool {
        self.to_bits() == other.to_bits()
    }
}

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

/// Storage precision tag, written into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }
}

/// Scalar element of a tensor. 64-bit is the default throughout the
/// model stack; 32-bit is available for raw tensor work.
pub trait Element:
    Copy
    + PartialEq
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
{
    const DTYPE: DType;

    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn is_finite_v(self) -> bool;
    fn exp_v(self) -> Self;
    fn ln_v(self) -> Self;
    fn tanh_v(self) -> Self;
    fn powf_v(self, p: Self) -> Self;
    fn sqrt_v(self) -> Self;
    fn abs_v(self) -> Self;
    fn max_v(self, other: Self) -> Self;
}

macro_rules! impl_element {
    ($t:ty, $dtype:expr) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;

            fn zero() -> Self {
                0.0
            }
            fn one() -> Self {
                1.0
            }
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn is_finite_v(self) -> bool {
                self.is_finite()
            }
            fn exp_v(self) -> Self {
                self.exp()
            }
            fn ln_v(self) -> Self {
                self.ln()
            }
            fn tanh_v(self) -> Self {
                self.tanh()
            }
            fn powf_v(self, p: Self) -> Self {
                self.powf(p)
            }
            fn sqrt_v(self) -> Self {
                self.sqrt()
            }
            fn abs_v(self) -> Self {
                self.abs()
            }
            fn max_v(self, other: Self) -> Self {
                self.max(other)
            }
        }
    };
}

impl_element!(f32, DType::F32);
impl_element!(f64, DType::F64);

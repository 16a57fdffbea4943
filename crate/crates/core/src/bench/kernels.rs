//! The four STREAM kernels over plain slices, plus the scalar recurrence used
//! to validate results.

use std::fmt;
use std::str::FromStr;

/// Index of each array in `[a, b, c]`.
pub const A: usize = 0;
pub const B: usize = 1;
pub const C: usize = 2;

pub const INIT_A: f64 = 1.0;
pub const INIT_B: f64 = 2.0;
pub const INIT_C: f64 = 0.0;
pub const DEFAULT_SCALAR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Kernel {
    Copy,
    Scale,
    Add,
    Triad,
}

impl Kernel {
    /// STREAM order.
    pub const ALL: [Kernel; 4] = [Kernel::Copy, Kernel::Scale, Kernel::Add, Kernel::Triad];

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Copy => "copy",
            Kernel::Scale => "scale",
            Kernel::Add => "add",
            Kernel::Triad => "triad",
        }
    }

    /// Bytes read plus written per element.
    pub fn bytes_per_element(self) -> u64 {
        match self {
            Kernel::Copy | Kernel::Scale => 2 * 8,
            Kernel::Add | Kernel::Triad => 3 * 8,
        }
    }

    pub fn bytes_moved(self, elements: u64) -> u64 {
        self.bytes_per_element() * elements
    }

    pub fn inputs(self) -> &'static [usize] {
        match self {
            Kernel::Copy => &[A],
            Kernel::Scale => &[C],
            Kernel::Add => &[A, B],
            Kernel::Triad => &[B, C],
        }
    }

    pub fn output(self) -> usize {
        match self {
            Kernel::Copy => C,
            Kernel::Scale => B,
            Kernel::Add => C,
            Kernel::Triad => A,
        }
    }

    /// Applies the kernel to one span. `ins` follows [`Kernel::inputs`].
    pub fn apply(self, scalar: f64, ins: &[&[f64]], out: &mut [f64]) {
        match self {
            Kernel::Copy => out.copy_from_slice(ins[0]),
            Kernel::Scale => {
                for (o, &c) in out.iter_mut().zip(ins[0]) {
                    *o = scalar * c;
                }
            }
            Kernel::Add => {
                for ((o, &a), &b) in out.iter_mut().zip(ins[0]).zip(ins[1]) {
                    *o = a + b;
                }
            }
            Kernel::Triad => {
                for ((o, &b), &c) in out.iter_mut().zip(ins[0]).zip(ins[1]) {
                    *o = b + scalar * c;
                }
            }
        }
    }

    /// The value the kernel produces from single input elements.
    pub fn element(self, scalar: f64, ins: &[f64]) -> f64 {
        match self {
            Kernel::Copy => ins[0],
            Kernel::Scale => scalar * ins[0],
            Kernel::Add => ins[0] + ins[1],
            Kernel::Triad => ins[0] + scalar * ins[1],
        }
    }
}

impl fmt::Display for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Kernel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Kernel::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown kernel `{s}`"))
    }
}

/// Every element of a STREAM array holds the same value at any point, so the
/// whole benchmark state reduces to three scalars.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarState {
    pub values: [f64; 3],
}

impl Default for ScalarState {
    fn default() -> Self {
        Self {
            values: [INIT_A, INIT_B, INIT_C],
        }
    }
}

impl ScalarState {
    pub fn step(&mut self, kernel: Kernel, scalar: f64) {
        let ins: Vec<f64> = kernel.inputs().iter().map(|&i| self.values[i]).collect();
        self.values[kernel.output()] = kernel.element(scalar, &ins);
    }
}

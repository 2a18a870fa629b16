//! Closed-form algebra for symmetric 2×2 matrices.

use serde::{Deserialize, Serialize};

/// Symmetric 2×2 matrix `[[a11, a12], [a12, a22]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sym2 {
    pub a11: f64,
    pub a12: f64,
    pub a22: f64,
}

impl Sym2 {
    pub const fn new(a11: f64, a12: f64, a22: f64) -> Self {
        Self { a11, a12, a22 }
    }

    pub const fn identity() -> Self {
        Self::new(1.0, 0.0, 1.0)
    }

    pub const fn diag(d1: f64, d2: f64) -> Self {
        Self::new(d1, 0.0, d2)
    }

    pub const fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// `v vᵀ`
    pub fn outer(v: [f64; 2]) -> Self {
        Self::new(v[0] * v[0], v[0] * v[1], v[1] * v[1])
    }

    pub fn det(&self) -> f64 {
        self.a11 * self.a22 - self.a12 * self.a12
    }

    pub fn trace(&self) -> f64 {
        self.a11 + self.a22
    }

    pub fn is_positive_definite(&self) -> bool {
        self.a11 > 0.0 && self.a22 > 0.0 && self.det() > 0.0
    }

    pub fn is_finite(&self) -> bool {
        self.a11.is_finite() && self.a12.is_finite() && self.a22.is_finite()
    }

    /// Inverse, or `None` when the determinant is not strictly positive
    /// relative to the scale of the entries.
    pub fn inverse(&self) -> Option<Self> {
        let det = self.det();
        let scale = self.a11.abs().max(self.a22.abs()).max(self.a12.abs());
        if !(det > f64::EPSILON * scale * scale) || !det.is_finite() {
            return None;
        }
        Some(Self::new(self.a22 / det, -self.a12 / det, self.a11 / det))
    }

    pub fn add(&self, other: &Self) -> Self {
        Self::new(self.a11 + other.a11, self.a12 + other.a12, self.a22 + other.a22)
    }

    pub fn scale(&self, s: f64) -> Self {
        Self::new(self.a11 * s, self.a12 * s, self.a22 * s)
    }

    pub fn mul_vec(&self, v: [f64; 2]) -> [f64; 2] {
        [
            self.a11 * v[0] + self.a12 * v[1],
            self.a12 * v[0] + self.a22 * v[1],
        ]
    }

    /// `vᵀ A v`
    pub fn quad(&self, v: [f64; 2]) -> f64 {
        self.a11 * v[0] * v[0] + 2.0 * self.a12 * v[0] * v[1] + self.a22 * v[1] * v[1]
    }

    /// `tr(A B)` for symmetric `A`, `B`.
    pub fn trace_mul(&self, other: &Self) -> f64 {
        self.a11 * other.a11 + 2.0 * self.a12 * other.a12 + self.a22 * other.a22
    }

    /// Lower Cholesky factor `(l11, l21, l22)`; `None` unless positive definite.
    pub fn cholesky(&self) -> Option<(f64, f64, f64)> {
        if !(self.a11 > 0.0) {
            return None;
        }
        let l11 = self.a11.sqrt();
        let l21 = self.a12 / l11;
        let r = self.a22 - l21 * l21;
        if !(r > 0.0) {
            return None;
        }
        Some((l11, l21, r.sqrt()))
    }

    /// `M A Mᵀ` for a general 2×2 `M` given row-major.
    pub fn congruence(&self, m: [[f64; 2]; 2]) -> Self {
        let ma = [
            [
                m[0][0] * self.a11 + m[0][1] * self.a12,
                m[0][0] * self.a12 + m[0][1] * self.a22,
            ],
            [
                m[1][0] * self.a11 + m[1][1] * self.a12,
                m[1][0] * self.a12 + m[1][1] * self.a22,
            ],
        ];
        Self::new(
            ma[0][0] * m[0][0] + ma[0][1] * m[0][1],
            ma[0][0] * m[1][0] + ma[0][1] * m[1][1],
            ma[1][0] * m[1][0] + ma[1][1] * m[1][1],
        )
    }
}

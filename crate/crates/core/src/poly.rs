//! Exact trivariate polynomial algebra.
//!
//! Used as an independent oracle in tests and self-checks: differential
//! identities (curl, divergence, gradients) computed here are exact in the
//! coefficients, so quadrature-based assembly can be validated against them
//! without circular reasoning.

use crate::mesh::Point;
use nalgebra::Vector3;
use std::collections::BTreeMap;

/// A polynomial in three variables with f64 coefficients, stored sparsely by
/// exponent triple. Zero coefficients are never stored.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Poly3 {
    terms: BTreeMap<(u32, u32, u32), f64>,
}

impl Poly3 {
    pub fn zero() -> Self {
        Poly3::default()
    }

    pub fn constant(c: f64) -> Self {
        Poly3::monomial(0, 0, 0, c)
    }

    pub fn monomial(a: u32, b: u32, c: u32, coeff: f64) -> Self {
        let mut p = Poly3::default();
        if coeff != 0.0 {
            p.terms.insert((a, b, c), coeff);
        }
        p
    }

    /// The coordinate polynomials x, y, z.
    pub fn var(axis: usize) -> Self {
        match axis {
            0 => Poly3::monomial(1, 0, 0, 1.0),
            1 => Poly3::monomial(0, 1, 0, 1.0),
            2 => Poly3::monomial(0, 0, 1, 1.0),
            _ => panic!("axis out of range"),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn total_degree(&self) -> usize {
        self.terms
            .keys()
            .map(|&(a, b, c)| (a + b + c) as usize)
            .max()
            .unwrap_or(0)
    }

    pub fn eval(&self, p: &Point) -> f64 {
        self.terms
            .iter()
            .map(|(&(a, b, c), &coeff)| {
                coeff * p.x.powi(a as i32) * p.y.powi(b as i32) * p.z.powi(c as i32)
            })
            .sum()
    }

    pub fn add(&self, other: &Poly3) -> Poly3 {
        let mut out = self.clone();
        for (&key, &coeff) in &other.terms {
            let entry = out.terms.entry(key).or_insert(0.0);
            *entry += coeff;
            if *entry == 0.0 {
                out.terms.remove(&key);
            }
        }
        out
    }

    pub fn sub(&self, other: &Poly3) -> Poly3 {
        self.add(&other.scale(-1.0))
    }

    pub fn scale(&self, factor: f64) -> Poly3 {
        if factor == 0.0 {
            return Poly3::zero();
        }
        Poly3 {
            terms: self
                .terms
                .iter()
                .map(|(&key, &coeff)| (key, factor * coeff))
                .collect(),
        }
    }

    pub fn mul(&self, other: &Poly3) -> Poly3 {
        let mut out = Poly3::default();
        for (&(a1, b1, c1), &x1) in &self.terms {
            for (&(a2, b2, c2), &x2) in &other.terms {
                let key = (a1 + a2, b1 + b2, c1 + c2);
                let entry = out.terms.entry(key).or_insert(0.0);
                *entry += x1 * x2;
                if *entry == 0.0 {
                    out.terms.remove(&key);
                }
            }
        }
        out
    }

    /// Partial derivative along the given axis (0 = x, 1 = y, 2 = z).
    pub fn diff(&self, axis: usize) -> Poly3 {
        let mut out = Poly3::default();
        for (&(a, b, c), &coeff) in &self.terms {
            let (e, key) = match axis {
                0 if a > 0 => (a, (a - 1, b, c)),
                1 if b > 0 => (b, (a, b - 1, c)),
                2 if c > 0 => (c, (a, b, c - 1)),
                0..=2 => continue,
                _ => panic!("axis out of range"),
            };
            let entry = out.terms.entry(key).or_insert(0.0);
            *entry += coeff * e as f64;
            if *entry == 0.0 {
                out.terms.remove(&key);
            }
        }
        out
    }

    pub fn grad(&self) -> VecPoly3 {
        VecPoly3 {
            c: [self.diff(0), self.diff(1), self.diff(2)],
        }
    }
}

/// A polynomial vector field: three [`Poly3`] components.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VecPoly3 {
    pub c: [Poly3; 3],
}

impl VecPoly3 {
    pub fn zero() -> Self {
        VecPoly3::default()
    }

    pub fn new(x: Poly3, y: Poly3, z: Poly3) -> Self {
        VecPoly3 { c: [x, y, z] }
    }

    pub fn constant(v: Vector3<f64>) -> Self {
        VecPoly3 {
            c: [
                Poly3::constant(v.x),
                Poly3::constant(v.y),
                Poly3::constant(v.z),
            ],
        }
    }

    pub fn eval(&self, p: &Point) -> Vector3<f64> {
        Vector3::new(self.c[0].eval(p), self.c[1].eval(p), self.c[2].eval(p))
    }

    pub fn add(&self, other: &VecPoly3) -> VecPoly3 {
        VecPoly3 {
            c: [
                self.c[0].add(&other.c[0]),
                self.c[1].add(&other.c[1]),
                self.c[2].add(&other.c[2]),
            ],
        }
    }

    pub fn scale(&self, factor: f64) -> VecPoly3 {
        VecPoly3 {
            c: [
                self.c[0].scale(factor),
                self.c[1].scale(factor),
                self.c[2].scale(factor),
            ],
        }
    }

    /// Componentwise product with a scalar polynomial.
    pub fn mul_scalar(&self, s: &Poly3) -> VecPoly3 {
        VecPoly3 {
            c: [self.c[0].mul(s), self.c[1].mul(s), self.c[2].mul(s)],
        }
    }

    pub fn curl(&self) -> VecPoly3 {
        VecPoly3 {
            c: [
                self.c[2].diff(1).sub(&self.c[1].diff(2)),
                self.c[0].diff(2).sub(&self.c[2].diff(0)),
                self.c[1].diff(0).sub(&self.c[0].diff(1)),
            ],
        }
    }

    pub fn div(&self) -> Poly3 {
        self.c[0].diff(0).add(&self.c[1].diff(1)).add(&self.c[2].diff(2))
    }

    pub fn dot(&self, other: &VecPoly3) -> Poly3 {
        self.c[0]
            .mul(&other.c[0])
            .add(&self.c[1].mul(&other.c[1]))
            .add(&self.c[2].mul(&other.c[2]))
    }

    pub fn total_degree(&self) -> usize {
        self.c.iter().map(Poly3::total_degree).max().unwrap_or(0)
    }
}

//! Space-filling designs on the unit hypercube.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{PpgError, Result};

const BITS: usize = 32;

/// Joe-Kuo primitive polynomials: (degree s, coefficient bits a, initial m_i).
const JOE_KUO: &[(u32, u32, &[u32])] = &[
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
];

/// Gray-code Sobol generator with an optional digital shift.
#[derive(Debug, Clone)]
pub struct Sobol {
    directions: Vec<[u32; BITS]>,
    shift: Vec<u32>,
}

impl Sobol {
    pub const MAX_DIM: usize = JOE_KUO.len() + 1;

    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 || dim > Self::MAX_DIM {
            return Err(PpgError::Invalid(format!("Sobol dimension must be in 1..={}", Self::MAX_DIM)));
        }
        let mut directions = Vec::with_capacity(dim);
        let mut first = [0u32; BITS];
        for (k, v) in first.iter_mut().enumerate() {
            *v = 1 << (BITS - 1 - k);
        }
        directions.push(first);
        for &(s, a, m) in &JOE_KUO[..dim - 1] {
            let s = s as usize;
            let mut v = [0u32; BITS];
            for k in 0..BITS {
                v[k] = if k < s {
                    m[k] << (BITS - 1 - k)
                } else {
                    let mut x = v[k - s] ^ (v[k - s] >> s);
                    for i in 1..s {
                        if (a >> (s - 1 - i)) & 1 == 1 {
                            x ^= v[k - i];
                        }
                    }
                    x
                };
            }
            directions.push(v);
        }
        Ok(Self { directions, shift: vec![0; dim] })
    }

    /// XOR every coordinate with a random constant; balance properties survive.
    pub fn with_random_shift(mut self, rng: &mut impl Rng) -> Self {
        for s in &mut self.shift {
            *s = rng.random();
        }
        self
    }

    pub fn dim(&self) -> usize {
        self.directions.len()
    }

    /// First `n` points, starting from the origin, row-major `(n, dim)`.
    pub fn points(&self, n: usize) -> Vec<Vec<f64>> {
        let dim = self.dim();
        let mut x = vec![0u32; dim];
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            if i > 0 {
                let c = (i - 1).trailing_ones() as usize;
                for (xj, dir) in x.iter_mut().zip(&self.directions) {
                    *xj ^= dir[c.min(BITS - 1)];
                }
            }
            out.push(x.iter().zip(&self.shift).map(|(v, s)| ((v ^ s) as f64 + 0.5) / 4_294_967_296.0).collect());
        }
        out
    }
}

/// Latin hypercube: each axis split into `n` strata, one point per stratum.
pub fn latin_hypercube(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; dim]; n];
    let mut perm: Vec<usize> = (0..n).collect();
    for d in 0..dim {
        perm.shuffle(rng);
        for (row, &p) in out.iter_mut().zip(&perm) {
            row[d] = (p as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leading_points_are_the_textbook_sequence() {
        let pts = Sobol::new(2).unwrap().points(4);
        let half = 0.5 / 4_294_967_296.0;
        let expect = [[0.0, 0.0], [0.5, 0.5], [0.75, 0.25], [0.25, 0.75]];
        for (p, e) in pts.iter().zip(expect) {
            assert!((p[0] - e[0] - half).abs() < 1e-15 && (p[1] - e[1] - half).abs() < 1e-15);
        }
    }
}

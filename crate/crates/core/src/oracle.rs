//! Brute-force 3SUM-mod ground truth.
//!
//! Triplets are always visited in lexicographic `(i, j, k)` order; the CoT
//! generator relies on that order.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum OracleError {
    #[error("triplet indices must satisfy i < j < k < {len}, got ({i}, {j}, {k})")]
    TripletOrder { i: usize, j: usize, k: usize, len: usize },
    #[error("digit {digit} out of range for modulus {modulus}")]
    DigitRange { digit: u8, modulus: usize },
    #[error("expected {expected} digits, got {got}")]
    Shape { expected: usize, got: usize },
}

/// One Match-3 input: `seq_len` tuples of `dim` digits, plus its oracle label.
///
/// The label is recomputed on every mutation and cannot be set directly.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TupleInstance {
    digits: Vec<u8>,
    dim: usize,
    modulus: usize,
    label: bool,
}

impl TupleInstance {
    /// Build from row-major digits (`seq_len * dim` of them).
    pub fn from_digits(digits: Vec<u8>, dim: usize, modulus: usize) -> Result<Self, OracleError> {
        if dim == 0 || !digits.len().is_multiple_of(dim) {
            return Err(OracleError::Shape { expected: dim.max(1) * (digits.len() / dim.max(1) + 1), got: digits.len() });
        }
        if let Some(&digit) = digits.iter().find(|&&d| d as usize >= modulus) {
            return Err(OracleError::DigitRange { digit, modulus });
        }
        let label = has_zero_triplet(&digits, dim, modulus);
        Ok(Self { digits, dim, modulus, label })
    }

    pub fn from_tuples(tuples: &[Vec<u8>], modulus: usize) -> Result<Self, OracleError> {
        let dim = tuples.first().map_or(0, Vec::len);
        if let Some(bad) = tuples.iter().find(|t| t.len() != dim) {
            return Err(OracleError::Shape { expected: dim, got: bad.len() });
        }
        Self::from_digits(tuples.concat(), dim, modulus)
    }

    pub fn len(&self) -> usize {
        self.digits.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.digits.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn modulus(&self) -> usize {
        self.modulus
    }

    pub fn label(&self) -> bool {
        self.label
    }

    pub fn digits(&self) -> &[u8] {
        &self.digits
    }

    pub fn tuple(&self, i: usize) -> &[u8] {
        &self.digits[i * self.dim..(i + 1) * self.dim]
    }

    pub fn tuples(&self) -> Vec<Vec<u8>> {
        self.digits.chunks(self.dim).map(<[u8]>::to_vec).collect()
    }

    pub fn digit(&self, position: usize, d: usize) -> u8 {
        self.digits[position * self.dim + d]
    }

    /// Overwrite one digit and refresh the label.
    pub fn set_digit(&mut self, position: usize, d: usize, value: u8) -> Result<(), OracleError> {
        if value as usize >= self.modulus {
            return Err(OracleError::DigitRange { digit: value, modulus: self.modulus });
        }
        self.digits[position * self.dim + d] = value;
        self.label = has_zero_triplet(&self.digits, self.dim, self.modulus);
        Ok(())
    }

    /// Dimension-wise sums of tuples `i`, `j`, `k` modulo the base.
    pub fn triplet_sums(&self, i: usize, j: usize, k: usize) -> Result<Vec<u8>, OracleError> {
        if !(i < j && j < k && k < self.len()) {
            return Err(OracleError::TripletOrder { i, j, k, len: self.len() });
        }
        Ok((0..self.dim).map(|d| self.dim_sum(i, j, k, d)).collect())
    }

    /// Sum of dimension `d` over tuples `i`, `j`, `k`, unchecked.
    pub fn dim_sum(&self, i: usize, j: usize, k: usize, d: usize) -> u8 {
        let s = self.digit(i, d) as usize + self.digit(j, d) as usize + self.digit(k, d) as usize;
        (s % self.modulus) as u8
    }
}

/// Lexicographic iterator over all `i < j < k < n`.
pub fn triplets(n: usize) -> impl Iterator<Item = (usize, usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).flat_map(move |j| (j + 1..n).map(move |k| (i, j, k))))
}

/// True iff some triplet sums to zero in every dimension.
pub fn label_3sum(instance: &TupleInstance) -> bool {
    has_zero_triplet(&instance.digits, instance.dim, instance.modulus)
}

fn has_zero_triplet(digits: &[u8], dim: usize, modulus: usize) -> bool {
    let n = digits.len() / dim;
    let tuple = |i: usize| &digits[i * dim..(i + 1) * dim];
    triplets(n).any(|(i, j, k)| {
        let (a, b, c) = (tuple(i), tuple(j), tuple(k));
        (0..dim).all(|d| (a[d] as usize + b[d] as usize + c[d] as usize).is_multiple_of(modulus))
    })
}

//! Ternary values and bit-plane packed tensors.

use std::fmt;
use std::ops::{Mul, Neg};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[repr(i8)]
pub enum Ternary {
    Neg = -1,
    Zero = 0,
    Pos = 1,
}

impl Ternary {
    pub const ALL: [Ternary; 3] = [Ternary::Neg, Ternary::Zero, Ternary::Pos];

    pub fn value(self) -> i8 {
        self as i8
    }

    pub fn from_i8(v: i8) -> Result<Self> {
        match v {
            -1 => Ok(Ternary::Neg),
            0 => Ok(Ternary::Zero),
            1 => Ok(Ternary::Pos),
            _ => Err(Error::domain(format!("{v} is not a ternary value"))),
        }
    }

    /// Sign of an integer, zero mapped to `Zero`.
    pub fn signum(v: i64) -> Self {
        match v.signum() {
            -1 => Ternary::Neg,
            0 => Ternary::Zero,
            _ => Ternary::Pos,
        }
    }

    /// Two-bit storage code: 00 zero, 01 plus one, 10 minus one.
    pub fn code(self) -> u8 {
        match self {
            Ternary::Zero => 0b00,
            Ternary::Pos => 0b01,
            Ternary::Neg => 0b10,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0b00 => Ok(Ternary::Zero),
            0b01 => Ok(Ternary::Pos),
            0b10 => Ok(Ternary::Neg),
            _ => Err(Error::domain(format!("invalid ternary code {code:#04b}"))),
        }
    }

    pub fn is_zero(self) -> bool {
        self == Ternary::Zero
    }
}

impl Neg for Ternary {
    type Output = Ternary;
    fn neg(self) -> Ternary {
        match self {
            Ternary::Neg => Ternary::Pos,
            Ternary::Zero => Ternary::Zero,
            Ternary::Pos => Ternary::Neg,
        }
    }
}

/// Ternary product, i.e. the gated XNOR.
impl Mul for Ternary {
    type Output = Ternary;
    fn mul(self, rhs: Ternary) -> Ternary {
        match (self, rhs) {
            (Ternary::Zero, _) | (_, Ternary::Zero) => Ternary::Zero,
            (a, b) if a == b => Ternary::Pos,
            _ => Ternary::Neg,
        }
    }
}

impl fmt::Display for Ternary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.value())
    }
}

pub(crate) const WORD: usize = 64;

pub(crate) fn words_for(n: usize) -> usize {
    n.div_ceil(WORD)
}

/// Dense ternary tensor stored as two bit planes (`+1` and `-1` membership),
/// i.e. two bits per element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryTensor {
    shape: Vec<usize>,
    len: usize,
    plus: Vec<u64>,
    minus: Vec<u64>,
}

impl TernaryTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            len,
            plus: vec![0; words_for(len)],
            minus: vec![0; words_for(len)],
        }
    }

    pub fn from_values(shape: &[usize], values: &[Ternary]) -> Result<Self> {
        let mut t = Self::zeros(shape);
        if values.len() != t.len {
            return Err(Error::Shape {
                expected: shape.to_vec(),
                actual: vec![values.len()],
            });
        }
        for (i, &v) in values.iter().enumerate() {
            t.set(i, v);
        }
        Ok(t)
    }

    pub fn from_i8(shape: &[usize], values: &[i8]) -> Result<Self> {
        let vals: Vec<Ternary> = values.iter().map(|&v| Ternary::from_i8(v)).collect::<Result<_>>()?;
        Self::from_values(shape, &vals)
    }

    pub fn vector(values: &[Ternary]) -> Self {
        Self::from_values(&[values.len()], values).expect("length matches by construction")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize) -> Ternary {
        assert!(i < self.len, "index {i} out of bounds for length {}", self.len);
        let (w, b) = (i / WORD, i % WORD);
        if self.plus[w] >> b & 1 == 1 {
            Ternary::Pos
        } else if self.minus[w] >> b & 1 == 1 {
            Ternary::Neg
        } else {
            Ternary::Zero
        }
    }

    pub fn set(&mut self, i: usize, v: Ternary) {
        assert!(i < self.len, "index {i} out of bounds for length {}", self.len);
        let (w, b) = (i / WORD, i % WORD);
        let mask = 1u64 << b;
        self.plus[w] &= !mask;
        self.minus[w] &= !mask;
        match v {
            Ternary::Pos => self.plus[w] |= mask,
            Ternary::Neg => self.minus[w] |= mask,
            Ternary::Zero => {}
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Ternary> + '_ {
        (0..self.len).map(move |i| self.get(i))
    }

    pub fn to_vec(&self) -> Vec<Ternary> {
        self.iter().collect()
    }

    pub fn to_i8(&self) -> Vec<i8> {
        self.iter().map(Ternary::value).collect()
    }

    pub fn plus_plane(&self) -> &[u64] {
        &self.plus
    }

    pub fn minus_plane(&self) -> &[u64] {
        &self.minus
    }

    pub fn count_nonzero(&self) -> usize {
        self.plus
            .iter()
            .chain(&self.minus)
            .map(|w| w.count_ones() as usize)
            .sum()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.len {
            return Err(Error::Shape {
                expected: self.shape.clone(),
                actual: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Packs the two-bit codes four to a byte, element `k` in bits
    /// `2*(k%4)..2*(k%4)+2` of byte `k/4`.
    pub fn to_code_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(4)];
        for (k, v) in self.iter().enumerate() {
            out[k / 4] |= v.code() << (2 * (k % 4));
        }
        out
    }

    pub fn from_code_bytes(shape: &[usize], bytes: &[u8]) -> Result<Self> {
        let mut t = Self::zeros(shape);
        if bytes.len() != t.len.div_ceil(4) {
            return Err(Error::domain(format!(
                "expected {} packed bytes for {} elements, got {}",
                t.len.div_ceil(4),
                t.len,
                bytes.len()
            )));
        }
        for k in 0..t.len {
            let code = (bytes[k / 4] >> (2 * (k % 4))) & 0b11;
            t.set(k, Ternary::from_code(code)?);
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn codes_round_trip_and_reserved_code_rejected() {
        for v in Ternary::ALL {
            assert_eq!(Ternary::from_code(v.code()).unwrap(), v);
        }
        assert!(Ternary::from_code(0b11).is_err());
        let bad = [0b0000_0011u8];
        assert!(TernaryTensor::from_code_bytes(&[1], &bad).is_err());
    }

    #[test]
    fn set_overwrites_previous_value() {
        let mut t = TernaryTensor::zeros(&[70]);
        t.set(65, Ternary::Pos);
        t.set(65, Ternary::Neg);
        assert_eq!(t.get(65), Ternary::Neg);
        t.set(65, Ternary::Zero);
        assert_eq!(t.count_nonzero(), 0);
    }

    #[test]
    fn wrong_length_is_shape_error() {
        assert!(matches!(
            TernaryTensor::from_i8(&[2, 2], &[1, 0, -1]),
            Err(Error::Shape { .. })
        ));
        assert!(TernaryTensor::from_i8(&[1], &[2]).is_err());
    }

    proptest! {
        #[test]
        fn packed_bytes_round_trip(vals in proptest::collection::vec(-1i8..=1, 0..300)) {
            let t = TernaryTensor::from_i8(&[vals.len()], &vals).unwrap();
            prop_assert_eq!(t.to_i8(), vals.clone());
            let back = TernaryTensor::from_code_bytes(&[vals.len()], &t.to_code_bytes()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}

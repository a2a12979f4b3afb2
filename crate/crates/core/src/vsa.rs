//! Bit-packed bipolar hypervectors and the binary VSA operator set.
//!
//! A component `+1` is stored as bit `1` and `-1` as bit `0`, 64 components
//! per word, least significant bit first. Bits past `dim` in the last word are
//! always zero, so binding is XNOR followed by a tail mask and the Hamming
//! distance is a plain popcount of the XOR.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{check_dims, Error, Result};

pub const WORD_BITS: usize = 64;

#[inline]
fn words_for(dim: usize) -> usize {
    dim.div_ceil(WORD_BITS)
}

#[inline]
fn tail_mask(dim: usize) -> u64 {
    match dim % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

/// A vector in `{-1, +1}^dim`, packed into 64-bit words.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Hypervector {
    dim: usize,
    words: Vec<u64>,
}

impl Hypervector {
    /// All components `+1`.
    pub fn ones(dim: usize) -> Self {
        assert!(dim > 0, "hypervector dimension must be positive");
        let mut words = vec![u64::MAX; words_for(dim)];
        *words.last_mut().unwrap() &= tail_mask(dim);
        Self { dim, words }
    }

    /// All components `-1`.
    pub fn minus_ones(dim: usize) -> Self {
        assert!(dim > 0, "hypervector dimension must be positive");
        Self {
            dim,
            words: vec![0; words_for(dim)],
        }
    }

    /// Builds a vector where component `i` is `+1` iff `positive(i)`.
    pub fn from_fn(dim: usize, mut positive: impl FnMut(usize) -> bool) -> Self {
        let mut v = Self::minus_ones(dim);
        for i in 0..dim {
            if positive(i) {
                v.words[i / WORD_BITS] |= 1 << (i % WORD_BITS);
            }
        }
        v
    }

    /// Packs a bipolar slice. Every entry must be exactly `-1` or `+1`.
    pub fn from_bipolar(values: &[i8]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Empty("bipolar vector"));
        }
        if let Some((i, v)) = values.iter().enumerate().find(|(_, &v)| v != 1 && v != -1) {
            return Err(Error::invalid(format!("component {i} is {v}, expected -1 or +1")));
        }
        Ok(Self::from_fn(values.len(), |i| values[i] > 0))
    }

    /// Wraps raw words, rejecting a wrong word count or nonzero pad bits.
    pub fn from_words(dim: usize, words: Vec<u64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Empty("hypervector"));
        }
        if words.len() != words_for(dim) {
            return Err(Error::Format(format!(
                "dim {dim} needs {} words, got {}",
                words_for(dim),
                words.len()
            )));
        }
        if words[words.len() - 1] & !tail_mask(dim) != 0 {
            return Err(Error::Format(format!("nonzero pad bits in dim-{dim} vector")));
        }
        Ok(Self { dim, words })
    }

    pub fn random<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Self {
        assert!(dim > 0, "hypervector dimension must be positive");
        let mut words: Vec<u64> = (0..words_for(dim)).map(|_| rng.random()).collect();
        *words.last_mut().unwrap() &= tail_mask(dim);
        Self { dim, words }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn is_positive(&self, i: usize) -> bool {
        debug_assert!(i < self.dim);
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    #[inline]
    pub fn get(&self, i: usize) -> i8 {
        if self.is_positive(i) {
            1
        } else {
            -1
        }
    }

    pub fn to_bipolar(&self) -> Vec<i8> {
        (0..self.dim).map(|i| self.get(i)).collect()
    }

    pub fn negate(&self) -> Self {
        let mut words: Vec<u64> = self.words.iter().map(|w| !w).collect();
        *words.last_mut().unwrap() &= tail_mask(self.dim);
        Self { dim: self.dim, words }
    }

    /// Repeats the vector `times` times end to end.
    pub fn tile(&self, times: usize) -> Self {
        assert!(times > 0);
        Self::from_fn(self.dim * times, |i| self.is_positive(i % self.dim))
    }

    pub fn bind(&self, other: &Self) -> Result<Self> {
        check_dims(self.dim, other.dim)?;
        let mut words: Vec<u64> = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| !(a ^ b))
            .collect();
        *words.last_mut().unwrap() &= tail_mask(self.dim);
        Ok(Self { dim: self.dim, words })
    }

    pub fn hamming(&self, other: &Self) -> Result<u32> {
        check_dims(self.dim, other.dim)?;
        Ok(self.hamming_unchecked(other))
    }

    #[inline]
    pub(crate) fn hamming_unchecked(&self, other: &Self) -> u32 {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones())
            .sum()
    }

    /// Bipolar inner product, `dim - 2 * hamming`.
    pub fn dot(&self, other: &Self) -> Result<i64> {
        Ok(self.dim as i64 - 2 * self.hamming(other)? as i64)
    }

    /// Serialized length in bytes: a u32 dim plus the words.
    pub fn encoded_len(dim: usize) -> usize {
        4 + 8 * words_for(dim)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let dim = u32::try_from(self.dim)
            .map_err(|_| Error::Format(format!("dim {} does not fit in u32", self.dim)))?;
        w.write_all(&dim.to_le_bytes())?;
        for word in &self.words {
            w.write_all(&word.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let dim = read_u32(r)? as usize;
        let mut words = Vec::with_capacity(words_for(dim));
        for _ in 0..words_for(dim) {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            words.push(u64::from_le_bytes(buf));
        }
        Self::from_words(dim, words)
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Per-dimension bundling accumulator.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntegerVector {
    values: Vec<i32>,
}

impl IntegerVector {
    pub fn zeros(dim: usize) -> Self {
        Self {
            values: vec![0; dim],
        }
    }

    pub fn from_values(values: Vec<i32>) -> Self {
        Self { values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[i32] {
        &self.values
    }

    /// Adds `v` (in the bipolar domain) into the accumulator.
    pub fn accumulate(&mut self, v: &Hypervector) -> Result<()> {
        check_dims(self.values.len(), v.dim)?;
        for (w, chunk) in v.words.iter().zip(self.values.chunks_mut(WORD_BITS)) {
            for (b, slot) in chunk.iter_mut().enumerate() {
                *slot += (((w >> b) & 1) as i32) * 2 - 1;
            }
        }
        Ok(())
    }
}

/// Resolution of `sgn(0)` when thresholding a bundle.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TieRule {
    #[default]
    Plus,
    Minus,
    /// Per-dimension coin flip derived from the seed and the dimension index,
    /// so the result is still a pure function of its inputs.
    SeededRandom(u64),
}

impl TieRule {
    #[inline]
    fn resolve(self, dim_index: usize) -> bool {
        match self {
            TieRule::Plus => true,
            TieRule::Minus => false,
            TieRule::SeededRandom(seed) => splitmix64(seed ^ dim_index as u64) & 1 == 1,
        }
    }
}

#[inline]
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A set of class hypervectors sharing one dimension.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassBook {
    vectors: Vec<Hypervector>,
}

impl ClassBook {
    pub fn new(vectors: Vec<Hypervector>) -> Result<Self> {
        if vectors.len() < 2 {
            return Err(Error::invalid(format!(
                "a class book needs at least 2 classes, got {}",
                vectors.len()
            )));
        }
        let dim = vectors[0].dim;
        for v in &vectors[1..] {
            check_dims(dim, v.dim)?;
        }
        Ok(Self { vectors })
    }

    pub fn num_classes(&self) -> usize {
        self.vectors.len()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].dim
    }

    pub fn vectors(&self) -> &[Hypervector] {
        &self.vectors
    }
}

impl std::ops::Index<usize> for ClassBook {
    type Output = Hypervector;

    fn index(&self, c: usize) -> &Hypervector {
        &self.vectors[c]
    }
}

pub fn bind(a: &Hypervector, b: &Hypervector) -> Result<Hypervector> {
    a.bind(b)
}

pub fn bundle_sum<'a, I>(vs: I) -> Result<IntegerVector>
where
    I: IntoIterator<Item = &'a Hypervector>,
{
    let mut iter = vs.into_iter();
    let first = iter.next().ok_or(Error::Empty("bundle input"))?;
    let mut acc = IntegerVector::zeros(first.dim);
    acc.accumulate(first)?;
    for v in iter {
        acc.accumulate(v)?;
    }
    Ok(acc)
}

pub fn sign_threshold(acc: &IntegerVector, tie_rule: TieRule) -> Hypervector {
    Hypervector::from_fn(acc.dim(), |d| match acc.values[d] {
        v if v > 0 => true,
        v if v < 0 => false,
        _ => tie_rule.resolve(d),
    })
}

pub fn hamming(a: &Hypervector, b: &Hypervector) -> Result<u32> {
    a.hamming(b)
}

/// Index of the class vector closest in Hamming distance; ties go to the
/// lowest index.
pub fn nearest_class(query: &Hypervector, book: &ClassBook) -> Result<usize> {
    check_dims(query.dim, book.dim())?;
    let mut best = (u32::MAX, 0);
    for (c, v) in book.vectors.iter().enumerate() {
        let d = query.hamming_unchecked(v);
        if d < best.0 {
            best = (d, c);
        }
    }
    Ok(best.1)
}

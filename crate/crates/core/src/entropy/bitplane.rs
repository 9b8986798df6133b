use alloc::vec;
use alloc::vec::Vec;

use super::EntropyError;
use crate::quantizer::{code_limit, QuantizedFeatureMap};

/// Magnitude planes needed for codes in `[-2^(B+1), 2^(B+1)]`.
pub fn magnitude_planes(bits: u8) -> usize {
    (u32::BITS - (code_limit(bits) as u32).leading_zeros()) as usize
}

/// Sign plane plus magnitude planes.
pub fn plane_count(bits: u8) -> usize {
    magnitude_planes(bits) + 1
}

/// Binary decomposition of a `C×H×W` code tensor.
///
/// Planes are stored in coding order: magnitude bits from most to least
/// significant, then the sign plane (1 = negative).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitplaneSet {
    shape: [usize; 3],
    planes: Vec<Vec<u8>>,
}

impl BitplaneSet {
    /// Any set of equally sized 0/1 planes.
    pub fn from_planes(shape: [usize; 3], planes: Vec<Vec<u8>>) -> Result<Self, EntropyError> {
        let len = shape.iter().product::<usize>();
        if planes.iter().any(|p| p.len() != len || p.iter().any(|&b| b > 1)) {
            return Err(EntropyError::MalformedPlanes);
        }
        Ok(Self { shape, planes })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self {
            shape,
            planes: Vec::new(),
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn plane_count(&self) -> usize {
        self.planes.len()
    }

    pub fn plane(&self, index: usize) -> &[u8] {
        &self.planes[index]
    }

    pub fn planes(&self) -> &[Vec<u8>] {
        &self.planes
    }

    pub fn ones(&self) -> usize {
        self.planes.iter().map(|p| p.iter().filter(|&&b| b == 1).count()).sum()
    }

    pub fn total_bits(&self) -> usize {
        self.planes.len() * self.shape.iter().product::<usize>()
    }
}

pub fn to_bitplanes(q: &QuantizedFeatureMap) -> Result<BitplaneSet, EntropyError> {
    let limit = code_limit(q.bits());
    let mags = magnitude_planes(q.bits());
    let len = q.len();
    let mut planes = vec![vec![0u8; len]; mags + 1];
    for (i, &code) in q.codes().iter().enumerate() {
        if code.abs() > limit {
            return Err(EntropyError::CodeOutOfRange { index: i, code });
        }
        let m = code.unsigned_abs();
        for (p, plane) in planes.iter_mut().take(mags).enumerate() {
            plane[i] = ((m >> (mags - 1 - p)) & 1) as u8;
        }
        planes[mags][i] = (code < 0) as u8;
    }
    Ok(BitplaneSet {
        shape: q.shape(),
        planes,
    })
}

pub fn from_bitplanes(planes: &BitplaneSet, bits: u8) -> Result<QuantizedFeatureMap, EntropyError> {
    let mags = magnitude_planes(bits);
    if planes.plane_count() != mags + 1 {
        return Err(EntropyError::PlaneCount {
            expected: mags + 1,
            found: planes.plane_count(),
        });
    }
    let len = planes.shape.iter().product::<usize>();
    let mut codes = Vec::with_capacity(len);
    for i in 0..len {
        let mut m: i32 = 0;
        for p in 0..mags {
            m = (m << 1) | planes.planes[p][i] as i32;
        }
        let negative = planes.planes[mags][i] == 1;
        if negative && m == 0 {
            return Err(EntropyError::NonCanonical(i));
        }
        codes.push(if negative { -m } else { m });
    }
    QuantizedFeatureMap::new(planes.shape, codes, bits).map_err(|_| EntropyError::CodeOutOfRange {
        index: 0,
        code: code_limit(bits) + 1,
    })
}

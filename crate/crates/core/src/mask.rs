//! Binary sparsity masks aligned to a flat parameter vector.

use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Arch, ModelState};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSegment {
    pub offset: usize,
    pub len: usize,
    pub prunable: bool,
}

/// One bit per parameter: `true` keeps the weight, `false` prunes it.
///
/// Bits over non-prunable segments are always set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "MaskRepr", try_from = "MaskRepr")]
pub struct SparsityMask {
    bits: Vec<bool>,
    segments: Vec<MaskSegment>,
}

impl SparsityMask {
    pub fn dense(arch: &Arch) -> Self {
        let segments: Vec<MaskSegment> = arch
            .segments()
            .iter()
            .map(|s| MaskSegment {
                offset: s.offset,
                len: s.len(),
                prunable: s.prunable,
            })
            .collect();
        Self {
            bits: vec![true; arch.param_count()],
            segments,
        }
    }

    pub fn from_bits(arch: &Arch, bits: Vec<bool>) -> Result<Self> {
        let mut mask = Self::dense(arch);
        if bits.len() != mask.bits.len() {
            return Err(Error::Shape {
                context: "mask bits",
                expected: vec![mask.bits.len()],
                actual: vec![bits.len()],
            });
        }
        mask.bits = bits;
        mask.validate()?;
        Ok(mask)
    }

    fn validate(&self) -> Result<()> {
        for seg in self.segments.iter().filter(|s| !s.prunable) {
            if self.bits[seg.offset..seg.offset + seg.len].iter().any(|b| !b) {
                return Err(Error::InvalidInput(format!(
                    "mask prunes non-prunable segment at offset {}",
                    seg.offset
                )));
            }
        }
        Ok(())
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn segments(&self) -> &[MaskSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn keeps(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub(crate) fn set_pruned(&mut self, i: usize) {
        self.bits[i] = false;
    }

    /// Flat indices of prunable coordinates, ascending.
    pub fn prunable_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.segments
            .iter()
            .filter(|s| s.prunable)
            .flat_map(|s| s.offset..s.offset + s.len)
    }

    pub fn prunable_count(&self) -> usize {
        self.segments.iter().filter(|s| s.prunable).map(|s| s.len).sum()
    }

    pub fn surviving_prunable(&self) -> usize {
        self.prunable_indices().filter(|&i| self.bits[i]).count()
    }

    pub fn surviving(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of prunable coordinates kept.
    pub fn density(&self) -> f64 {
        let total = self.prunable_count();
        if total == 0 {
            return 1.0;
        }
        self.surviving_prunable() as f64 / total as f64
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.density()
    }

    /// True when every coordinate kept by `self` is also kept by `parent`.
    pub fn is_nested_in(&self, parent: &SparsityMask) -> bool {
        self.bits.len() == parent.bits.len()
            && self.bits.iter().zip(&parent.bits).all(|(&c, &p)| !c || p)
    }

    pub fn check_aligned(&self, len: usize) -> Result<()> {
        if self.bits.len() != len {
            return Err(Error::Shape {
                context: "mask alignment",
                expected: vec![len],
                actual: vec![self.bits.len()],
            });
        }
        Ok(())
    }

    /// Zeroes pruned coordinates in place.
    pub fn apply(&self, params: &mut [f32]) {
        for (p, &keep) in params.iter_mut().zip(&self.bits) {
            if !keep {
                *p = 0.0;
            }
        }
    }

    pub fn apply_to(&self, state: &ModelState) -> ModelState {
        let mut out = state.clone();
        self.apply(&mut out.params);
        out
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn packed(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.bits.len().div_ceil(8)];
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                out[i / 8] |= 1 << (i % 8);
            }
        }
        out
    }

    /// Writes the mask file: one JSON header line, then the bits packed
    /// LSB-first.
    pub fn write_file(&self, path: &Path, arch: &Arch, parent_run_id: Option<&str>) -> Result<()> {
        let header = MaskHeader {
            format: MASK_FORMAT.into(),
            version: 1,
            len: self.bits.len(),
            arch_hash: arch.digest(),
            layer_partition: self.segments.clone(),
            density: self.density(),
            parent_run_id: parent_run_id.map(str::to_string),
        };
        let mut bytes = serde_json::to_vec(&header)?;
        bytes.push(b'\n');
        bytes.extend(self.packed());
        crate::io::write_atomic(path, &bytes)
    }

    pub fn read_file(path: &Path, arch: &Arch) -> Result<(Self, MaskHeader)> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(file);
        let mut line = Vec::new();
        reader
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::io(path, e))?;
        let header: MaskHeader = serde_json::from_slice(&line).map_err(|e| Error::Format {
            field: "mask header",
            detail: e.to_string(),
        })?;
        if header.format != MASK_FORMAT {
            return Err(Error::Format {
                field: "format",
                detail: header.format.clone(),
            });
        }
        if header.arch_hash != arch.digest() {
            return Err(Error::ArchMismatch(format!(
                "mask built for arch {}, expected {}",
                header.arch_hash,
                arch.digest()
            )));
        }
        let mut packed = Vec::new();
        reader
            .read_to_end(&mut packed)
            .map_err(|e| Error::io(path, e))?;
        if packed.len() != header.len.div_ceil(8) {
            return Err(Error::Format {
                field: "bits",
                detail: format!("expected {} bytes, found {}", header.len.div_ceil(8), packed.len()),
            });
        }
        let bits = (0..header.len)
            .map(|i| packed[i / 8] & (1 << (i % 8)) != 0)
            .collect();
        Ok((Self::from_bits(arch, bits)?, header))
    }
}

const MASK_FORMAT: &str = "dprune-mask";

/// Compact serde form: packed bits as hex.
#[derive(Serialize, Deserialize)]
struct MaskRepr {
    len: usize,
    segments: Vec<MaskSegment>,
    bits: String,
}

impl From<SparsityMask> for MaskRepr {
    fn from(m: SparsityMask) -> Self {
        Self {
            len: m.bits.len(),
            bits: hex::encode(m.packed()),
            segments: m.segments,
        }
    }
}

impl TryFrom<MaskRepr> for SparsityMask {
    type Error = Error;

    fn try_from(r: MaskRepr) -> Result<Self> {
        let packed = hex::decode(&r.bits).map_err(|e| Error::Format {
            field: "mask bits",
            detail: e.to_string(),
        })?;
        if packed.len() != r.len.div_ceil(8) {
            return Err(Error::Format {
                field: "mask bits",
                detail: format!("{} bytes for {} bits", packed.len(), r.len),
            });
        }
        let bits = (0..r.len).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect();
        let mask = Self {
            bits,
            segments: r.segments,
        };
        mask.validate()?;
        Ok(mask)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MaskHeader {
    pub format: String,
    pub version: u32,
    pub len: usize,
    pub arch_hash: String,
    pub layer_partition: Vec<MaskSegment>,
    pub density: f64,
    pub parent_run_id: Option<String>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch() -> Arch {
        Arch::mlp(3, &[4], 2).unwrap()
    }

    #[test]
    fn dense_mask_counts() {
        let m = SparsityMask::dense(&arch());
        assert_eq!(m.prunable_count(), 12 + 8);
        assert_eq!(m.density(), 1.0);
        assert_eq!(m.sparsity(), 0.0);
    }

    #[test]
    fn non_prunable_bits_must_stay_set() {
        let a = arch();
        let mut bits = vec![true; a.param_count()];
        bits[12] = false; // first bias
        assert!(SparsityMask::from_bits(&a, bits).is_err());
    }

    #[test]
    fn nesting() {
        let a = arch();
        let parent = SparsityMask::dense(&a);
        let mut child = parent.clone();
        child.set_pruned(0);
        assert!(child.is_nested_in(&parent));
        assert!(!parent.is_nested_in(&child));
    }

    #[test]
    fn file_round_trip() {
        let a = arch();
        let mut m = SparsityMask::dense(&a);
        for i in [0, 5, 9, 17] {
            m.set_pruned(i);
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.mask");
        m.write_file(&path, &a, Some("run-1")).unwrap();
        let (back, header) = SparsityMask::read_file(&path, &a).unwrap();
        assert_eq!(back, m);
        assert_eq!(header.parent_run_id.as_deref(), Some("run-1"));
        assert!((header.density - 16.0 / 20.0).abs() < 1e-12);
    }
}

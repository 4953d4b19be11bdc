//! Ternary CSR export of effective weights, the byte-size compression model,
//! and the `.tcsr` container format.
//!
//! A weight tensor of shape `[.., c_out]` is exported as a 2-D matrix with
//! `c_out` columns and one row per remaining index combination, so a dense
//! `[fan_in, fan_out]` matrix keeps its shape and a conv kernel
//! `[kh, kw, c_in, c_out]` becomes `[kh·kw·c_in, c_out]`.
//!
//! `.tcsr` layout, all little-endian:
//!
//! ```text
//! "TCSR"  u16 version  u32 layer_count
//! per layer:
//!   u32 name_len  name bytes (UTF-8)
//!   u32 rows  u32 cols  u64 nnz
//!   u8 flag   (0: one f32 magnitude, 1: nnz f32 magnitudes)
//!   f32 magnitude | f32[nnz]
//!   u32[rows + 1] row_ptr  u32[nnz] col_idx  i8[nnz] sign
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Network;
use crate::tensor::Tensor;

pub const TCSR_MAGIC: &[u8; 4] = b"TCSR";
pub const TCSR_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Magnitude {
    /// One `|w|` shared by every stored entry.
    Constant(f64),
    /// One `|w|` per stored entry.
    PerEntry(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TernaryCSR {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub row_ptr: Vec<u32>,
    pub col_idx: Vec<u32>,
    pub sign: Vec<i8>,
    pub magnitude: Magnitude,
}

fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&cols, rest)) if !rest.is_empty() => (rest.iter().product(), cols),
        Some((&cols, _)) => (1, cols),
        None => (0, 0),
    }
}

/// Exports `weights ⊙ mask` as ternary CSR.
pub fn export(name: &str, weights: &Tensor, mask: &Tensor) -> Result<TernaryCSR> {
    if weights.shape() != mask.shape() {
        return Err(Error::shape(
            "export",
            format!("weights {:?} vs mask {:?}", weights.shape(), mask.shape()),
        ));
    }
    let (rows, cols) = matrix_dims(weights.shape());
    let mut row_ptr = Vec::with_capacity(rows + 1);
    let mut col_idx = Vec::new();
    let mut sign = Vec::new();
    let mut mags = Vec::new();
    row_ptr.push(0u32);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let m = mask.data()[i];
            if m == 0.0 {
                continue;
            }
            if m != 1.0 && m != -1.0 {
                return Err(Error::NotTernary(m));
            }
            let w = weights.data()[i];
            let s = if w.is_sign_negative() { -m } else { m };
            col_idx.push(c as u32);
            sign.push(s as i8);
            mags.push(w.abs());
        }
        row_ptr.push(col_idx.len() as u32);
    }
    let magnitude = match mags.first() {
        None => Magnitude::Constant(0.0),
        Some(&first) if mags.iter().all(|&m| m == first) => Magnitude::Constant(first),
        Some(_) => Magnitude::PerEntry(mags),
    };
    Ok(TernaryCSR {
        name: name.to_string(),
        rows,
        cols,
        row_ptr,
        col_idx,
        sign,
        magnitude,
    })
}

/// Exports every weighted layer of `net` with its current mask.
pub fn export_network(net: &Network) -> Result<Vec<TernaryCSR>> {
    net.layer_names()
        .iter()
        .zip(net.weights())
        .zip(net.masks())
        .map(|((name, w), m)| export(name, w, &m))
        .collect()
}

/// Exports the ternary masks themselves (unit magnitude).
pub fn export_masks(net: &Network) -> Result<Vec<TernaryCSR>> {
    net.layer_names()
        .iter()
        .zip(net.masks())
        .map(|(name, m)| export(name, &Tensor::full(m.shape().to_vec(), 1.0), &m))
        .collect()
}

impl TernaryCSR {
    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    fn magnitude_at(&self, k: usize) -> f64 {
        match &self.magnitude {
            Magnitude::Constant(m) => *m,
            Magnitude::PerEntry(v) => v[k],
        }
    }

    /// Dense `[rows, cols]` matrix with entries `sign · magnitude`.
    pub fn reconstruct(&self) -> Tensor {
        let mut data = vec![0.0; self.rows * self.cols];
        for r in 0..self.rows {
            for k in self.row_ptr[r] as usize..self.row_ptr[r + 1] as usize {
                data[r * self.cols + self.col_idx[k] as usize] =
                    self.sign[k] as f64 * self.magnitude_at(k);
            }
        }
        Tensor::new([self.rows.max(1), self.cols.max(1)], data)
            .expect("rows and cols are positive for exported layers")
    }

    /// Checks the structural invariants of the CSR arrays.
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::Invalid(format!("layer {}: {d}", self.name)));
        let nnz = self.nnz();
        if self.row_ptr.len() != self.rows + 1 || self.sign.len() != nnz {
            return bad("array lengths do not match rows/nnz".into());
        }
        if self.row_ptr[0] != 0 || self.row_ptr[self.rows] as usize != nnz {
            return bad("row_ptr must start at 0 and end at nnz".into());
        }
        if let Magnitude::PerEntry(v) = &self.magnitude {
            if v.len() != nnz {
                return bad("magnitude array length differs from nnz".into());
            }
        }
        for r in 0..self.rows {
            let (a, b) = (self.row_ptr[r] as usize, self.row_ptr[r + 1] as usize);
            if a > b || b > nnz {
                return bad(format!("row_ptr decreases at row {r}"));
            }
            let cols = &self.col_idx[a..b];
            if cols.windows(2).any(|w| w[0] >= w[1])
                || cols.iter().any(|&c| c as usize >= self.cols)
            {
                return bad(format!(
                    "column indices of row {r} are not strictly increasing in range"
                ));
            }
        }
        if self.sign.iter().any(|&s| s != 1 && s != -1) {
            return bad("sign entries must be ±1".into());
        }
        Ok(())
    }

    /// `(dense_bytes, csr_bytes)` under the 4-byte float and index model.
    pub fn byte_sizes(&self) -> (usize, usize) {
        let dense = self.rows * self.cols * 4;
        let csr = self.nnz() * 8 + (self.rows + 1) * 4;
        (dense, csr)
    }

    /// `y = A x` without multiplications in the inner loop.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        sparse_matvec(self, x)
    }
}

/// `1 − Σ csr_bytes / Σ dense_bytes`.
pub fn compression_rate(layers: &[TernaryCSR]) -> f64 {
    let (dense, csr) = layers.iter().fold((0usize, 0usize), |(d, c), l| {
        let (ld, lc) = l.byte_sizes();
        (d + ld, c + lc)
    });
    1.0 - csr as f64 / dense as f64
}

/// `y_r = magnitude · Σ_{k ∈ row r} sign_k · x[col_k]`.
pub fn sparse_matvec(layer: &TernaryCSR, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != layer.cols {
        return Err(Error::shape(
            "sparse_matvec",
            format!(
                "x has {} entries, layer has {} columns",
                x.len(),
                layer.cols
            ),
        ));
    }
    let mut y = vec![0.0; layer.rows];
    for (r, yr) in y.iter_mut().enumerate() {
        let range = layer.row_ptr[r] as usize..layer.row_ptr[r + 1] as usize;
        *yr = match &layer.magnitude {
            Magnitude::Constant(m) => {
                let mut acc = 0.0;
                for k in range {
                    let v = x[layer.col_idx[k] as usize];
                    if layer.sign[k] > 0 {
                        acc += v;
                    } else {
                        acc -= v;
                    }
                }
                m * acc
            }
            Magnitude::PerEntry(mags) => {
                let mut acc = 0.0;
                for k in range {
                    let v = mags[k] * x[layer.col_idx[k] as usize];
                    if layer.sign[k] > 0 {
                        acc += v;
                    } else {
                        acc -= v;
                    }
                }
                acc
            }
        };
    }
    Ok(y)
}

/// Serializes layers into the `.tcsr` byte layout.
pub fn encode(layers: &[TernaryCSR]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(TCSR_MAGIC);
    b.extend_from_slice(&TCSR_VERSION.to_le_bytes());
    b.extend_from_slice(&(layers.len() as u32).to_le_bytes());
    for l in layers {
        b.extend_from_slice(&(l.name.len() as u32).to_le_bytes());
        b.extend_from_slice(l.name.as_bytes());
        b.extend_from_slice(&(l.rows as u32).to_le_bytes());
        b.extend_from_slice(&(l.cols as u32).to_le_bytes());
        b.extend_from_slice(&(l.nnz() as u64).to_le_bytes());
        match &l.magnitude {
            Magnitude::Constant(m) => {
                b.push(0);
                b.extend_from_slice(&(*m as f32).to_le_bytes());
            }
            Magnitude::PerEntry(v) => {
                b.push(1);
                for m in v {
                    b.extend_from_slice(&(*m as f32).to_le_bytes());
                }
            }
        }
        for v in l.row_ptr.iter().chain(&l.col_idx) {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b.extend(l.sign.iter().map(|&s| s as u8));
    }
    b
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.err("truncated file")),
        }
    }

    fn err(&self, detail: &str) -> Error {
        Error::Format {
            kind: "tcsr",
            path: self.path.to_path_buf(),
            detail: format!("{detail} at byte {}", self.pos),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u32s(&mut self, n: usize) -> Result<Vec<u32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| self.err("length overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Parses `.tcsr` bytes. Magnitudes come back widened from `f32`.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Vec<TernaryCSR>> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != TCSR_MAGIC {
        return Err(r.err("bad magic"));
    }
    let version = r.u16()?;
    if version != TCSR_VERSION {
        return Err(r.err(&format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| r.err("name is not UTF-8"))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let nnz = usize::try_from(r.u64()?).map_err(|_| r.err("nnz overflow"))?;
        if nnz > bytes.len() {
            return Err(r.err("nnz exceeds file size"));
        }
        let magnitude = match r.u8()? {
            0 => Magnitude::Constant(r.f32()? as f64),
            1 => Magnitude::PerEntry(
                (0..nnz)
                    .map(|_| r.f32().map(f64::from))
                    .collect::<Result<_>>()?,
            ),
            f => return Err(r.err(&format!("bad magnitude flag {f}"))),
        };
        let row_ptr = r.u32s(rows + 1)?;
        let col_idx = r.u32s(nnz)?;
        let sign = r.take(nnz)?.iter().map(|&b| b as i8).collect();
        let layer = TernaryCSR {
            name,
            rows,
            cols,
            row_ptr,
            col_idx,
            sign,
            magnitude,
        };
        layer.validate().map_err(|e| r.err(&e.to_string()))?;
        layers.push(layer);
    }
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(layers)
}

pub fn write_tcsr(path: &Path, layers: &[TernaryCSR]) -> Result<()> {
    fs::write(path, encode(layers)).map_err(|e| Error::io(path, e))
}

pub fn read_tcsr(path: &Path) -> Result<Vec<TernaryCSR>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn random_layer(rows: usize, cols: usize, seed: u64, constant: bool) -> (Tensor, Tensor) {
        let mut r = SeededRng::new(seed);
        let w = Tensor::from_fn([rows, cols], |_| {
            if constant {
                if r.coin() {
                    0.05
                } else {
                    -0.05
                }
            } else {
                r.symmetric(0.3)
            }
        });
        let m = Tensor::from_fn([rows, cols], |_| (r.unit() * 3.0).floor() - 1.0);
        (w, m)
    }

    #[test]
    fn hand_case() {
        let w = Tensor::full([2, 2], 0.1);
        let m = Tensor::new([2, 2], vec![1.0, 0.0, 0.0, -1.0]).unwrap();
        let l = export("l", &w, &m).unwrap();
        assert_eq!(l.nnz(), 2);
        assert_eq!(l.sign, vec![1, -1]);
        assert_eq!(l.magnitude, Magnitude::Constant(0.1));
        assert_eq!(l.row_ptr, vec![0, 1, 2]);
        assert_eq!(l.col_idx, vec![0, 1]);
    }

    #[test]
    fn empty_mask() {
        let l = export("l", &Tensor::full([3, 4], 0.2), &Tensor::zeros([3, 4])).unwrap();
        assert_eq!(l.nnz(), 0);
        assert_eq!(l.row_ptr, vec![0; 4]);
        assert_eq!(l.matvec(&[1.0; 4]).unwrap(), vec![0.0; 3]);
        assert!((compression_rate(&[l]) - (1.0 - 16.0 / 48.0)).abs() < 1e-15);
    }

    #[test]
    fn byte_model_examples() {
        // 784×300 at nnz 6586: 6586·8 + 785·4 = 55,828 bytes.
        let mut l = export(
            "l",
            &Tensor::full([784, 300], 1.0),
            &Tensor::zeros([784, 300]),
        )
        .unwrap();
        assert_eq!(l.byte_sizes(), (940_800, 3_140));
        l.col_idx = vec![0; 6586];
        assert_eq!(l.byte_sizes(), (940_800, 55_828));
        let rate = 1.0 - 55_828.0 / 940_800.0;
        assert!((compression_rate(&[l]) - rate).abs() < 1e-15);
        assert!((rate - 0.941).abs() < 5e-4);

        let full = export("f", &Tensor::full([4, 4], 1.0), &Tensor::full([4, 4], 1.0)).unwrap();
        let (d, c) = full.byte_sizes();
        assert!(c > d);
        assert!(compression_rate(&[full]) < 0.0);
    }

    #[test]
    fn identity_pattern() {
        let mut m = Tensor::zeros([3, 3]);
        for i in 0..3 {
            m.data_mut()[i * 4] = 1.0;
        }
        let l = export("id", &Tensor::full([3, 3], 0.5), &m).unwrap();
        assert_eq!(l.matvec(&[1.0, -2.0, 4.0]).unwrap(), vec![0.5, -1.0, 2.0]);
        assert!(l.matvec(&[1.0]).is_err());
    }

    #[test]
    fn conv_kernel_flattens_to_fan_in_rows() {
        let (w, m) = random_layer(3 * 3 * 2, 4, 1, true);
        let w4 = w.reshape([3, 3, 2, 4]).unwrap();
        let m4 = m.reshape([3, 3, 2, 4]).unwrap();
        let l = export("conv", &w4, &m4).unwrap();
        assert_eq!((l.rows, l.cols), (18, 4));
        assert_eq!(l.reconstruct().data(), w4.hadamard(&m4).unwrap().data());
    }

    #[test]
    fn rejects_non_ternary_and_corrupt_files() {
        let m = Tensor::new([1, 2], vec![1.0, 0.5]).unwrap();
        assert!(matches!(
            export("x", &Tensor::full([1, 2], 1.0), &m),
            Err(Error::NotTernary(_))
        ));
        let (w, m) = random_layer(4, 5, 2, true);
        let bytes = encode(&[export("a", &w, &m).unwrap()]);
        let p = Path::new("mem");
        assert!(decode(&bytes[..bytes.len() - 1], p).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad, p).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra, p).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tcsr");
        let layers: Vec<_> = [(5, 7, true), (6, 3, false)]
            .iter()
            .enumerate()
            .map(|(i, &(r, c, k))| {
                let (w, m) = random_layer(r, c, i as u64, k);
                export(&format!("layer{i}"), &w, &m).unwrap()
            })
            .collect();
        write_tcsr(&path, &layers).unwrap();
        let back = read_tcsr(&path).unwrap();
        assert_eq!(encode(&back), fs::read(&path).unwrap());
        for (a, b) in layers.iter().zip(&back) {
            assert_eq!(
                (&a.row_ptr, &a.col_idx, &a.sign, &a.name),
                (&b.row_ptr, &b.col_idx, &b.sign, &b.name)
            );
        }
        assert_eq!(back[0].magnitude, Magnitude::Constant(0.05f32 as f64));
    }

    proptest! {
        #[test]
        fn reconstruct_is_exact_and_matvec_matches_dense(
            rows in 1usize..12, cols in 1usize..12, seed in any::<u64>(), constant in any::<bool>()
        ) {
            let (w, m) = random_layer(rows, cols, seed, constant);
            let l = export("p", &w, &m).unwrap();
            l.validate().unwrap();
            let dense = w.hadamard(&m).unwrap();
            let rec = l.reconstruct();
            // Exact in value; a pruned negative weight gives -0.0 densely and +0.0 here.
            prop_assert_eq!(rec.data(), dense.data());
            prop_assert_eq!(l.nnz(), m.data().iter().filter(|&&v| v != 0.0).count());

            let mut r = SeededRng::new(seed ^ 1);
            let x: Vec<f64> = (0..cols).map(|_| r.normal()).collect();
            let y = l.matvec(&x).unwrap();
            for (i, yi) in y.iter().enumerate() {
                let d: f64 = (0..cols).map(|j| dense.data()[i * cols + j] * x[j]).sum();
                prop_assert!((yi - d).abs() <= 1e-12 * (1.0 + d.abs()));
            }
        }

        #[test]
        fn byte_model_monotone_in_nnz(rows in 1usize..50, cols in 1usize..50, a in 0usize..100, b in 0usize..100) {
            let mk = |nnz: usize| TernaryCSR {
                name: String::new(), rows, cols,
                row_ptr: vec![0; rows + 1], col_idx: vec![0; nnz], sign: vec![1; nnz],
                magnitude: Magnitude::Constant(1.0),
            };
            let (lo, hi) = (a.min(b), a.max(b));
            prop_assert!(mk(lo).byte_sizes().1 <= mk(hi).byte_sizes().1);
        }
    }
}

//! Offline-space cache file.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "GMSUQOFF"
//! version  u32
//! count    u32      number of sections
//! section  tag [4]u8, length u64, payload, sha256(payload) [32]u8   (repeated)
//! ```
//!
//! Sections appear in the order `HASH GRID KLEM OFFC SNAP SPCS`. A vector is
//! a `u64` length followed by its `f64` entries; a matrix is `rows`, `cols`
//! and the entries in column-major order.

use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gmsfem::{OfflineConfig, OfflineHierarchy, OfflineSpace};
use crate::grid::StructuredGridPair;
use crate::randfield::{CovarianceSpec, KLModel, ParameterVector};

pub const MAGIC: &[u8; 8] = b"GMSUQOFF";
pub const VERSION: u32 = 1;

const SECTIONS: [&[u8; 4]; 6] = [b"HASH", b"GRID", b"KLEM", b"OFFC", b"SNAP", b"SPCS"];

#[derive(Default)]
struct Enc(Vec<u8>);

impl Enc {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        v.iter().for_each(|x| self.f64(*x));
    }
    fn matrix(&mut self, m: &DMatrix<f64>) {
        self.u64(m.nrows() as u64);
        self.u64(m.ncols() as u64);
        m.iter().for_each(|x| self.f64(*x));
    }
}

struct Dec<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'a str,
}

impl<'a> Dec<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Integrity(format!("section {} is truncated", self.section)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Integrity(format!("section {}: count {v} overflows", self.section)))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.usize()?;
        if n > (self.buf.len() - self.pos) / 8 {
            return Err(Error::Integrity(format!("section {}: vector length {n} exceeds payload", self.section)));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn matrix(&mut self) -> Result<DMatrix<f64>> {
        let r = self.usize()?;
        let c = self.usize()?;
        let n = r.checked_mul(c).filter(|n| *n <= (self.buf.len() - self.pos) / 8).ok_or_else(|| {
            Error::Integrity(format!("section {}: matrix {r}x{c} exceeds payload", self.section))
        })?;
        let v = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Ok(DMatrix::from_vec(r, c, v))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Integrity(format!(
                "section {} has {} trailing bytes",
                self.section,
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Serializes the KLE and offline hierarchy, tagged with `hash`.
pub fn encode_offline(hash: &[u8; 32], kl: &KLModel, off: &OfflineHierarchy) -> Vec<u8> {
    let mut sections: Vec<Enc> = (0..SECTIONS.len()).map(|_| Enc::default()).collect();
    sections[0].0.extend_from_slice(hash);

    let g = &off.grid;
    for v in [g.nx_fine, g.ny_fine, g.nx_coarse, g.ny_coarse] {
        sections[1].u64(v as u64);
    }

    let k = &mut sections[2];
    k.f64(kl.spec.sigma2);
    k.f64(kl.spec.l1);
    k.f64(kl.spec.l2);
    k.f64(kl.full_trace);
    k.f64s(&kl.eigenvalues);
    k.f64s(&kl.quadrature_weights);
    k.u64(kl.eigenfunctions.len() as u64);
    kl.eigenfunctions.iter().for_each(|f| k.f64s(f));

    let c = &off.config;
    for v in [c.n_parameters as u64, c.per_parameter as u64, c.m_off as u64, c.seed] {
        sections[3].u64(v);
    }
    sections[3].f64(off.max_snapshot_residual);

    sections[4].u64(off.snapshot_parameters.len() as u64);
    for p in &off.snapshot_parameters {
        sections[4].f64s(&p.0);
    }

    sections[5].u64(off.spaces.len() as u64);
    for s in &off.spaces {
        sections[5].matrix(&s.r_off);
        sections[5].f64s(&s.eigenvalues);
    }

    let mut out = Enc::default();
    out.0.extend_from_slice(MAGIC);
    out.u32(VERSION);
    out.u32(SECTIONS.len() as u32);
    for (tag, body) in SECTIONS.iter().zip(&sections) {
        out.0.extend_from_slice(*tag);
        out.u64(body.0.len() as u64);
        out.0.extend_from_slice(&body.0);
        out.0.extend_from_slice(&Sha256::digest(&body.0));
    }
    out.0
}

/// Parses a cache; with `expected` set, a different stored hash is refused.
pub fn decode_offline(bytes: &[u8], expected: Option<&[u8; 32]>) -> Result<(KLModel, OfflineHierarchy)> {
    let mut head = Dec {
        buf: bytes,
        pos: 0,
        section: "header",
    };
    if head.take(8)? != MAGIC {
        return Err(Error::Integrity("not an offline cache (bad magic)".into()));
    }
    let version = head.u32()?;
    if version != VERSION {
        return Err(Error::Integrity(format!("cache version {version}, expected {VERSION}")));
    }
    let count = head.u32()? as usize;
    if count != SECTIONS.len() {
        return Err(Error::Integrity(format!("cache has {count} sections, expected {}", SECTIONS.len())));
    }
    let mut bodies = Vec::with_capacity(count);
    for tag in SECTIONS {
        let name = std::str::from_utf8(tag).unwrap();
        head.section = name;
        if head.take(4)? != tag {
            return Err(Error::Integrity(format!("expected section {name}")));
        }
        let len = head.usize()?;
        let body = head.take(len)?;
        let digest = head.take(32)?;
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Integrity(format!("section {name} fails its checksum")));
        }
        bodies.push((name, body));
    }
    head.section = "trailer";
    head.finish()?;
    let mut dec: Vec<Dec> = bodies
        .into_iter()
        .map(|(section, buf)| Dec { buf, pos: 0, section })
        .collect();

    let stored: [u8; 32] = dec[0].take(32)?.try_into().unwrap();
    dec[0].finish()?;
    if let Some(e) = expected {
        if &stored != e {
            return Err(Error::Integrity(
                "cache was built for a different grid, covariance or offline setting; rerun `offline`".into(),
            ));
        }
    }

    let d = &mut dec[1];
    let (nx, ny, cx, cy) = (d.usize()?, d.usize()?, d.usize()?, d.usize()?);
    d.finish()?;
    let grid = StructuredGridPair::new(nx, ny, cx, cy).map_err(|e| Error::Integrity(format!("section GRID: {e}")))?;

    let d = &mut dec[2];
    let spec = CovarianceSpec {
        sigma2: d.f64()?,
        l1: d.f64()?,
        l2: d.f64()?,
    };
    let full_trace = d.f64()?;
    let eigenvalues = d.f64s()?;
    let quadrature_weights = d.f64s()?;
    let nf = d.usize()?;
    let eigenfunctions = (0..nf).map(|_| d.f64s()).collect::<Result<Vec<_>>>()?;
    d.finish()?;
    let n = grid.num_fine_nodes();
    if quadrature_weights.len() != n || eigenfunctions.iter().any(|f| f.len() != n) || nf != eigenvalues.len() {
        return Err(Error::Integrity("section KLEM does not match the grid".into()));
    }
    let kl = KLModel {
        spec,
        grid: grid.clone(),
        eigenvalues,
        eigenfunctions,
        quadrature_weights,
        full_trace,
    };

    let d = &mut dec[3];
    let config = OfflineConfig {
        n_parameters: d.usize()?,
        per_parameter: d.usize()?,
        m_off: d.usize()?,
        seed: d.u64()?,
    };
    let max_snapshot_residual = d.f64()?;
    d.finish()?;

    let d = &mut dec[4];
    let np = d.usize()?;
    let snapshot_parameters = (0..np)
        .map(|_| d.f64s().map(ParameterVector))
        .collect::<Result<Vec<_>>>()?;
    d.finish()?;

    let neighborhoods = grid.neighborhoods();
    let d = &mut dec[5];
    let ns = d.usize()?;
    if ns != neighborhoods.len() {
        return Err(Error::Integrity(format!(
            "section SPCS holds {ns} neighborhoods, grid has {}",
            neighborhoods.len()
        )));
    }
    let mut spaces = Vec::with_capacity(ns);
    for nb in &neighborhoods {
        let r_off = d.matrix()?;
        let eigenvalues = d.f64s()?;
        if r_off.nrows() != nb.len() || eigenvalues.len() != r_off.ncols() {
            return Err(Error::Integrity("section SPCS: basis shape does not match its neighborhood".into()));
        }
        spaces.push(OfflineSpace { r_off, eigenvalues });
    }
    d.finish()?;

    Ok((
        kl,
        OfflineHierarchy {
            grid,
            neighborhoods,
            config,
            snapshot_parameters,
            spaces,
            max_snapshot_residual,
        },
    ))
}

pub fn write_offline_cache(path: &Path, hash: &[u8; 32], kl: &KLModel, off: &OfflineHierarchy) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, encode_offline(hash, kl, off)).map_err(|e| Error::io(path, e))
}

pub fn read_offline_cache(path: &Path, expected: Option<&[u8; 32]>) -> Result<(KLModel, OfflineHierarchy)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_offline(&bytes, expected).map_err(|e| e.context(path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gmsfem::build_offline;
    use crate::randfield::truncated_kle;

    fn small() -> (KLModel, OfflineHierarchy) {
        let grid = StructuredGridPair::new(8, 8, 2, 2).unwrap();
        let kl = truncated_kle(&grid, &CovarianceSpec::new(1.0, 0.3, 0.2).unwrap(), 3).unwrap();
        let cfg = OfflineConfig {
            n_parameters: 3,
            per_parameter: 3,
            m_off: 4,
            seed: 5,
        };
        let off = build_offline(&grid, &kl, &cfg, 1).unwrap();
        (kl, off)
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let (kl, off) = small();
        let h = [7u8; 32];
        let bytes = encode_offline(&h, &kl, &off);
        let (kl2, off2) = decode_offline(&bytes, Some(&h)).unwrap();
        assert_eq!(kl2, kl);
        assert_eq!(off2, off);
        assert_eq!(encode_offline(&h, &kl2, &off2), bytes);
        assert_eq!(&bytes[..8], MAGIC);
    }

    #[test]
    fn wrong_hash_is_refused() {
        let (kl, off) = small();
        let bytes = encode_offline(&[1u8; 32], &kl, &off);
        let e = decode_offline(&bytes, Some(&[2u8; 32])).unwrap_err();
        assert!(matches!(e, Error::Integrity(_)));
    }

    #[test]
    fn corruption_names_the_section() {
        let (kl, off) = small();
        let mut bytes = encode_offline(&[1u8; 32], &kl, &off);
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        let e = decode_offline(&bytes, None).unwrap_err().to_string();
        assert!(e.contains("SPCS"), "{e}");
        let e = decode_offline(&bytes[..100], None).unwrap_err();
        assert!(matches!(e, Error::Integrity(_)));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(decode_offline(&v, None).unwrap_err().to_string().contains("version"));
    }
}

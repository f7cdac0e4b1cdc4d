//! Binary dataset files for exact experiment replay.
//!
//! Layout: a 32-byte header — magic `EFLD`, format version (u32), then
//! `n`, `l_total`, `N`, `p` as u32 and the generation seed as u64, all
//! little-endian — followed by the stacked data matrix as row-major
//! little-endian f64.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::problems::PcaProblem;

pub const MAGIC: &[u8; 4] = b"EFLD";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetHeader {
    pub n: u32,
    pub l_total: u32,
    pub nodes: u32,
    pub p: u32,
    pub seed: u64,
}

impl DatasetHeader {
    fn to_bytes(self) -> [u8; 32] {
        let mut out = [0u8; 32];
        out[0..4].copy_from_slice(MAGIC);
        out[4..8].copy_from_slice(&VERSION.to_le_bytes());
        out[8..12].copy_from_slice(&self.n.to_le_bytes());
        out[12..16].copy_from_slice(&self.l_total.to_le_bytes());
        out[16..20].copy_from_slice(&self.nodes.to_le_bytes());
        out[20..24].copy_from_slice(&self.p.to_le_bytes());
        out[24..32].copy_from_slice(&self.seed.to_le_bytes());
        out
    }

    fn from_bytes(raw: &[u8; 32]) -> Result<Self> {
        if &raw[0..4] != MAGIC {
            return Err(Error::BadDataset("bad magic".into()));
        }
        let version = u32::from_le_bytes(raw[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::BadDataset(format!("unsupported version {version}")));
        }
        Ok(Self {
            n: u32::from_le_bytes(raw[8..12].try_into().unwrap()),
            l_total: u32::from_le_bytes(raw[12..16].try_into().unwrap()),
            nodes: u32::from_le_bytes(raw[16..20].try_into().unwrap()),
            p: u32::from_le_bytes(raw[20..24].try_into().unwrap()),
            seed: u64::from_le_bytes(raw[24..32].try_into().unwrap()),
        })
    }
}

/// Writes a PCA problem's stacked data matrix with its header.
pub fn save(problem: &PcaProblem, path: &Path) -> Result<()> {
    use crate::problems::MatrixProblem;
    let a = problem.stacked();
    let header = DatasetHeader {
        n: problem.rows() as u32,
        l_total: problem.l_total() as u32,
        nodes: problem.num_nodes() as u32,
        p: problem.cols() as u32,
        seed: problem.seed(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&header.to_bytes())?;
    for r in 0..a.nrows() {
        for c in 0..a.ncols() {
            w.write_all(&a[(r, c)].to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset file back into a PCA problem, re-deriving the optimum
/// from the stored rows.
pub fn load(path: &Path) -> Result<(DatasetHeader, PcaProblem)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut raw = [0u8; 32];
    r.read_exact(&mut raw)?;
    let header = DatasetHeader::from_bytes(&raw)?;
    let rows = header.l_total as usize;
    let cols = header.n as usize;
    let mut data = vec![0.0f64; rows * cols];
    let mut buf = [0u8; 8];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::BadDataset("trailing bytes after data".into()));
    }
    let a = DMatrix::from_row_slice(rows, cols, &data);
    let problem = PcaProblem::from_stacked(a, header.p as usize, header.nodes as usize, header.seed)?;
    Ok((header, problem))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::MatrixProblem;

    #[test]
    fn save_load_round_trip() {
        let dir = std::env::temp_dir().join(format!("efld-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.bin");

        let problem = PcaProblem::generate(6, 5, 2, 0.1, 2, 99).unwrap();
        save(&problem, &path).unwrap();
        let (header, loaded) = load(&path).unwrap();
        assert_eq!(header.n, 6);
        assert_eq!(header.l_total, 10);
        assert_eq!(header.nodes, 2);
        assert_eq!(header.p, 2);
        assert_eq!(header.seed, 99);
        assert_eq!(loaded.stacked(), problem.stacked());
        assert_eq!(loaded.x_star(), problem.x_star());
        assert_eq!(loaded.optimum_value(), problem.optimum_value());

        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn rejects_corrupt_headers() {
        let dir = std::env::temp_dir().join(format!("efld-test-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.bin");
        std::fs::write(&path, b"NOPEnope").unwrap();
        assert!(load(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}

//! SAEA activation files.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "SAEA"
//! 4       4     version u32 (= 1)
//! 8       4     n u32, activation width
//! 12      8     count u64, number of rows
//! 20      1     dtype u8 (0 = f32 little-endian)
//! 21      4*n*count  row-major payload
//! ```
//!
//! The file size must equal `21 + 4 * n * count` exactly. Readers validate the
//! header and the size before yielding any row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SaeError};

pub const MAGIC: &[u8; 4] = b"SAEA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 21;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ActivationHeader {
    pub version: u32,
    pub n: u32,
    pub count: u64,
    pub dtype: u8,
}

impl ActivationHeader {
    fn to_bytes(self) -> [u8; HEADER_LEN as usize] {
        let mut out = [0u8; HEADER_LEN as usize];
        out[..4].copy_from_slice(MAGIC);
        out[4..8].copy_from_slice(&self.version.to_le_bytes());
        out[8..12].copy_from_slice(&self.n.to_le_bytes());
        out[12..20].copy_from_slice(&self.count.to_le_bytes());
        out[20] = self.dtype;
        out
    }

    /// Payload bytes implied by the header, `None` on overflow.
    pub fn payload_len(&self) -> Option<u64> {
        self.count.checked_mul(self.n as u64 * 4)
    }
}

/// Write `x` (`N x n`) to `path`. Entries must be finite.
pub fn write_activations(x: ArrayView2<'_, f32>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
        return Err(SaeError::InvalidInput(format!(
            "activation entry {pos} is not finite; refusing to write {}",
            path.display()
        )));
    }
    let n = u32::try_from(x.ncols()).map_err(|_| SaeError::InvalidInput("activation width exceeds u32".into()))?;
    let header = ActivationHeader {
        version: VERSION,
        n,
        count: x.nrows() as u64,
        dtype: DTYPE_F32,
    };
    let file = File::create(path).map_err(|e| SaeError::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&header.to_bytes()).map_err(|e| SaeError::io(path, e))?;
    for row in x.rows() {
        for &v in row {
            writer.write_all(&v.to_le_bytes()).map_err(|e| SaeError::io(path, e))?;
        }
    }
    let file = writer.into_inner().map_err(|e| SaeError::io(path, e.into_error()))?;
    file.sync_all().map_err(|e| SaeError::io(path, e))?;
    Ok(())
}

/// Validated handle on an activation file.
#[derive(Debug, Clone)]
pub struct ActivationFile {
    path: PathBuf,
    header: ActivationHeader,
}

impl ActivationFile {
    /// Open and validate magic, version, dtype and total size.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut file = File::open(&path).map_err(|e| SaeError::io(&path, e))?;
        let size = file.metadata().map_err(|e| SaeError::io(&path, e))?.len();
        if size < HEADER_LEN {
            return Err(SaeError::format(&path, "file shorter than the SAEA header"));
        }
        let mut raw = [0u8; HEADER_LEN as usize];
        file.read_exact(&mut raw).map_err(|e| SaeError::io(&path, e))?;
        if &raw[..4] != MAGIC {
            return Err(SaeError::format(&path, "bad magic (expected \"SAEA\")"));
        }
        let header = ActivationHeader {
            version: u32::from_le_bytes(raw[4..8].try_into().expect("4 bytes")),
            n: u32::from_le_bytes(raw[8..12].try_into().expect("4 bytes")),
            count: u64::from_le_bytes(raw[12..20].try_into().expect("8 bytes")),
            dtype: raw[20],
        };
        if header.version != VERSION {
            return Err(SaeError::format(&path, format!("unsupported version {}", header.version)));
        }
        if header.dtype != DTYPE_F32 {
            return Err(SaeError::format(&path, format!("unsupported dtype code {}", header.dtype)));
        }
        if header.n == 0 && header.count > 0 {
            return Err(SaeError::format(&path, "zero-width rows"));
        }
        let expected = header
            .payload_len()
            .and_then(|p| p.checked_add(HEADER_LEN))
            .ok_or_else(|| SaeError::format(&path, "declared size overflows"))?;
        if size != expected {
            return Err(SaeError::format(
                &path,
                format!("declared payload needs {expected} bytes, file has {size}"),
            ));
        }
        Ok(ActivationFile { path, header })
    }

    pub fn header(&self) -> ActivationHeader {
        self.header
    }

    pub fn n(&self) -> usize {
        self.header.n as usize
    }

    pub fn count(&self) -> usize {
        self.header.count as usize
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Stream batches of at most `batch_size` rows. With a shuffle seed the
    /// rows come in a seeded permutation order; the last batch may be partial.
    pub fn batches(&self, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchIter> {
        if batch_size == 0 {
            return Err(SaeError::InvalidInput("batch_size must be positive".into()));
        }
        let file = File::open(&self.path).map_err(|e| SaeError::io(&self.path, e))?;
        let order = shuffle_seed.map(|seed| {
            let mut idx: Vec<u64> = (0..self.header.count).collect();
            idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            idx
        });
        let mut reader = BufReader::new(file);
        reader
            .seek(SeekFrom::Start(HEADER_LEN))
            .map_err(|e| SaeError::io(&self.path, e))?;
        Ok(BatchIter {
            reader,
            path: self.path.clone(),
            n: self.n(),
            count: self.count(),
            batch_size,
            next_row: 0,
            order,
        })
    }

    /// Whole file as one matrix.
    pub fn read_all(&self) -> Result<Array2<f32>> {
        let mut out = Array2::zeros((self.count(), self.n()));
        let mut row = 0;
        for batch in self.batches(8192, None)? {
            let batch = batch?;
            let rows = batch.nrows();
            out.slice_mut(ndarray::s![row..row + rows, ..]).assign(&batch);
            row += rows;
        }
        Ok(out)
    }
}

pub struct BatchIter {
    reader: BufReader<File>,
    path: PathBuf,
    n: usize,
    count: usize,
    batch_size: usize,
    next_row: usize,
    order: Option<Vec<u64>>,
}

impl BatchIter {
    fn read_row(&mut self, dst: &mut [f32], buf: &mut [u8]) -> Result<()> {
        self.reader.read_exact(buf).map_err(|e| SaeError::io(&self.path, e))?;
        for (v, chunk) in dst.iter_mut().zip(buf.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
        Ok(())
    }

    fn next_batch(&mut self) -> Result<Array2<f32>> {
        let rows = self.batch_size.min(self.count - self.next_row);
        let mut out = Array2::<f32>::zeros((rows, self.n));
        let mut buf = vec![0u8; self.n * 4];
        for r in 0..rows {
            let position = self.next_row + r;
            if let Some(order) = &self.order {
                let offset = HEADER_LEN + order[position] * self.n as u64 * 4;
                self.reader
                    .seek(SeekFrom::Start(offset))
                    .map_err(|e| SaeError::io(&self.path, e))?;
            }
            let dst = out.row_mut(r).into_slice().expect("standard layout");
            self.read_row(dst, &mut buf)?;
        }
        self.next_row += rows;
        Ok(out)
    }
}

impl Iterator for BatchIter {
    type Item = Result<Array2<f32>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next_row >= self.count {
            return None;
        }
        let result = self.next_batch();
        if result.is_err() {
            self.next_row = self.count;
        }
        Some(result)
    }
}

/// Open `path` and stream its batches.
pub fn read_activations(path: impl AsRef<Path>, batch_size: usize, shuffle_seed: Option<u64>) -> Result<BatchIter> {
    ActivationFile::open(path)?.batches(batch_size, shuffle_seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetStats {
    pub mean: Array1<f64>,
    /// Population variance per dimension.
    pub variance: Array1<f64>,
    pub count: usize,
}

/// Per-dimension mean and variance in one streaming pass (Welford updates in f64).
pub fn compute_stats(path: impl AsRef<Path>) -> Result<DatasetStats> {
    let path = path.as_ref();
    let file = ActivationFile::open(path)?;
    if file.count() == 0 {
        return Err(SaeError::format(path, "cannot compute statistics of an empty file"));
    }
    let n = file.n();
    let mut mean = Array1::<f64>::zeros(n);
    let mut m2 = Array1::<f64>::zeros(n);
    let mut seen = 0usize;
    for batch in file.batches(4096, None)? {
        for row in batch?.rows() {
            seen += 1;
            let inv = 1.0 / seen as f64;
            for j in 0..n {
                let x = row[j] as f64;
                let delta = x - mean[j];
                mean[j] += delta * inv;
                m2[j] += delta * (x - mean[j]);
            }
        }
    }
    Ok(DatasetStats {
        mean,
        variance: m2 / seen as f64,
        count: seen,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn empty_matrix_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.saea");
        write_activations(Array2::<f32>::zeros((0, 3)).view(), &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), HEADER_LEN);
        let f = ActivationFile::open(&path).unwrap();
        assert_eq!(f.count(), 0);
        assert_eq!(f.batches(4, None).unwrap().count(), 0);
        assert!(compute_stats(&path).is_err());
    }

    #[test]
    fn half_encodes_as_ieee_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.saea");
        write_activations(array![[0.5f32]].view(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[21..], &[0x00, 0x00, 0x00, 0x3F]);
        assert_eq!(&bytes[..4], b"SAEA");
        assert_eq!(bytes[20], 0);
    }

    #[test]
    fn rejects_non_finite() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_activations(array![[f32::NAN]].view(), dir.path().join("x")).is_err());
    }

    #[test]
    fn corrupt_files_rejected_before_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.saea");
        write_activations(array![[1.0f32, 2.0], [3.0, 4.0]].view(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_activations(&path, 1, None).is_err());
        let mut bad = bytes.clone();
        bad[1] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(read_activations(&path, 1, None).is_err());
        let mut bad = bytes.clone();
        bad[4] = 2;
        std::fs::write(&path, &bad).unwrap();
        assert!(read_activations(&path, 1, None).is_err());
        let mut bad = bytes;
        bad[20] = 1;
        std::fs::write(&path, &bad).unwrap();
        assert!(read_activations(&path, 1, None).is_err());
    }

    #[test]
    fn stats_small_cases() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.saea");
        write_activations(Array2::from_elem((5, 3), 2.5f32).view(), &path).unwrap();
        let s = compute_stats(&path).unwrap();
        assert!(s.mean.iter().all(|&m| m == 2.5));
        assert!(s.variance.iter().all(|&v| v == 0.0));
        write_activations(array![[1.5f32, -2.0], [-1.5, 2.0]].view(), &path).unwrap();
        let s = compute_stats(&path).unwrap();
        assert_eq!(s.mean, array![0.0, 0.0]);
        assert_eq!(s.variance, array![2.25, 4.0]);
    }
}

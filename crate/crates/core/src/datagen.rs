//! Synthetic activations with a known number of mixed atoms per sample.
//!
//! Each sample is a positive combination of `c` distinct unit-norm dictionary
//! atoms plus isotropic Gaussian noise, with `c` drawn uniformly from
//! `[c_min, c_max]`. The count `c` is kept as the ground-truth complexity label.
//!
//! On disk a dataset is three files:
//! - `<path>`: the activations in the SAEA format (see [`crate::dataio`])
//! - `<path>.truth.json`: factor counts and the generator parameters
//! - `<path>.dict`: u64 LE `M`, u64 LE `n`, then `M * n` f32 LE values row-major
//!
//! Sample `i` draws from its own ChaCha stream keyed by `(seed, i)`, so the
//! output does not depend on how generation is scheduled across threads.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, ArrayView2};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataio::{write_activations, ActivationFile};
use crate::error::{Result, SaeError};
use crate::exec;

/// Default coefficient range for generated mixtures.
pub const DEFAULT_COEFF_LOW: f64 = 0.5;
pub const DEFAULT_COEFF_HIGH: f64 = 1.5;

/// Generator settings; echoed into the truth sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorParams {
    pub n: usize,
    pub atoms: usize,
    pub samples: usize,
    pub c_min: usize,
    pub c_max: usize,
    pub coeff_low: f64,
    pub coeff_high: f64,
    pub noise_sigma: f64,
    /// Seed of the per-sample streams.
    pub seed: u64,
    /// Seed of the dictionary; sharing it across datasets gives held-out
    /// samples of the same atoms.
    pub dict_seed: u64,
}

impl GeneratorParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(SaeError::InvalidInput(format!("n must be at least 2, got {}", self.n)));
        }
        if self.atoms == 0 {
            return Err(SaeError::InvalidInput("atoms must be at least 1".into()));
        }
        if self.c_min < 1 || self.c_min > self.c_max || self.c_max > self.atoms {
            return Err(SaeError::InvalidInput(format!(
                "factor range requires 1 <= c_min <= c_max <= atoms, got c_min={} c_max={} atoms={}",
                self.c_min, self.c_max, self.atoms
            )));
        }
        if !(self.coeff_low > 0.0 && self.coeff_low <= self.coeff_high && self.coeff_high.is_finite()) {
            return Err(SaeError::InvalidInput(format!(
                "coefficients require 0 < coeff_low <= coeff_high, got [{}, {}]",
                self.coeff_low, self.coeff_high
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SaeError::InvalidInput(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    /// `N x n` activations at storage precision.
    pub x: Array2<f32>,
    pub factor_counts: Vec<usize>,
    /// `M x n` unit-norm atoms (values are f32-representable).
    pub dictionary: Array2<f64>,
    pub params: GeneratorParams,
}

/// `M` random directions in `R^n`, unit-normalized and rounded to f32.
pub fn make_dictionary(n: usize, atoms: usize, seed: u64) -> Result<Array2<f64>> {
    if n < 2 || atoms == 0 {
        return Err(SaeError::InvalidInput(format!("dictionary needs n >= 2 and M >= 1, got n={n} M={atoms}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dict = Array2::<f64>::zeros((atoms, n));
    for mut row in dict.rows_mut() {
        loop {
            row.mapv_inplace(|_| StandardNormal.sample(&mut rng));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-6 {
                row.mapv_inplace(|v| ((v / norm) as f32) as f64);
                break;
            }
        }
    }
    Ok(dict)
}

/// One sample before storage rounding: the exact f64 mixture, its atom
/// indices and coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub x: Array1<f64>,
    pub atoms: Vec<usize>,
    pub coefficients: Vec<f64>,
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Generate sample `index` of the dataset described by `params`.
pub fn sample_mixture(dict: &Array2<f64>, params: &GeneratorParams, index: usize) -> Mixture {
    let mut rng = sample_rng(params.seed, index);
    let c = rng.random_range(params.c_min..=params.c_max);
    let atoms = index::sample(&mut rng, dict.nrows(), c).into_vec();
    let mut x = Array1::<f64>::zeros(dict.ncols());
    let mut coefficients = Vec::with_capacity(c);
    for &a in &atoms {
        let coeff = if params.coeff_low == params.coeff_high {
            params.coeff_low
        } else {
            rng.random_range(params.coeff_low..params.coeff_high)
        };
        x.scaled_add(coeff, &dict.row(a));
        coefficients.push(coeff);
    }
    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma).expect("validated sigma");
        x.mapv_inplace(|v| v + noise.sample(&mut rng));
    }
    Mixture { x, atoms, coefficients }
}

/// Draw `params.samples` mixtures of the rows of `dict`.
pub fn sample_dataset(dict: &Array2<f64>, params: &GeneratorParams) -> Result<SyntheticDataset> {
    params.validate()?;
    if dict.nrows() != params.atoms || dict.ncols() != params.n {
        return Err(SaeError::DimensionMismatch {
            context: "dictionary shape",
            expected: params.atoms * params.n,
            actual: dict.len(),
        });
    }
    let rows = exec::map_indices(params.samples, |i| sample_mixture(dict, params, i));
    let mut x = Array2::<f32>::zeros((params.samples, params.n));
    let mut factor_counts = Vec::with_capacity(params.samples);
    for (i, m) in rows.into_iter().enumerate() {
        x.row_mut(i).assign(&m.x.mapv(|v| v as f32));
        factor_counts.push(m.atoms.len());
    }
    Ok(SyntheticDataset {
        x,
        factor_counts,
        dictionary: dict.clone(),
        params: params.clone(),
    })
}

/// Dictionary from `params.dict_seed` followed by sampling.
pub fn generate(params: &GeneratorParams) -> Result<SyntheticDataset> {
    params.validate()?;
    let dict = make_dictionary(params.n, params.atoms, params.dict_seed)?;
    sample_dataset(&dict, params)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthSidecar {
    pub factor_counts: Vec<usize>,
    pub generator: GeneratorParams,
}

pub fn truth_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".truth.json");
    PathBuf::from(s)
}

pub fn dict_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".dict");
    PathBuf::from(s)
}

pub fn write_dataset(ds: &SyntheticDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    write_activations(ds.x.view(), path)?;
    let truth = TruthSidecar {
        factor_counts: ds.factor_counts.clone(),
        generator: ds.params.clone(),
    };
    let json = serde_json::to_vec(&truth).map_err(|e| SaeError::Internal(format!("truth encoding: {e}")))?;
    let tp = truth_path(path);
    fs::write(&tp, json).map_err(|e| SaeError::io(&tp, e))?;
    write_dictionary(ds.dictionary.view(), &dict_path(path))
}

fn write_dictionary(dict: ArrayView2<'_, f64>, path: &Path) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + dict.len() * 4);
    bytes.extend_from_slice(&(dict.nrows() as u64).to_le_bytes());
    bytes.extend_from_slice(&(dict.ncols() as u64).to_le_bytes());
    for &v in dict.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| SaeError::io(path, e))
}

pub fn read_dictionary(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| SaeError::io(path, e))?;
    if bytes.len() < 16 {
        return Err(SaeError::format(path, "dictionary blob shorter than its header"));
    }
    let m = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let n = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let expected = m.checked_mul(n).and_then(|v| v.checked_mul(4)).and_then(|v| v.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(SaeError::format(path, "dictionary blob size does not match its header"));
    }
    let values: Vec<f64> = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Array2::from_shape_vec((m, n), values).map_err(|e| SaeError::format(path, e.to_string()))
}

pub fn read_truth(path: &Path) -> Result<TruthSidecar> {
    let bytes = fs::read(path).map_err(|e| SaeError::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| SaeError::format(path, format!("invalid truth sidecar: {e}")))
}

/// A dataset read from disk. Sidecars are optional; their absence is reported
/// through the `None` fields rather than as an error.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub x: Array2<f32>,
    pub truth: Option<TruthSidecar>,
    pub dictionary: Option<Array2<f64>>,
}

impl LoadedDataset {
    pub fn factor_counts(&self) -> Option<&[usize]> {
        self.truth.as_ref().map(|t| t.factor_counts.as_slice())
    }

    /// Complete dataset when both sidecars are present.
    pub fn into_synthetic(self) -> Option<SyntheticDataset> {
        let truth = self.truth?;
        Some(SyntheticDataset {
            x: self.x,
            factor_counts: truth.factor_counts,
            dictionary: self.dictionary?,
            params: truth.generator,
        })
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let x = ActivationFile::open(path)?.read_all()?;
    let tp = truth_path(path);
    let truth = if tp.exists() {
        let t = read_truth(&tp)?;
        if t.factor_counts.len() != x.nrows() {
            return Err(SaeError::format(&tp, "factor_counts length does not match the activation count"));
        }
        Some(t)
    } else {
        None
    };
    let dp = dict_path(path);
    let dictionary = if dp.exists() { Some(read_dictionary(&dp)?) } else { None };
    Ok(LoadedDataset { x, truth, dictionary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(samples: usize) -> GeneratorParams {
        GeneratorParams {
            n: 16,
            atoms: 12,
            samples,
            c_min: 1,
            c_max: 4,
            coeff_low: 0.5,
            coeff_high: 1.5,
            noise_sigma: 0.0,
            seed: 3,
            dict_seed: 4,
        }
    }

    #[test]
    fn dictionary_unit_norm_and_deterministic() {
        let a = make_dictionary(64, 200, 5).unwrap();
        for row in a.rows() {
            assert!((row.dot(&row).sqrt() - 1.0).abs() < 1e-6);
        }
        assert_eq!(a, make_dictionary(64, 200, 5).unwrap());
        assert_ne!(a, make_dictionary(64, 200, 6).unwrap());
    }

    #[test]
    fn single_atom_unit_coefficient_reproduces_atoms() {
        let mut p = params(50);
        p.c_max = 1;
        p.coeff_low = 1.0;
        p.coeff_high = 1.0;
        let dict = make_dictionary(p.n, p.atoms, 1).unwrap();
        for i in 0..p.samples {
            let m = sample_mixture(&dict, &p, i);
            assert_eq!(m.x, dict.row(m.atoms[0]));
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        let dict = make_dictionary(16, 12, 0).unwrap();
        for edit in [
            |p: &mut GeneratorParams| p.c_min = 0,
            |p: &mut GeneratorParams| p.c_min = 5,
            |p: &mut GeneratorParams| p.c_max = 13,
            |p: &mut GeneratorParams| p.coeff_low = -1.0,
            |p: &mut GeneratorParams| p.noise_sigma = -0.1,
        ] {
            let mut p = params(4);
            edit(&mut p);
            assert!(sample_dataset(&dict, &p).is_err());
        }
        assert!(make_dictionary(1, 3, 0).is_err());
    }

    #[test]
    fn counts_and_atoms_are_consistent() {
        let p = params(300);
        let dict = make_dictionary(p.n, p.atoms, 2).unwrap();
        for i in 0..p.samples {
            let m = sample_mixture(&dict, &p, i);
            let mut a = m.atoms.clone();
            a.sort_unstable();
            a.dedup();
            assert_eq!(a.len(), m.atoms.len());
            assert!((p.c_min..=p.c_max).contains(&a.len()));
            assert!(m.coefficients.iter().all(|&c| (0.5..1.5).contains(&c)));
        }
    }

    #[test]
    fn missing_sidecars_are_flagged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.saea");
        let ds = generate(&params(20)).unwrap();
        write_dataset(&ds, &path).unwrap();
        fs::remove_file(truth_path(&path)).unwrap();
        let loaded = read_dataset(&path).unwrap();
        assert!(loaded.factor_counts().is_none());
        assert_eq!(loaded.x, ds.x);
    }
}

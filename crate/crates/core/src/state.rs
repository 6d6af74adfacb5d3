//! Core data types: sample states, conditioning bundles, and a small
//! row-major matrix used for linear conditioning maps.
//!
//! A [`StateVector`] is a flat `f64` array plus shape metadata. It houses
//! everything that flows through the sampler: the evolving sample, the
//! initial noise, adjoint vectors and gradient maps. All entries are kept
//! finite by construction; violations are surfaced as errors at the point
//! the data enters the library rather than deep inside an integration loop.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Regular latitude-longitude grid metadata for a 2-D state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub n_lat: usize,
    pub n_lon: usize,
    /// Cell-center latitudes in degrees, strictly monotone in [-90, 90].
    pub latitudes: Vec<f64>,
}

impl GridMeta {
    pub fn new(n_lat: usize, n_lon: usize, latitudes: Vec<f64>) -> Result<Self> {
        if latitudes.len() != n_lat {
            return Err(Error::Contract(format!(
                "grid meta has {} latitudes for n_lat = {}",
                latitudes.len(),
                n_lat
            )));
        }
        let in_range = latitudes.iter().all(|l| l.is_finite() && (-90.0..=90.0).contains(l));
        if !in_range {
            return Err(Error::Contract("latitudes must be finite and in [-90, 90]".into()));
        }
        let increasing = latitudes.windows(2).all(|w| w[0] < w[1]);
        let decreasing = latitudes.windows(2).all(|w| w[0] > w[1]);
        if latitudes.len() > 1 && !increasing && !decreasing {
            return Err(Error::Contract("latitudes must be strictly monotone".into()));
        }
        Ok(GridMeta { n_lat, n_lon, latitudes })
    }
}

/// A flat array of 64-bit floats with shape metadata.
///
/// Invariants: every entry is finite and `shape` multiplies out to
/// `data.len()`. If grid metadata is attached, `n_lat * n_lon` equals the
/// data length.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    data: Vec<f64>,
    shape: Vec<usize>,
    grid_meta: Option<GridMeta>,
}

impl StateVector {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.is_empty() || n != data.len() {
            return Err(Error::Contract(format!(
                "shape {:?} does not match data length {}",
                shape,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite entry at index {i}")));
        }
        Ok(StateVector { data, shape, grid_meta: None })
    }

    /// Convenience constructor for a rank-1 state.
    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        StateVector::new(data, vec![n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        StateVector { data: vec![0.0; n], shape: shape.to_vec(), grid_meta: None }
    }

    pub fn zeros_like(other: &StateVector) -> Self {
        StateVector {
            data: vec![0.0; other.len()],
            shape: other.shape.clone(),
            grid_meta: other.grid_meta.clone(),
        }
    }

    pub fn with_grid_meta(mut self, meta: GridMeta) -> Result<Self> {
        if meta.n_lat * meta.n_lon != self.data.len() {
            return Err(Error::Contract(format!(
                "grid {}x{} does not cover data length {}",
                meta.n_lat,
                meta.n_lon,
                self.data.len()
            )));
        }
        self.grid_meta = Some(meta);
        Ok(self)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn grid_meta(&self) -> Option<&GridMeta> {
        self.grid_meta.as_ref()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape(&self, other: &StateVector) -> bool {
        self.shape == other.shape
    }

    /// Rebuild with new data, keeping shape and grid metadata.
    ///
    /// Validates finiteness; used by integrators after each step so that
    /// divergence surfaces immediately.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        if data.len() != self.data.len() {
            return Err(Error::Contract(format!(
                "replacement data length {} != {}",
                data.len(),
                self.data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("non-finite entry at index {i}")));
        }
        Ok(StateVector { data, shape: self.shape.clone(), grid_meta: self.grid_meta.clone() })
    }

    /// Like [`StateVector::with_data`] but without the finiteness scan,
    /// for internal hot paths that check separately.
    pub(crate) fn with_data_unchecked(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        StateVector { data, shape: self.shape.clone(), grid_meta: self.grid_meta.clone() }
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn dot(&self, other: &StateVector) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// `self + scale * other`, elementwise.
    pub fn add_scaled(&self, scale: f64, other: &StateVector) -> StateVector {
        debug_assert_eq!(self.len(), other.len());
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + scale * b).collect();
        self.with_data_unchecked(data)
    }

    pub fn scaled(&self, scale: f64) -> StateVector {
        self.with_data_unchecked(self.data.iter().map(|v| v * scale).collect())
    }

    pub fn sub(&self, other: &StateVector) -> StateVector {
        self.add_scaled(-1.0, other)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }
}

/// Conditioning inputs: one vector conditioner plus an ordered list of
/// named scalar conditioners such as `("tau", day-of-year + fraction)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    c: StateVector,
    scalars: Vec<(String, f64)>,
}

impl Conditioning {
    pub fn new(c: StateVector, scalars: Vec<(String, f64)>) -> Result<Self> {
        for (i, (name, value)) in scalars.iter().enumerate() {
            if !value.is_finite() {
                return Err(Error::Contract(format!("scalar conditioner '{name}' is non-finite")));
            }
            if scalars[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Contract(format!("duplicate scalar conditioner '{name}'")));
            }
            // tau is a continuous day count: day of the year plus the day fraction.
            if name == "tau" && *value < 0.0 {
                return Err(Error::Contract("scalar conditioner 'tau' must be >= 0".into()));
            }
        }
        Ok(Conditioning { c, scalars })
    }

    pub fn vector_only(c: StateVector) -> Self {
        Conditioning { c, scalars: Vec::new() }
    }

    pub fn c(&self) -> &StateVector {
        &self.c
    }

    pub fn scalars(&self) -> &[(String, f64)] {
        &self.scalars
    }

    pub fn scalar_values(&self) -> Vec<f64> {
        self.scalars.iter().map(|(_, v)| *v).collect()
    }

    pub fn scalar(&self, name: &str) -> Option<f64> {
        self.scalars.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn n_scalars(&self) -> usize {
        self.scalars.len()
    }

    /// Shift by `scale * (delta_c, delta_scalars)`. Scalar deltas are matched
    /// positionally and must have the same names.
    pub fn add_scaled(
        &self,
        scale: f64,
        delta_c: &StateVector,
        delta_scalars: &[(String, f64)],
    ) -> Result<Conditioning> {
        if !delta_c.same_shape(&self.c) {
            return Err(Error::Contract("conditioning delta shape mismatch".into()));
        }
        if delta_scalars.len() != self.scalars.len() {
            return Err(Error::Contract("conditioning delta scalar count mismatch".into()));
        }
        let mut scalars = self.scalars.clone();
        for ((name, value), (dname, dv)) in scalars.iter_mut().zip(delta_scalars) {
            if name != dname {
                return Err(Error::Contract(format!(
                    "scalar delta name '{dname}' does not match '{name}'"
                )));
            }
            *value += scale * dv;
        }
        Ok(Conditioning { c: self.c.add_scaled(scale, delta_c), scalars })
    }
}

/// Dense row-major matrix, used for linear conditioning-to-mean maps.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// `M v` with `v` of length `cols`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|r| {
                let row = &self.data[r * self.cols..(r + 1) * self.cols];
                row.iter().zip(v).map(|(m, x)| m * x).sum()
            })
            .collect()
    }

    /// `aᵀ M` with `a` of length `rows`.
    pub fn vecmat(&self, a: &[f64]) -> Vec<f64> {
        debug_assert_eq!(a.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, av) in a.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (o, m) in out.iter_mut().zip(row) {
                *o += av * m;
            }
        }
        out
    }

    pub fn scaled(&self, scale: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * scale).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_vector_rejects_shape_mismatch() {
        assert!(StateVector::new(vec![1.0, 2.0, 3.0], vec![2, 2]).is_err());
        assert!(StateVector::new(vec![1.0; 4], vec![2, 2]).is_ok());
    }

    #[test]
    fn state_vector_rejects_non_finite() {
        assert!(StateVector::from_vec(vec![1.0, f64::NAN]).is_err());
        assert!(StateVector::from_vec(vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn grid_meta_must_cover_data() {
        let meta = GridMeta::new(2, 3, vec![-30.0, 30.0]).unwrap();
        let ok = StateVector::zeros(&[2, 3]).with_grid_meta(meta.clone());
        assert!(ok.is_ok());
        let bad = StateVector::zeros(&[7]).with_grid_meta(meta);
        assert!(bad.is_err());
    }

    #[test]
    fn grid_meta_latitudes_monotone() {
        assert!(GridMeta::new(3, 1, vec![0.0, 10.0, 5.0]).is_err());
        assert!(GridMeta::new(3, 1, vec![10.0, 5.0, 0.0]).is_ok());
        assert!(GridMeta::new(2, 1, vec![-91.0, 0.0]).is_err());
    }

    #[test]
    fn conditioning_rejects_duplicate_scalars() {
        let c = StateVector::from_vec(vec![1.0]).unwrap();
        let r = Conditioning::new(c, vec![("tau".into(), 1.0), ("tau".into(), 2.0)]);
        assert!(r.is_err());
    }

    #[test]
    fn conditioning_rejects_negative_tau() {
        let c = StateVector::from_vec(vec![1.0]).unwrap();
        assert!(Conditioning::new(c.clone(), vec![("tau".into(), -0.5)]).is_err());
        assert!(Conditioning::new(c, vec![("zeta".into(), -0.5)]).is_ok());
    }

    #[test]
    fn matvec_and_vecmat_agree_with_hand_values() {
        let m = Matrix::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(m.matvec(&[1.0, 0.0, -1.0]), vec![-2.0, -2.0]);
        assert_eq!(m.vecmat(&[1.0, -1.0]), vec![-3.0, -3.0, -3.0]);
    }
}

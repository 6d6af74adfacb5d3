//! Scalar functionals `q(X_0)` with exact gradients.
//!
//! All shipped quantities are linear, so the gradient is a constant weight
//! vector and the seed `dq/dX_0` handed to the adjoint is exact. Downstream
//! gradient error is then attributable entirely to the adjoint integration.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::StateVector;

/// A linear scalar quantity over a state.
///
/// Shape conventions: rank-1 `[n]` and rank-2 `[rows, cols]` states are a
/// single channel; rank-3 `[channels, rows, cols]` states select a channel
/// (default 0). `rect` patches are `[row0, row1, col0, col1]` with exclusive
/// upper bounds on the (possibly channel-sliced) grid. Latitude weighting
/// uses `cos(latitude)` at cell centers and requires grid metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum QuantitySpec {
    /// A single component `x[i]` (index within the selected channel).
    Component {
        index: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel: Option<usize>,
    },
    /// Mean over a masked patch, given as explicit indices or a grid rect.
    PatchMean {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        indices: Option<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        rect: Option<[usize; 4]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel: Option<usize>,
    },
    /// Area-weighted global mean: `sum(w_i x_i) / sum(w_i)` with
    /// `w_i = cos(lat_i)` when `lat_weighted`, uniform otherwise.
    WeightedGlobalMean {
        #[serde(default)]
        lat_weighted: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        channel: Option<usize>,
    },
}

/// Byte range of the selected channel within the flat data.
fn channel_slice(x: &StateVector, channel: Option<usize>) -> Result<(usize, usize)> {
    match x.shape() {
        [_] | [_, _] => {
            if channel.unwrap_or(0) != 0 {
                return Err(Error::Contract(format!(
                    "channel {:?} requested on a single-channel state",
                    channel
                )));
            }
            Ok((0, x.len()))
        }
        [channels, rest @ ..] => {
            let ch = channel.unwrap_or(0);
            if ch >= *channels {
                return Err(Error::Contract(format!(
                    "channel {ch} out of range for {channels} channels"
                )));
            }
            let block: usize = rest.iter().product();
            Ok((ch * block, (ch + 1) * block))
        }
        [] => Err(Error::Contract("empty state shape".into())),
    }
}

impl QuantitySpec {
    /// Normalized weight vector over the full state. `evaluate` and
    /// `gradient` are both dot products against it, so
    /// `q(x + d) - q(x) = <gradient, d>` holds exactly for linear q.
    fn weights(&self, x: &StateVector) -> Result<Vec<f64>> {
        let mut w = vec![0.0; x.len()];
        match self {
            QuantitySpec::Component { index, channel } => {
                let (lo, hi) = channel_slice(x, *channel)?;
                let i = lo + index;
                if i >= hi {
                    return Err(Error::Contract(format!(
                        "component index {index} out of range ({} entries)",
                        hi - lo
                    )));
                }
                w[i] = 1.0;
            }
            QuantitySpec::PatchMean { indices, rect, channel } => {
                let (lo, hi) = channel_slice(x, *channel)?;
                let picked: Vec<usize> = match (indices, rect) {
                    (Some(idx), None) => {
                        for &i in idx {
                            if lo + i >= hi {
                                return Err(Error::Contract(format!(
                                    "patch index {i} out of range ({} entries)",
                                    hi - lo
                                )));
                            }
                        }
                        idx.iter().map(|&i| lo + i).collect()
                    }
                    (None, Some([r0, r1, c0, c1])) => {
                        let (rows, cols) = grid_dims(x)?;
                        if !(r0 < r1 && *r1 <= rows && c0 < c1 && *c1 <= cols) {
                            return Err(Error::Contract(format!(
                                "rect {:?} outside {rows}x{cols} grid",
                                [r0, r1, c0, c1]
                            )));
                        }
                        let mut v = Vec::with_capacity((r1 - r0) * (c1 - c0));
                        for r in *r0..*r1 {
                            for c in *c0..*c1 {
                                v.push(lo + r * cols + c);
                            }
                        }
                        v
                    }
                    _ => {
                        return Err(Error::Contract(
                            "patch_mean needs exactly one of indices or rect".into(),
                        ))
                    }
                };
                if picked.is_empty() {
                    return Err(Error::Contract("empty patch".into()));
                }
                let inv = 1.0 / picked.len() as f64;
                for i in picked {
                    w[i] = inv;
                }
            }
            QuantitySpec::WeightedGlobalMean { lat_weighted, channel } => {
                let (lo, hi) = channel_slice(x, *channel)?;
                if *lat_weighted {
                    let meta = x.grid_meta().ok_or_else(|| {
                        Error::Contract("lat-weighted mean requires grid metadata".into())
                    })?;
                    let mut total = 0.0;
                    for (r, lat) in meta.latitudes.iter().enumerate() {
                        let wt = lat.to_radians().cos();
                        for c in 0..meta.n_lon {
                            w[lo + r * meta.n_lon + c] = wt;
                        }
                        total += wt * meta.n_lon as f64;
                    }
                    if total <= 0.0 {
                        return Err(Error::Contract("latitude weights sum to zero".into()));
                    }
                    for v in &mut w[lo..hi] {
                        *v /= total;
                    }
                } else {
                    let inv = 1.0 / (hi - lo) as f64;
                    for v in &mut w[lo..hi] {
                        *v = inv;
                    }
                }
            }
        }
        Ok(w)
    }

    pub fn evaluate(&self, x: &StateVector) -> Result<f64> {
        let w = self.weights(x)?;
        Ok(w.iter().zip(x.data()).map(|(wi, xi)| wi * xi).sum())
    }

    /// Exact gradient; constant in `x` for these linear functionals.
    pub fn gradient(&self, x: &StateVector) -> Result<StateVector> {
        let w = self.weights(x)?;
        Ok(x.with_data_unchecked(w))
    }

    /// Short identifier for metadata sidecars.
    pub fn label(&self) -> String {
        match self {
            QuantitySpec::Component { index, .. } => format!("component[{index}]"),
            QuantitySpec::PatchMean { .. } => "patch_mean".into(),
            QuantitySpec::WeightedGlobalMean { lat_weighted: true, .. } => {
                "coslat_global_mean".into()
            }
            QuantitySpec::WeightedGlobalMean { lat_weighted: false, .. } => "global_mean".into(),
        }
    }
}

fn grid_dims(x: &StateVector) -> Result<(usize, usize)> {
    match x.shape() {
        [r, c] => Ok((*r, *c)),
        [_, r, c] => Ok((*r, *c)),
        other => Err(Error::Contract(format!("rect patch needs a 2-D grid, shape is {other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::gaussian_noise;
    use crate::state::GridMeta;

    #[test]
    fn whole_state_patch_mean_of_constant() {
        let x = StateVector::from_vec(vec![3.5; 16]).unwrap();
        let q = QuantitySpec::PatchMean { indices: Some((0..16).collect()), rect: None, channel: None };
        assert_eq!(q.evaluate(&x).unwrap(), 3.5);
    }

    #[test]
    fn component_on_one_hot_state() {
        let x = StateVector::from_vec(vec![0.0, 0.0, 7.25, 0.0]).unwrap();
        let q = QuantitySpec::Component { index: 2, channel: None };
        assert_eq!(q.evaluate(&x).unwrap(), 7.25);
        let g = q.gradient(&x).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn coslat_weighted_mean_hand_value() {
        // two rows at lat 0 and 60 degrees, one column, values 1 and 2:
        // (1*1 + 0.5*2) / (1 + 0.5) = 4/3
        let meta = GridMeta::new(2, 1, vec![0.0, 60.0]).unwrap();
        let x = StateVector::new(vec![1.0, 2.0], vec![2, 1]).unwrap().with_grid_meta(meta).unwrap();
        let q = QuantitySpec::WeightedGlobalMean { lat_weighted: true, channel: None };
        let got = q.evaluate(&x).unwrap();
        assert!((got - 4.0 / 3.0).abs() < 1e-12, "got {got}");
    }

    #[test]
    fn patch_mean_gradient_is_uniform_on_mask() {
        let x = StateVector::from_vec(vec![1.0; 10]).unwrap();
        let q = QuantitySpec::PatchMean { indices: Some(vec![1, 4, 7]), rect: None, channel: None };
        let g = q.gradient(&x).unwrap();
        for (i, v) in g.data().iter().enumerate() {
            let want = if [1, 4, 7].contains(&i) { 1.0 / 3.0 } else { 0.0 };
            assert_eq!(*v, want);
        }
    }

    #[test]
    fn gradient_pairing_is_exact_for_linear_functionals() {
        let x = gaussian_noise(&[4, 5], 3);
        let d = gaussian_noise(&[4, 5], 4);
        for q in [
            QuantitySpec::Component { index: 7, channel: None },
            QuantitySpec::PatchMean { indices: None, rect: Some([1, 3, 0, 4]), channel: None },
            QuantitySpec::WeightedGlobalMean { lat_weighted: false, channel: None },
        ] {
            let g = q.gradient(&x).unwrap();
            let lhs = g.dot(&d);
            let rhs = q.evaluate(&x.add_scaled(1.0, &d)).unwrap() - q.evaluate(&x).unwrap();
            assert!((lhs - rhs).abs() < 1e-14, "{q:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn evaluate_is_linear() {
        let x = gaussian_noise(&[12], 5);
        let y = gaussian_noise(&[12], 6);
        let q = QuantitySpec::WeightedGlobalMean { lat_weighted: false, channel: None };
        let lhs = q.evaluate(&x.scaled(2.5).add_scaled(-1.25, &y)).unwrap();
        let rhs = 2.5 * q.evaluate(&x).unwrap() - 1.25 * q.evaluate(&y).unwrap();
        assert!((lhs - rhs).abs() < 1e-14);
    }

    #[test]
    fn channel_selection_on_rank3_states() {
        let mut data = vec![0.0; 2 * 2 * 3];
        data[6..12].copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = StateVector::new(data, vec![2, 2, 3]).unwrap();
        let q = QuantitySpec::WeightedGlobalMean { lat_weighted: false, channel: Some(1) };
        assert_eq!(q.evaluate(&x).unwrap(), 3.5);
        let bad = QuantitySpec::Component { index: 0, channel: Some(2) };
        assert!(bad.evaluate(&x).is_err());
    }

    #[test]
    fn incompatible_specs_are_contract_errors() {
        let x = StateVector::from_vec(vec![1.0, 2.0]).unwrap();
        assert!(QuantitySpec::Component { index: 5, channel: None }.evaluate(&x).is_err());
        assert!(QuantitySpec::PatchMean { indices: None, rect: None, channel: None }
            .evaluate(&x)
            .is_err());
        assert!(QuantitySpec::WeightedGlobalMean { lat_weighted: true, channel: None }
            .evaluate(&x)
            .is_err());
    }

    #[test]
    fn spec_parses_from_json() {
        let q: QuantitySpec =
            serde_json::from_str(r#"{"kind":"patch_mean","rect":[0,2,1,3]}"#).unwrap();
        assert_eq!(
            q,
            QuantitySpec::PatchMean { indices: None, rect: Some([0, 2, 1, 3]), channel: None }
        );
        let q: QuantitySpec =
            serde_json::from_str(r#"{"kind":"weighted_global_mean","lat_weighted":true}"#).unwrap();
        assert_eq!(q, QuantitySpec::WeightedGlobalMean { lat_weighted: true, channel: None });
    }
}

//! Transformation divergence: the natural-log entropy of a matrix's
//! normalized singular-value spectrum, profiled layer by layer.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, SingularSpectrum, DEFAULT_TOL};
use crate::matrix::Matrix;
use crate::tensor_store::TensorStore;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TdError {
    #[error("singular spectrum is all zero")]
    AllZeroSpectrum,
    #[error("matrix is identically zero")]
    ZeroMatrix,
    #[error("pattern `{0}` matches no tensor")]
    PatternMatchesNothing(String),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: LinalgError,
    },
    #[error("no layers left after skipping the first {0}")]
    EmptyAfterSkip(usize),
    #[error("phase detection needs at least 3 layers, got {0}")]
    TooFewLayers(usize),
    #[error("cannot split {dim} {axis} into {heads} heads")]
    InvalidHeadCount {
        heads: usize,
        dim: usize,
        axis: &'static str,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Per-layer TD values for one tensor-name pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdProfile {
    pub layer_indices: Vec<usize>,
    pub td_values: Vec<f64>,
    pub matrix_name_pattern: String,
    pub model_label: String,
}

/// Boundaries of the three contiguous phases, as positions into the profile:
/// extract = `[0, extract_end)`, process = `[extract_end, process_end)`,
/// generate = `[process_end, len)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSegmentation {
    pub extract_end: usize,
    pub process_end: usize,
}

/// Which axis of a value projection enumerates heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HeadAxis {
    /// Output features are columns (`y = x · W`, this toolkit's layout).
    #[default]
    Columns,
    /// Output features are rows (`y = W · x`, common checkpoint layout).
    Rows,
}

pub fn transformation_divergence(spectrum: &SingularSpectrum) -> Result<f64, TdError> {
    let total: f64 = spectrum.values().iter().sum();
    if total == 0.0 {
        return Err(TdError::AllZeroSpectrum);
    }
    let p: Vec<f64> = spectrum.values().iter().map(|s| s / total).collect();
    Ok(-p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>())
}

/// TD of a matrix.
pub fn matrix_td(w: &Matrix) -> Result<f64, TdError> {
    let spectrum = linalg::singular_values(w, DEFAULT_TOL).map_err(|e| match e {
        LinalgError::ZeroMatrix => TdError::ZeroMatrix,
        other => TdError::Linalg(other),
    })?;
    transformation_divergence(&spectrum)
}

/// The rank-1 factors `u_i v_iᵀ`, ordered by descending singular value.
pub fn transformation_direction(w: &Matrix) -> Result<Vec<Matrix>, TdError> {
    if w.is_all_zero() {
        return Err(TdError::ZeroMatrix);
    }
    let svd = linalg::svd(w, DEFAULT_TOL)?;
    let (m, n) = w.shape();
    Ok((0..svd.sigma.len())
        .map(|k| {
            let u = svd.u.column(k);
            let v = svd.v.column(k);
            let mut d = Matrix::zeros(m, n);
            for i in 0..m {
                for j in 0..n {
                    d.set(i, j, u[i] * v[j]);
                }
            }
            d
        })
        .collect())
}

/// TD of every tensor matching `name_pattern` (one `{}` integer placeholder),
/// sorted by layer index.
pub fn td_profile(store: &TensorStore, name_pattern: &str) -> Result<TdProfile, TdError> {
    profile_with(store, name_pattern, |w| matrix_td(w))
}

/// Like [`td_profile`] but each layer's value is the mean TD over its heads.
pub fn td_profile_per_head(
    store: &TensorStore,
    name_pattern: &str,
    n_heads: usize,
    axis: HeadAxis,
) -> Result<TdProfile, TdError> {
    profile_with(store, name_pattern, |w| {
        let heads = split_heads(w, n_heads, axis)?;
        let tds = heads.iter().map(matrix_td).collect::<Result<Vec<_>, _>>()?;
        Ok(tds.iter().sum::<f64>() / tds.len() as f64)
    })
}

fn profile_with(
    store: &TensorStore,
    name_pattern: &str,
    td_of: impl Fn(&Matrix) -> Result<f64, TdError>,
) -> Result<TdProfile, TdError> {
    let names = store.indexed_names(name_pattern);
    if names.is_empty() {
        return Err(TdError::PatternMatchesNothing(name_pattern.to_string()));
    }
    let mut layer_indices = Vec::with_capacity(names.len());
    let mut td_values = Vec::with_capacity(names.len());
    for (layer, name) in names {
        let w = store.get_matrix(&name).expect("name came from the store");
        let td = td_of(w).map_err(|e| tag_layer(layer, e))?;
        layer_indices.push(layer);
        td_values.push(td);
    }
    Ok(TdProfile {
        layer_indices,
        td_values,
        matrix_name_pattern: name_pattern.to_string(),
        model_label: store
            .metadata()
            .get("model_label")
            .cloned()
            .unwrap_or_default(),
    })
}

fn tag_layer(layer: usize, e: TdError) -> TdError {
    let source = match e {
        TdError::Linalg(l) => l,
        TdError::ZeroMatrix | TdError::AllZeroSpectrum => LinalgError::ZeroMatrix,
        other => return other,
    };
    TdError::Layer { layer, source }
}

fn split_heads(w: &Matrix, n_heads: usize, axis: HeadAxis) -> Result<Vec<Matrix>, TdError> {
    let (dim, name) = match axis {
        HeadAxis::Columns => (w.cols(), "columns"),
        HeadAxis::Rows => (w.rows(), "rows"),
    };
    if n_heads == 0 || dim % n_heads != 0 {
        return Err(TdError::InvalidHeadCount {
            heads: n_heads,
            dim,
            axis: name,
        });
    }
    let width = dim / n_heads;
    Ok((0..n_heads)
        .map(|h| match axis {
            HeadAxis::Columns => w.column_block(h * width, (h + 1) * width),
            HeadAxis::Rows => w.row_block(h * width, (h + 1) * width),
        })
        .collect())
}

/// Layer index with the smallest TD among positions `>= skip_first`; ties go
/// to the later layer.
pub fn min_td_layer(profile: &TdProfile, skip_first: usize) -> Result<usize, TdError> {
    let mut best: Option<(usize, f64)> = None;
    for (&layer, &td) in profile
        .layer_indices
        .iter()
        .zip(&profile.td_values)
        .skip(skip_first)
    {
        if best.is_none_or(|(_, b)| td <= b) {
            best = Some((layer, td));
        }
    }
    best.map(|(l, _)| l).ok_or(TdError::EmptyAfterSkip(skip_first))
}

/// Best piecewise-constant three-segment fit, by exhaustive search over all
/// boundary pairs. Segments are non-empty; among equal-cost partitions the
/// first in lexicographic order wins.
pub fn detect_phases(profile: &TdProfile) -> Result<PhaseSegmentation, TdError> {
    segment_three(&profile.td_values)
}

pub(crate) fn segment_three(values: &[f64]) -> Result<PhaseSegmentation, TdError> {
    let n = values.len();
    if n < 3 {
        return Err(TdError::TooFewLayers(n));
    }
    // Costs closer than this count as ties, so rounding in the segment means
    // never decides between equally good partitions.
    let scale = values.iter().map(|v| v * v).sum::<f64>();
    let eps = 1e-12 * scale.max(f64::MIN_POSITIVE);

    let mut best = PhaseSegmentation {
        extract_end: 1,
        process_end: 2,
    };
    let mut best_cost = f64::INFINITY;
    for a in 1..n - 1 {
        let first = sse(&values[..a]);
        for b in a + 1..n {
            let cost = first + sse(&values[a..b]) + sse(&values[b..]);
            if cost < best_cost - eps {
                best_cost = cost;
                best = PhaseSegmentation {
                    extract_end: a,
                    process_end: b,
                };
            }
        }
    }
    Ok(best)
}

fn sse(seg: &[f64]) -> f64 {
    let mean = seg.iter().sum::<f64>() / seg.len() as f64;
    seg.iter().map(|v| (v - mean) * (v - mean)).sum()
}

/// Serializable analysis report for one profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdReport {
    pub model_label: String,
    pub pattern: String,
    pub layers: Vec<LayerTd>,
    pub phases: Option<PhaseSegmentation>,
    pub min_td_layer: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTd {
    pub index: usize,
    pub td: f64,
}

impl TdProfile {
    pub fn len(&self) -> usize {
        self.td_values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.td_values.is_empty()
    }

    /// `layer,td` CSV with a header row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,td\n");
        for (l, td) in self.layer_indices.iter().zip(&self.td_values) {
            out.push_str(&format!("{l},{td}\n"));
        }
        out
    }

    /// Report with phases and the minimum-TD layer (skipping `skip_first`).
    /// Either is `None` when the profile is too short for it.
    pub fn report(&self, skip_first: usize) -> TdReport {
        TdReport {
            model_label: self.model_label.clone(),
            pattern: self.matrix_name_pattern.clone(),
            layers: self
                .layer_indices
                .iter()
                .zip(&self.td_values)
                .map(|(&index, &td)| LayerTd { index, td })
                .collect(),
            phases: detect_phases(self).ok(),
            min_td_layer: min_td_layer(self, skip_first).ok(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectrum(v: &[f64]) -> SingularSpectrum {
        SingularSpectrum::new(v.to_vec()).unwrap()
    }

    fn profile(values: &[f64]) -> TdProfile {
        TdProfile {
            layer_indices: (0..values.len()).collect(),
            td_values: values.to_vec(),
            matrix_name_pattern: "layer.{}.w_v".into(),
            model_label: "test".into(),
        }
    }

    #[test]
    fn closed_forms() {
        let td = transformation_divergence(&spectrum(&[5.0, 4.0, 3.0])).unwrap();
        assert!((td - 1.08).abs() < 0.005, "{td}");
        assert_eq!(transformation_divergence(&spectrum(&[1.0, 0.0, 0.0])).unwrap(), 0.0);
        let td = transformation_divergence(&spectrum(&[2.0; 4])).unwrap();
        assert!((td - 4f64.ln()).abs() < 1e-15);
        assert_eq!(
            transformation_divergence(&spectrum(&[0.0, 0.0])),
            Err(TdError::AllZeroSpectrum)
        );
    }

    #[test]
    fn directions_of_identity_and_diag() {
        let dirs = transformation_direction(&Matrix::identity(2)).unwrap();
        assert_eq!(dirs.len(), 2);
        let mut sum = dirs[0].clone();
        sum.add_assign(&dirs[1]);
        assert!(sum.sub(&Matrix::identity(2)).frobenius_norm() < 1e-14);

        let dirs = transformation_direction(&Matrix::diag(2, 2, &[3.0, 0.0])).unwrap();
        assert_eq!(dirs[0].get(0, 0), 1.0);
        assert_eq!(dirs[0].get(1, 1), 0.0);
        assert_eq!(
            transformation_direction(&Matrix::zeros(2, 2)),
            Err(TdError::ZeroMatrix)
        );
    }

    #[test]
    fn constructed_three_layer_profile() {
        let mut store = TensorStore::new();
        store.insert("layer.0.w_v", Matrix::diag(4, 4, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        store.insert("layer.1.w_v", Matrix::identity(4)).unwrap();
        store.insert("layer.2.w_v", Matrix::diag(4, 4, &[1.0, 0.0, 0.0, 0.0])).unwrap();
        let p = td_profile(&store, "layer.{}.w_v").unwrap();
        assert_eq!(p.layer_indices, vec![0, 1, 2]);
        assert_eq!(p.td_values[0], 0.0);
        assert!((p.td_values[1] - 4f64.ln()).abs() < 1e-15);
        assert_eq!(p.td_values[2], 0.0);
        assert_eq!(
            td_profile(&store, "layer.{}.w_q"),
            Err(TdError::PatternMatchesNothing("layer.{}.w_q".into()))
        );
    }

    #[test]
    fn zero_layer_is_tagged() {
        let mut store = TensorStore::new();
        store.insert("l.0.w", Matrix::identity(2)).unwrap();
        store.insert("l.1.w", Matrix::zeros(2, 2)).unwrap();
        assert!(matches!(
            td_profile(&store, "l.{}.w"),
            Err(TdError::Layer { layer: 1, .. })
        ));
    }

    #[test]
    fn per_head_mean() {
        let mut store = TensorStore::new();
        // Head 0 columns carry a rank-1 block, head 1 an identity block.
        let mut w = Matrix::zeros(4, 4);
        w.set(0, 0, 1.0);
        w.set(2, 2, 1.0);
        w.set(3, 3, 1.0);
        store.insert("l.0.w", w).unwrap();
        let p = td_profile_per_head(&store, "l.{}.w", 2, HeadAxis::Columns).unwrap();
        assert!((p.td_values[0] - 0.5 * 2f64.ln()).abs() < 1e-14);
        assert!(matches!(
            td_profile_per_head(&store, "l.{}.w", 3, HeadAxis::Rows),
            Err(TdError::InvalidHeadCount { .. })
        ));
    }

    #[test]
    fn min_layer_rules() {
        assert_eq!(min_td_layer(&profile(&[0.2, 1.5, 0.1, 0.9]), 1), Ok(2));
        assert_eq!(min_td_layer(&profile(&[1.0; 5]), 1), Ok(4));
        assert_eq!(min_td_layer(&profile(&[0.1, 2.0]), 0), Ok(0));
        assert_eq!(
            min_td_layer(&profile(&[1.0, 2.0]), 2),
            Err(TdError::EmptyAfterSkip(2))
        );
        // Low-high-low shape: the global minimum after the first layer sits in
        // the closing descent.
        let lhl = [0.4, 2.5, 2.8, 2.6, 2.0, 1.4, 0.9, 0.6];
        let m = min_td_layer(&profile(&lhl), 1).unwrap();
        assert!(m >= 4 && m == 7);
    }

    #[test]
    fn phases_exact_blocks_and_constant() {
        let p = detect_phases(&profile(&[2.0, 2.0, 0.5, 0.5, 1.8, 1.8])).unwrap();
        assert_eq!((p.extract_end, p.process_end), (2, 4));
        let p = detect_phases(&profile(&[0.1; 7])).unwrap();
        assert_eq!((p.extract_end, p.process_end), (1, 2));
        assert_eq!(
            detect_phases(&profile(&[1.0, 2.0])),
            Err(TdError::TooFewLayers(2))
        );
    }

    #[test]
    fn phases_recover_every_block_arrangement() {
        // Exhaustive over all boundary pairs for small profiles, with three
        // distinct block levels in every order.
        let levels = [[3.0, 1.0, 2.0], [1.0, 3.0, 2.0], [2.0, 1.0, 3.0], [0.5, 2.5, 0.7]];
        for n in 3..=12 {
            for a in 1..n - 1 {
                for b in a + 1..n {
                    for lv in &levels {
                        let v: Vec<f64> = (0..n)
                            .map(|i| if i < a { lv[0] } else if i < b { lv[1] } else { lv[2] })
                            .collect();
                        let p = detect_phases(&profile(&v)).unwrap();
                        assert_eq!((p.extract_end, p.process_end), (a, b), "{v:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn report_and_csv() {
        let p = profile(&[2.0, 2.0, 0.5, 0.5, 1.8, 1.8]);
        assert_eq!(p.to_csv().lines().count(), 7);
        let r = p.report(1);
        assert_eq!(r.min_td_layer, Some(3));
        assert_eq!(r.phases, Some(PhaseSegmentation { extract_end: 2, process_end: 4 }));
        let short = profile(&[1.0]);
        let r = short.report(1);
        assert_eq!(r.phases, None);
        assert_eq!(r.min_td_layer, None);
    }
}

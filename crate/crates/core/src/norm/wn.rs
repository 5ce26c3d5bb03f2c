use crate::error::{Error, Result};
use crate::tensor::FilterBank;

/// Rescales every filter to Euclidean length `gamma`: `gamma * w_i / |w_i|`.
pub fn wn_normalize(w: &FilterBank, gamma: f64) -> Result<FilterBank> {
    let len = w.filter_len();
    let mut data = Vec::with_capacity(w.data().len());
    for oc in 0..w.out_channels() {
        let f = w.filter(oc);
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::Numeric(format!("filter {oc} has norm {norm}")));
        }
        data.extend(f.iter().map(|v| gamma * v / norm));
    }
    debug_assert_eq!(data.len(), len * w.out_channels());
    FilterBank::new(w.shape(), data)
}

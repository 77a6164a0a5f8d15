use serde::{Deserialize, Serialize};

use crate::model::NamedTensors;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// `Σ N_k·w_k / Σ N_k`.
    #[default]
    Weighted,
    /// `(1/K)·Σ w_k`.
    Uniform,
}

/// Averages client uploads `(params, N_k)` in upload order.
pub fn aggregate(uploads: &[(NamedTensors, usize)], mode: Aggregation) -> Result<NamedTensors> {
    let (first, _) = uploads
        .first()
        .ok_or_else(|| Error::Federation("nothing to aggregate".into()))?;
    if let Some(k) = uploads.iter().position(|(p, _)| !p.same_geometry(first)) {
        return Err(Error::Federation(format!("upload {k} does not match the first upload's shapes")));
    }
    let coeffs: Vec<f64> = match mode {
        Aggregation::Weighted => {
            let total: usize = uploads.iter().map(|(_, n)| n).sum();
            if total == 0 {
                return Err(Error::Federation("client sample counts sum to zero".into()));
            }
            uploads.iter().map(|(_, n)| *n as f64 / total as f64).collect()
        }
        Aggregation::Uniform => vec![1.0 / uploads.len() as f64; uploads.len()],
    };
    let mut out = first.clone();
    for (name, acc) in out.iter_mut() {
        for (i, v) in acc.data_mut().iter_mut().enumerate() {
            let mut sum = coeffs[0] * *v;
            for ((p, _), c) in uploads.iter().zip(&coeffs).skip(1) {
                sum += c * p.get(name).expect("same geometry").data()[i];
            }
            *v = sum;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;

    fn scalar(v: f64) -> NamedTensors {
        let mut p = NamedTensors::new();
        p.insert("shared.w", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn hand_example() {
        let ups = vec![(scalar(0.0), 1), (scalar(4.0), 3)];
        let w = aggregate(&ups, Aggregation::Weighted).unwrap();
        let u = aggregate(&ups, Aggregation::Uniform).unwrap();
        assert_eq!(w.get("shared.w").unwrap().data(), &[3.0]);
        assert_eq!(u.get("shared.w").unwrap().data(), &[2.0]);
    }

    #[test]
    fn single_upload_is_exact() {
        let ups = vec![(scalar(0.1 + 0.2), 7)];
        for mode in [Aggregation::Weighted, Aggregation::Uniform] {
            assert!(aggregate(&ups, mode).unwrap().bit_eq(&ups[0].0));
        }
    }

    #[test]
    fn errors() {
        assert!(aggregate(&[], Aggregation::Uniform).is_err());
        assert!(aggregate(&[(scalar(1.0), 0)], Aggregation::Weighted).is_err());
        let mut other = NamedTensors::new();
        other.insert("shared.w", Tensor::vector(vec![1.0, 2.0]));
        assert!(aggregate(&[(scalar(1.0), 1), (other, 1)], Aggregation::Uniform).is_err());
    }
}

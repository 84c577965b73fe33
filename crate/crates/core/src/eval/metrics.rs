use ndarray::Array2;

use crate::error::Result;
use crate::model::{check_shape, Hyperparams};

/// Mean absolute deviation over every cell, observed or not.
pub fn absolute_error(recovered: &Array2<f64>, truth: &Array2<f64>) -> Result<f64> {
    check_shape("recovered vs truth", truth.dim(), recovered.dim())?;
    let total: f64 = recovered
        .iter()
        .zip(truth.iter())
        .map(|(r, t)| (r - t).abs())
        .sum();
    Ok(total / truth.len() as f64)
}

/// Mean absolute deviation restricted to cells where `observed_mask` is 0.
/// `None` if every cell was observed.
pub fn missing_only_error(
    recovered: &Array2<f64>,
    truth: &Array2<f64>,
    observed_mask: &Array2<f64>,
) -> Result<Option<f64>> {
    check_shape("recovered vs truth", truth.dim(), recovered.dim())?;
    check_shape("mask vs truth", truth.dim(), observed_mask.dim())?;
    let (sum, n) = recovered
        .iter()
        .zip(truth.iter())
        .zip(observed_mask.iter())
        .filter(|(_, &m)| m == 0.0)
        .fold((0.0, 0usize), |(s, n), ((r, t), _)| (s + (r - t).abs(), n + 1));
    Ok((n > 0).then(|| sum / n as f64))
}

/// Worst-case reals sent by chain hops: `(|S| l + l w) * t_max * N`.
/// The `N` initialization sends are not included.
pub fn comm_bound(params: &Hyperparams, num_subareas: usize) -> u64 {
    per_message_scalars(params, num_subareas) * params.max_iters as u64 * params.batch_size as u64
}

/// Reals in one factor-pair message: `|S| l + l w`.
pub fn per_message_scalars(params: &Hyperparams, num_subareas: usize) -> u64 {
    let l = params.latent as u64;
    num_subareas as u64 * l + l * params.window as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identical_is_zero() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(absolute_error(&m, &m).unwrap(), 0.0);
    }

    #[test]
    fn hand_example() {
        let r = array![[1.0, 2.0], [3.0, 4.0]];
        let t = array![[2.0, 2.0], [3.0, 2.0]];
        assert_eq!(absolute_error(&r, &t).unwrap(), 0.75);
    }

    #[test]
    fn shape_mismatch() {
        assert!(absolute_error(&array![[1.0]], &array![[1.0, 2.0]]).is_err());
    }

    #[test]
    fn missing_only() {
        let r = array![[1.0, 2.0], [3.0, 4.0]];
        let t = array![[2.0, 2.0], [3.0, 2.0]];
        let m = array![[1.0, 1.0], [1.0, 0.0]];
        assert_eq!(missing_only_error(&r, &t, &m).unwrap(), Some(2.0));
        assert_eq!(missing_only_error(&r, &t, &Array2::ones((2, 2))).unwrap(), None);
    }

    #[test]
    fn bound_closed_form() {
        let p = Hyperparams {
            latent: 4,
            window: 20,
            max_iters: 100,
            batch_size: 10,
            ..Hyperparams::default()
        };
        assert_eq!(comm_bound(&p, 57), 308_000);
        let doubled = Hyperparams { batch_size: 20, ..p.clone() };
        assert_eq!(comm_bound(&doubled, 57), 2 * comm_bound(&p, 57));
        let none = Hyperparams { batch_size: 0, ..p };
        assert_eq!(comm_bound(&none, 57), 0);
    }
}

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Sample mean and (n−1) standard deviation; std is 0 for fewer than two values.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Half-width of the two-sided 95% Student-t interval on the mean, or
/// `None` with fewer than two samples.
pub fn ci95_half_width(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let (_, s) = mean_std(xs);
    let dof = (xs.len() - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, dof).ok()?.inverse_cdf(0.975);
    Some(t * s / (xs.len() as f64).sqrt())
}

/// Decorrelated seed for stream `tag`, element `index`.
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
        .wrapping_add(index.wrapping_mul(0xd1b5_4a32_d192_ed03));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn known_interval() {
        let xs = [1.0, 2.0, 3.0, 4.0, 5.0];
        let (m, s) = mean_std(&xs);
        assert_eq!(m, 3.0);
        assert!((s - 2.5f64.sqrt()).abs() < 1e-12);
        // t(0.975, 4) = 2.776445
        let h = ci95_half_width(&xs).unwrap();
        assert!((h - 2.776445 * 2.5f64.sqrt() / 5f64.sqrt()).abs() < 1e-5);
        assert_eq!(ci95_half_width(&[1.0]), None);
    }

    #[test]
    fn seed_streams_differ() {
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 2, 0));
        assert_ne!(derive_seed(0, 1, 0), derive_seed(0, 1, 1));
        assert_eq!(derive_seed(5, 1, 3), derive_seed(5, 1, 3));
    }
}

use crate::error::{Error, Result};

fn check_pair(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::Data(format!("length mismatch: {} vs {}", x.len(), y.len())));
    }
    if x.len() < 3 {
        return Err(Error::Data(format!("need at least 3 points, got {}", x.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in correlation input".into()));
    }
    Ok(())
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson product-moment correlation. Errors on zero variance.
pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Degenerate("constant vector has no correlation".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Spearman rank-order correlation: Pearson over average ranks.
pub fn srocc(x: &[f64], y: &[f64]) -> Result<f64> {
    check_pair(x, y)?;
    pcc(&average_ranks(x), &average_ranks(y))
}

/// Median; the mean of the middle pair for even lengths.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn worked_examples() {
        assert_eq!(srocc(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]).unwrap(), 0.8);
        assert_eq!(srocc(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap(), 1.0);
        assert_eq!(srocc(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap(), -1.0);
        assert!((pcc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.981980506).abs() < 1e-8);
        let x = [0.3, 1.7, -2.0, 5.5];
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v + 1.0).collect();
        assert!((pcc(&x, &y).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn ranks_with_ties() {
        assert_eq!(average_ranks(&[10.0, 20.0, 10.0, 30.0]), vec![1.5, 3.0, 1.5, 4.0]);
        assert_eq!(average_ranks(&[5.0, 5.0, 5.0]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn errors() {
        assert!(srocc(&[1.0, 2.0], &[1.0, 2.0]).is_err());
        assert!(srocc(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
        assert!(matches!(srocc(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(Error::Degenerate(_))));
        assert!(pcc(&[1.0, f64::NAN, 3.0], &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn medians() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), Some(2.0));
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), Some(2.5));
        assert_eq!(median(&[7.0]), Some(7.0));
        assert_eq!(median(&[]), None);
    }

    proptest! {
        #[test]
        fn srocc_invariant_under_increasing_maps(v in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 3..40)) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(base) = srocc(&x, &y) {
                let fx: Vec<f64> = x.iter().map(|a| a.powi(3) + 2.0 * a).collect();
                let gy: Vec<f64> = y.iter().map(|b| b.exp().ln_1p()).collect();
                prop_assert!((srocc(&fx, &gy).unwrap() - base).abs() < 1e-12);
            }
        }

        #[test]
        fn symmetric(v in prop::collection::vec((0i32..6, -10.0f64..10.0), 3..30)) {
            let x: Vec<f64> = v.iter().map(|p| p.0 as f64).collect();
            let y: Vec<f64> = v.iter().map(|p| p.1).collect();
            match (srocc(&x, &y), srocc(&y, &x)) {
                (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
                (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
            }
            if let (Ok(a), Ok(b)) = (pcc(&x, &y), pcc(&y, &x)) {
                prop_assert!((a - b).abs() < 1e-15);
            }
        }

        #[test]
        fn bounded(v in prop::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 3..30)) {
            let (x, y): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            if let Ok(r) = pcc(&x, &y) {
                prop_assert!((-1.0..=1.0).contains(&r));
            }
        }
    }
}

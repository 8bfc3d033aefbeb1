use crate::{Error, Result};

/// Mid-rank percentile of `value` within `population`:
/// `100 · (#below + ½·#equal) / n`.
pub fn percentile_rank(value: f64, population: &[f64]) -> Result<f64> {
    if population.is_empty() {
        return Err(Error::Empty("percentile_rank population"));
    }
    let (below, equal) = population.iter().fold((0usize, 0usize), |(b, e), &p| {
        if p < value {
            (b + 1, e)
        } else if p == value {
            (b, e + 1)
        } else {
            (b, e)
        }
    });
    Ok(100.0 * (below as f64 + 0.5 * equal as f64) / population.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    #[test]
    fn minimum_of_distinct_hundred() {
        let pop: Vec<f64> = (0..100).map(|i| i as f64 * 0.3).collect();
        assert_eq!(percentile_rank(0.0, &pop).unwrap(), 0.5);
    }

    #[test]
    fn constant_population_is_fifty() {
        assert_eq!(percentile_rank(2.0, &[2.0; 7]).unwrap(), 50.0);
    }

    #[test]
    fn seven_in_one_to_ten() {
        let pop: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(percentile_rank(7.0, &pop).unwrap(), 65.0);
    }

    #[test]
    fn outside_values() {
        let pop = [1.0, 2.0];
        assert_eq!(percentile_rank(0.0, &pop).unwrap(), 0.0);
        assert_eq!(percentile_rank(3.0, &pop).unwrap(), 100.0);
        assert!(percentile_rank(1.0, &[]).is_err());
    }
}

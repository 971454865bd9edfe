//! Largest-remainder apportionment of an integer total over real fractions.

/// Remainders closer than this are treated as tied and resolved by slot order.
const TIE_RESOLUTION: f64 = 1e-9;

/// Splits `total` into integer counts proportional to `fractions`.
///
/// Each slot first receives `floor(total * f)`; the leftover units go to the
/// slots with the largest fractional remainders, earliest slot first on ties.
/// The result always sums to `total` when `fractions` sums to 1 within
/// floating-point error.
pub fn largest_remainder(total: usize, fractions: &[f64]) -> Vec<usize> {
    if fractions.is_empty() {
        return Vec::new();
    }
    let quotas: Vec<f64> = fractions.iter().map(|f| f.max(0.0) * total as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    if assigned >= total {
        return counts;
    }
    let mut order: Vec<(i64, usize)> = quotas
        .iter()
        .enumerate()
        .map(|(i, q)| (((q - q.floor()) / TIE_RESOLUTION).round() as i64, i))
        .collect();
    // descending remainder, ascending slot
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut leftover = total - assigned;
    for &(_, slot) in order.iter().cycle() {
        if leftover == 0 {
            break;
        }
        counts[slot] += 1;
        leftover -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn thirds_give_the_extra_unit_to_the_first_slot() {
        let third = 1.0 / 3.0;
        assert_eq!(largest_remainder(10, &[third, third, third]), vec![4, 3, 3]);
    }

    #[test]
    fn halves_split_evenly() {
        assert_eq!(largest_remainder(12, &[0.5, 0.5]), vec![6, 6]);
        assert_eq!(largest_remainder(100, &[0.5, 0.5]), vec![50, 50]);
    }

    #[test]
    fn largest_remainder_wins() {
        // quotas 1.2, 2.7, 6.1 -> floors 1, 2, 6 -> leftover 1 to slot 1
        assert_eq!(largest_remainder(10, &[0.12, 0.27, 0.61]), vec![1, 3, 6]);
    }

    proptest! {
        #[test]
        fn sums_to_total_and_stays_within_one(total in 0usize..5000, raw in prop::collection::vec(0.0f64..1.0, 1..9)) {
            let sum: f64 = raw.iter().sum();
            prop_assume!(sum > 1e-6);
            let fractions: Vec<f64> = raw.iter().map(|r| r / sum).collect();
            let counts = largest_remainder(total, &fractions);
            prop_assert_eq!(counts.iter().sum::<usize>(), total);
            for (c, f) in counts.iter().zip(&fractions) {
                prop_assert!((*c as f64 - f * total as f64).abs() < 1.0 + 1e-9);
            }
        }
    }
}

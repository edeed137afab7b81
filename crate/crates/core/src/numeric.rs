//! Small summation helpers.

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            c += (sum - t) + v;
        } else {
            c += (v - t) + sum;
        }
        sum = t;
    }
    sum + c
}

/// Pairwise reduction over a slice with a fixed split pattern, so the result
/// depends only on the order of `items`.
pub fn pairwise_reduce<T: Clone>(items: &[T], add: &impl Fn(&T, &T) -> T) -> Option<T> {
    match items.len() {
        0 => None,
        1 => Some(items[0].clone()),
        n => {
            let (a, b) = items.split_at(n / 2);
            let left = pairwise_reduce(a, add)?;
            let right = pairwise_reduce(b, add)?;
            Some(add(&left, &right))
        }
    }
}

//! Error-free transformations used where a result must round exactly once.

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

impl DoubleDouble {
    pub const ZERO: DoubleDouble = DoubleDouble { hi: 0.0, lo: 0.0 };
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn fast_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// `acc + a·b` carried in double-double.
#[inline]
pub fn dd_add_prod(acc: DoubleDouble, a: f64, b: f64) -> DoubleDouble {
    let (p, pe) = two_prod(a, b);
    let (s, se) = two_sum(acc.hi, p);
    let (hi, lo) = fast_two_sum(s, se + acc.lo + pe);
    DoubleDouble { hi, lo }
}

/// `num / den` rounded to the nearest `f64`.
pub fn dd_div(num: DoubleDouble, den: DoubleDouble) -> f64 {
    let q1 = num.hi / den.hi;
    // num - q1·den, exactly enough for the correction term
    let (p, pe) = two_prod(q1, den.hi);
    let (r, re) = two_sum(num.hi, -p);
    let rem = r + (re - pe + num.lo - q1 * den.lo);
    q1 + rem / den.hi
}

//! Shared numeric utilities: log-space arithmetic, error propagation for
//! Monte Carlo estimators, a small symmetric eigensolver, and an adaptive
//! iterated-logarithm representation for quantities far beyond f64 range.

use statrs::function::gamma::ln_gamma;

/// log(sum exp(x_i)), stable under large offsets. Empty input gives -inf.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample mean and its standard error.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = mean(xs);
    if xs.len() < 2 {
        return (m, 0.0);
    }
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

pub fn column_means(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows[0].len();
    let mut out = vec![0.0; d];
    for row in rows {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    for o in &mut out {
        *o /= rows.len() as f64;
    }
    out
}

/// Standard error of grad . mean(rows) by the delta method: sqrt of
/// grad^T Cov(rows) grad / G with the unbiased sample covariance.
pub fn delta_method_se(rows: &[Vec<f64>], means: &[f64], grad: &[f64]) -> f64 {
    let g = rows.len();
    if g < 2 {
        return 0.0;
    }
    let mut quad = 0.0;
    for row in rows {
        let centered: f64 = row
            .iter()
            .zip(means)
            .zip(grad)
            .map(|((x, m), w)| (x - m) * w)
            .sum();
        quad += centered * centered;
    }
    (quad / ((g - 1) as f64) / g as f64).sqrt()
}

/// ln of the Binomial(n, p) probability of k.
pub fn ln_binomial_pmf(n: u64, k: u64, p: f64) -> f64 {
    assert!(k <= n);
    if p <= 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if p >= 1.0 {
        return if k == n { 0.0 } else { f64::NEG_INFINITY };
    }
    let ln_choose =
        ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0);
    ln_choose + k as f64 * p.ln() + (n - k) as f64 * (1.0 - p).ln()
}

/// In-place unnormalized Walsh-Hadamard transform; length must be a power of
/// two. Self-inverse up to a factor of the length.
pub fn walsh_hadamard(v: &mut [f64]) {
    let n = v.len();
    assert!(n.is_power_of_two());
    let mut h = 1;
    while h < n {
        for chunk in v.chunks_exact_mut(2 * h) {
            let (a, b) = chunk.split_at_mut(h);
            for (x, y) in a.iter_mut().zip(b) {
                let (s, d) = (*x + *y, *x - *y);
                *x = s;
                *y = d;
            }
        }
        h *= 2;
    }
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
/// `a` is row-major n x n; only suitable for small n.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut m = a.to_vec();
    let idx = |i: usize, j: usize| i * n + j;
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[idx(i, j)] * m[idx(i, j)];
            }
        }
        if off.sqrt() < 1e-14 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[idx(p, q)];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let app = m[idx(p, p)];
                let aqq = m[idx(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = m[idx(k, p)];
                    let akq = m[idx(k, q)];
                    m[idx(k, p)] = c * akp - s * akq;
                    m[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = m[idx(p, k)];
                    let aqk = m[idx(q, k)];
                    m[idx(p, k)] = c * apk - s * aqk;
                    m[idx(q, k)] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..n).map(|i| m[idx(i, i)]).collect()
}

/// A nonnegative real x stored as `value` with `depth` iterated logarithms
/// removed: x = exp applied `depth` times to `value`. The canonical form
/// takes logs until `value` drops to EXP_MAX or below, so every number above
/// EXP_MAX lives at depth >= 1 and comparing (depth, value) lexicographically
/// orders the represented numbers. Arithmetic falls back to plain f64 or
/// single-log computation whenever ln(x) is finite, and absorbs terms below
/// f64 resolution beyond that, which is exact to the precision the
/// representation itself carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Magnitude {
    depth: u32,
    value: f64,
}

/// exp(x) overflows f64 just above this.
const EXP_MAX: f64 = 709.0;

impl Magnitude {
    pub fn from_f64(x: f64) -> Self {
        assert!(x >= 0.0 && !x.is_nan() && x.is_finite());
        Magnitude { depth: 0, value: x }.canonical()
    }

    /// x = e^l for possibly huge l.
    pub fn from_ln(l: f64) -> Self {
        assert!(!l.is_nan() && l < f64::INFINITY);
        Magnitude { depth: 1, value: l }.canonical()
    }

    fn canonical(mut self) -> Self {
        // Drop depth while exp stays in f64 range, then squeeze the value
        // below EXP_MAX; one pass of each suffices and is idempotent.
        while self.depth > 0 && self.value <= EXP_MAX {
            self.value = self.value.exp();
            self.depth -= 1;
        }
        while self.value > EXP_MAX {
            self.value = self.value.ln();
            self.depth += 1;
        }
        self
    }

    pub fn depth(&self) -> u32 {
        self.depth
    }

    pub fn value(&self) -> f64 {
        self.value
    }

    /// The number itself when it fits in f64, else +inf.
    pub fn linear(&self) -> f64 {
        let mut v = self.value;
        for _ in 0..self.depth {
            v = v.exp();
            if v.is_infinite() {
                return f64::INFINITY;
            }
        }
        v
    }

    /// ln(x) when that fits in f64, else +inf. Zero gives -inf.
    pub fn ln_f64(&self) -> f64 {
        if self.depth == 0 {
            return self.value.ln();
        }
        let mut v = self.value;
        for _ in 0..self.depth - 1 {
            v = v.exp();
            if v.is_infinite() {
                return f64::INFINITY;
            }
        }
        v
    }

    /// ln(x) as a Magnitude; x must exceed 1.
    pub fn ln_mag(&self) -> Magnitude {
        match self.depth {
            0 => {
                assert!(self.value > 1.0, "ln of a value <= 1 leaves the domain");
                Magnitude::from_f64(self.value.ln())
            }
            d => Magnitude {
                depth: d - 1,
                value: self.value,
            }
            .canonical(),
        }
    }

    pub fn exp_mag(&self) -> Magnitude {
        Magnitude {
            depth: self.depth + 1,
            value: self.value,
        }
        .canonical()
    }

    /// x * c for a positive finite constant c.
    pub fn scale(&self, c: f64) -> Magnitude {
        assert!(c > 0.0 && c.is_finite());
        if self.depth == 0 {
            let direct = self.value * c;
            if direct.is_finite() {
                return Magnitude::from_f64(direct);
            }
            return Magnitude::from_ln(self.value.ln() + c.ln());
        }
        let l = self.ln_f64();
        if l.is_finite() {
            return Magnitude::from_ln(l + c.ln());
        }
        // ln x exceeds f64 range; shifting it by ln c is below resolution.
        *self
    }

    /// x^p for p > 0.
    pub fn powf(&self, p: f64) -> Magnitude {
        assert!(p > 0.0 && p.is_finite());
        if self.depth == 0 {
            let direct = self.value.powf(p);
            if direct.is_finite() {
                return Magnitude::from_f64(direct);
            }
            return Magnitude::from_ln(p * self.value.ln());
        }
        let l = self.ln_f64();
        if l.is_finite() && (p * l).is_finite() {
            return Magnitude::from_ln(p * l);
        }
        self.ln_mag().scale(p).exp_mag()
    }

    pub fn mul(&self, other: &Magnitude) -> Magnitude {
        if (self.depth == 0 && self.value == 0.0) || (other.depth == 0 && other.value == 0.0) {
            return Magnitude::from_f64(0.0);
        }
        if self.depth == 0 && other.depth == 0 {
            let direct = self.value * other.value;
            if direct.is_finite() {
                return Magnitude::from_f64(direct);
            }
        }
        // A small flat factor folds into the deep one as a scale.
        if self.depth == 0 {
            return other.scale(self.value);
        }
        if other.depth == 0 {
            return self.scale(other.value);
        }
        let (la, lb) = (self.ln_f64(), other.ln_f64());
        if la.is_finite() && lb.is_finite() {
            return Magnitude::from_ln(la + lb);
        }
        self.ln_mag().add(&other.ln_mag()).exp_mag()
    }

    pub fn add(&self, other: &Magnitude) -> Magnitude {
        let (big, small) = if self.cmp_mag(other) == std::cmp::Ordering::Less {
            (other, self)
        } else {
            (self, other)
        };
        if big.depth == 0 {
            // small is depth 0 too, by the ordering.
            let direct = big.value + small.value;
            if direct.is_finite() {
                return Magnitude::from_f64(direct);
            }
        }
        let (lb, ls) = (big.ln_f64(), small.ln_f64());
        if lb.is_finite() {
            if ls == f64::NEG_INFINITY {
                return *big;
            }
            return Magnitude::from_ln(lb + (ls - lb).exp().ln_1p());
        }
        // The bigger term's ln exceeds f64 range; the smaller contributes
        // below the resolution the representation carries.
        *big
    }

    pub fn cmp_mag(&self, other: &Magnitude) -> std::cmp::Ordering {
        self.depth
            .cmp(&other.depth)
            .then(self.value.partial_cmp(&other.value).expect("not NaN"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn logsumexp_matches_direct_sum() {
        let xs = [0.0f64, 1.0, -2.0];
        let direct: f64 = xs.iter().map(|x| x.exp()).sum();
        assert_relative_eq!(logsumexp(&xs), direct.ln(), max_relative = 1e-14);
        // Stable at offsets that would overflow exp.
        let shifted: Vec<f64> = xs.iter().map(|x| x + 1000.0).collect();
        assert_relative_eq!(logsumexp(&shifted), direct.ln() + 1000.0, max_relative = 1e-14);
    }

    #[test]
    fn walsh_transform_is_self_inverse_up_to_length() {
        let mut v = [1.0, 0.0, 0.0, 0.0];
        walsh_hadamard(&mut v);
        assert_eq!(v, [1.0, 1.0, 1.0, 1.0]);

        let orig = [0.3, -1.2, 2.0, 0.7, 0.0, 5.0, -3.0, 1.0];
        let mut twice = orig;
        walsh_hadamard(&mut twice);
        walsh_hadamard(&mut twice);
        for (a, b) in twice.iter().zip(orig.iter()) {
            assert_relative_eq!(*a, 8.0 * b, epsilon = 1e-12);
        }
    }

    #[test]
    fn eigenvalues_of_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3.
        let mut ev = symmetric_eigenvalues(&[2.0, 1.0, 1.0, 2.0], 2);
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_relative_eq!(ev[0], 1.0, epsilon = 1e-10);
        assert_relative_eq!(ev[1], 3.0, epsilon = 1e-10);
    }

    #[test]
    fn eigenvalues_detect_indefiniteness() {
        // [[0,1],[1,0]] has eigenvalues -1 and 1.
        let ev = symmetric_eigenvalues(&[0.0, 1.0, 1.0, 0.0], 2);
        assert!(ev.iter().any(|&x| x < -0.5));
    }

    #[test]
    fn binomial_pmf_sums_to_one() {
        let total: f64 = (0..=10).map(|k| ln_binomial_pmf(10, k, 0.3).exp()).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn magnitude_roundtrips_moderate_numbers() {
        let x = Magnitude::from_f64(12.5);
        assert_eq!(x.linear(), 12.5);
        assert_relative_eq!(x.ln_f64(), 12.5f64.ln());
        // e^500 is finite, so both views stay exact.
        let y = Magnitude::from_ln(500.0);
        assert_relative_eq!(y.ln_f64(), 500.0, max_relative = 1e-12);
        assert_relative_eq!(y.linear(), 500f64.exp(), max_relative = 1e-12);
        let z = Magnitude::from_f64(1e300);
        assert_relative_eq!(z.linear(), 1e300, max_relative = 1e-12);
        assert_relative_eq!(z.ln_f64(), 1e300f64.ln(), max_relative = 1e-12);
    }

    #[test]
    fn magnitude_arithmetic_beyond_f64() {
        // x = e^2000: linear overflows, ln stays available.
        let x = Magnitude::from_ln(2000.0);
        assert_eq!(x.linear(), f64::INFINITY);
        assert_relative_eq!(x.ln_f64(), 2000.0, max_relative = 1e-12);
        assert_relative_eq!(x.powf(2.0).ln_f64(), 4000.0, max_relative = 1e-12);
        assert_relative_eq!(
            x.scale(10.0).ln_f64(),
            2000.0 + 10f64.ln(),
            max_relative = 1e-12
        );
        assert_relative_eq!(
            x.mul(&Magnitude::from_ln(123.0)).ln_f64(),
            2123.0,
            max_relative = 1e-12
        );
        assert_relative_eq!(
            x.mul(&Magnitude::from_f64(0.5)).ln_f64(),
            2000.0 + 0.5f64.ln(),
            max_relative = 1e-12
        );
        // exp(e^2000) pushes one layer deeper; ln recovers e^2000 (infinite
        // as f64), and ln of that recovers 2000.
        let tower = x.exp_mag();
        assert_eq!(tower.depth(), x.depth() + 1);
        assert_eq!(tower.ln_f64(), f64::INFINITY);
        assert_relative_eq!(tower.ln_mag().ln_f64(), 2000.0, max_relative = 1e-12);
    }

    #[test]
    fn magnitude_ordering_tracks_the_represented_numbers() {
        let pairs = [
            (Magnitude::from_f64(3.0), Magnitude::from_f64(700.0)),
            (Magnitude::from_f64(700.0), Magnitude::from_f64(1e300)),
            (Magnitude::from_f64(1e300), Magnitude::from_ln(5000.0)),
            (Magnitude::from_ln(5000.0), Magnitude::from_ln(5000.0).exp_mag()),
        ];
        for (small, big) in pairs {
            assert_eq!(small.cmp_mag(&big), std::cmp::Ordering::Less);
            assert_eq!(big.cmp_mag(&small), std::cmp::Ordering::Greater);
            assert_eq!(big.cmp_mag(&big), std::cmp::Ordering::Equal);
        }
    }

    #[test]
    fn magnitude_addition_absorbs_or_adds_correctly() {
        let a = Magnitude::from_f64(3.0);
        let b = Magnitude::from_f64(4.0);
        assert_eq!(a.add(&b).linear(), 7.0);
        // e^1000 + e^999 computed in log space.
        let sum = Magnitude::from_ln(1000.0).add(&Magnitude::from_ln(999.0));
        assert_relative_eq!(
            sum.ln_f64(),
            1000.0 + (-1.0f64).exp().ln_1p(),
            max_relative = 1e-12
        );
        // A flat term vanishes against a tower.
        let tower = Magnitude::from_ln(2000.0).exp_mag();
        assert_eq!(tower.add(&a), tower);
    }

    #[test]
    fn delta_method_reduces_to_plain_se_for_identity() {
        let rows: Vec<Vec<f64>> = vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]];
        let means = column_means(&rows);
        let se = delta_method_se(&rows, &means, &[1.0]);
        let flat: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let (_, se2) = mean_and_se(&flat);
        assert_relative_eq!(se, se2, max_relative = 1e-12);
    }
}

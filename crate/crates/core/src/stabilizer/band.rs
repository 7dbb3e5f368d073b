use super::StabilizerError;

/// Symmetric matrix with bandwidth two, stored by diagonals.
#[derive(Clone, Debug, PartialEq)]
pub struct Pentadiagonal {
    pub main: Vec<f64>,
    /// `A[i][i+1]`.
    pub first: Vec<f64>,
    /// `A[i][i+2]`.
    pub second: Vec<f64>,
}

impl Pentadiagonal {
    pub fn len(&self) -> usize {
        self.main.len()
    }

    pub fn is_empty(&self) -> bool {
        self.main.is_empty()
    }

    /// `a·I + s·D2ᵀD2 + v·D1ᵀD1` for a track of `n` frames, where `D1` and
    /// `D2` are the first and second difference operators.
    pub fn smoother(n: usize, a: f64, s: f64, v: f64) -> Self {
        let mut m = Self {
            main: vec![a; n],
            first: vec![0.0; n.saturating_sub(1)],
            second: vec![0.0; n.saturating_sub(2)],
        };
        // Each second-difference row [1, -2, 1] on frames t-2..t.
        for t in 2..n {
            let (i, j, k) = (t - 2, t - 1, t);
            m.main[i] += s;
            m.main[j] += 4.0 * s;
            m.main[k] += s;
            m.first[i] -= 2.0 * s;
            m.first[j] -= 2.0 * s;
            m.second[i] += s;
        }
        for t in 1..n {
            m.main[t - 1] += v;
            m.main[t] += v;
            m.first[t - 1] -= v;
        }
        m
    }

    pub fn mul(&self, x: &[f64]) -> Vec<f64> {
        let n = self.len();
        (0..n)
            .map(|i| {
                let mut y = self.main[i] * x[i];
                if i + 1 < n {
                    y += self.first[i] * x[i + 1];
                }
                if i + 2 < n {
                    y += self.second[i] * x[i + 2];
                }
                if i >= 1 {
                    y += self.first[i - 1] * x[i - 1];
                }
                if i >= 2 {
                    y += self.second[i - 2] * x[i - 2];
                }
                y
            })
            .collect()
    }
}

/// Banded Cholesky `A = L Lᵀ` followed by two triangular sweeps.
pub fn solve_pentadiagonal(a: &Pentadiagonal, b: &[f64]) -> Result<Vec<f64>, StabilizerError> {
    let n = a.len();
    if b.len() != n || a.first.len() != n.saturating_sub(1) || a.second.len() != n.saturating_sub(2) {
        return Err(StabilizerError::Shape("banded system and right-hand side disagree".into()));
    }
    // l0: diagonal, l1[i] = L[i][i-1], l2[i] = L[i][i-2].
    let (mut l0, mut l1, mut l2) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..n {
        if i >= 2 {
            l2[i] = a.second[i - 2] / l0[i - 2];
        }
        if i >= 1 {
            let mut s = a.first[i - 1];
            if i >= 2 {
                s -= l2[i] * l1[i - 1];
            }
            l1[i] = s / l0[i - 1];
        }
        let d = a.main[i] - l1[i] * l1[i] - l2[i] * l2[i];
        if !(d > 0.0) {
            return Err(StabilizerError::NotPositiveDefinite(i));
        }
        l0[i] = d.sqrt();
    }
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        if i >= 1 {
            s -= l1[i] * y[i - 1];
        }
        if i >= 2 {
            s -= l2[i] * y[i - 2];
        }
        y[i] = s / l0[i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        if i + 1 < n {
            s -= l1[i + 1] * x[i + 1];
        }
        if i + 2 < n {
            s -= l2[i + 2] * x[i + 2];
        }
        x[i] = s / l0[i];
    }
    Ok(x)
}

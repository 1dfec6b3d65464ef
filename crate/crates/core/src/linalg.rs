//! Dense symmetric matrices, Cholesky factors, permutations and the
//! greedy variable ordering used before sequential estimation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{log_interval_mass, truncated_mean, Interval};

/// Row-major dense symmetric matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    /// Builds from row-major storage, checking symmetry to 1e-12 relative.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidParameter("matrix dimension must be >= 1".into()));
        }
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: data.len(),
            });
        }
        let scale = data.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(f64::MIN_POSITIVE);
        for i in 0..dim {
            for j in 0..i {
                let (x, y) = (data[i * dim + j], data[j * dim + i]);
                if !x.is_finite() || (x - y).abs() > 1e-12 * scale {
                    return Err(Error::InvalidParameter(format!(
                        "matrix not symmetric at ({}, {})",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        let mut m = Self { dim, data };
        // Store an exactly symmetric copy.
        for i in 0..dim {
            for j in 0..i {
                let v = m.data[i * dim + j];
                m.data[j * dim + i] = v;
            }
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::from_row_major(dim, data)
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut data = vec![0.0; dim * dim];
        for (i, &v) in diag.iter().enumerate() {
            data[i * dim + i] = v;
        }
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(<[f64]>::to_vec).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    /// Adds `shift` to every diagonal entry.
    pub fn shift_diagonal(&mut self, shift: f64) {
        for i in 0..self.dim {
            self.data[i * self.dim + i] += shift;
        }
    }

    /// The leading `k × k` block.
    pub fn leading_block(&self, k: usize) -> SymMatrix {
        let mut data = Vec::with_capacity(k * k);
        for i in 0..k {
            data.extend_from_slice(&self.data[i * self.dim..i * self.dim + k]);
        }
        SymMatrix { dim: k, data }
    }

    fn swap(&mut self, p: usize, q: usize) {
        let d = self.dim;
        for c in 0..d {
            self.data.swap(p * d + c, q * d + c);
        }
        for r in 0..d {
            self.data.swap(r * d + p, r * d + q);
        }
    }
}

/// Dense lower-triangular matrix with a strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerTriangular {
    dim: usize,
    data: Vec<f64>,
}

impl LowerTriangular {
    /// Builds from row-major storage. Entries above the diagonal must be
    /// zero and the diagonal strictly positive.
    pub fn from_row_major(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                found: data.len(),
            });
        }
        for i in 0..dim {
            let diag = data[i * dim + i];
            if !(diag > 0.0) || !diag.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: i + 1,
                    value: diag,
                });
            }
            if data[i * dim + i + 1..(i + 1) * dim].iter().any(|&x| x != 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "row {} has entries above the diagonal",
                    i + 1
                )));
            }
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.data[i * self.dim + i]
    }

    /// Row `i` restricted to columns `0..=i`.
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..i * self.dim + i + 1]
    }

    /// `Γ Γᵗ`.
    pub fn gram(&self) -> SymMatrix {
        let d = self.dim;
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let v: f64 = self.row(i)[..=j]
                    .iter()
                    .zip(self.row(j))
                    .map(|(x, y)| x * y)
                    .sum();
                data[i * d + j] = v;
                data[j * d + i] = v;
            }
        }
        SymMatrix { dim: d, data }
    }

    /// `Γ x` for a prefix `x` of length `k <= d`, returning the first `k` rows.
    pub fn mul_prefix(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|i| self.row(i).iter().zip(x).map(|(g, v)| g * v).sum())
            .collect()
    }

    pub fn leading_block(&self, k: usize) -> LowerTriangular {
        let mut data = Vec::with_capacity(k * k);
        for i in 0..k {
            data.extend_from_slice(&self.data[i * self.dim..i * self.dim + k]);
        }
        LowerTriangular { dim: k, data }
    }
}

/// `Σ = Γ Γᵗ`.
pub fn cholesky(sigma: &SymMatrix) -> Result<LowerTriangular> {
    let d = sigma.dim;
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let dot: f64 = (0..j).map(|k| l[i * d + k] * l[j * d + k]).sum();
            let s = sigma.get(i, j) - dot;
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::NotPositiveDefinite {
                        pivot: i + 1,
                        value: s,
                    });
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Ok(LowerTriangular { dim: d, data: l })
}

/// A bijection on `0..d`: position `j` of the permuted problem holds
/// original coordinate `order[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    order: Vec<usize>,
}

impl Permutation {
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; order.len()];
        for &i in &order {
            if i >= order.len() || seen[i] {
                return Err(Error::InvalidParameter(format!(
                    "{order:?} is not a permutation"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { order })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            order: (0..d).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.order.len()];
        for (j, &i) in self.order.iter().enumerate() {
            inv[i] = j;
        }
        Permutation { order: inv }
    }

    /// `out[j] = v[order[j]]`.
    pub fn apply<T: Copy>(&self, v: &[T]) -> Vec<T> {
        self.order.iter().map(|&i| v[i]).collect()
    }
}

/// Relabels a problem: `Σ'_{jk} = Σ_{p(j)p(k)}`, `a'_j = a_{p(j)}`, `b'_j = b_{p(j)}`.
pub fn permute_problem(
    sigma: &SymMatrix,
    a: &[f64],
    b: &[f64],
    p: &Permutation,
) -> Result<(SymMatrix, Vec<f64>, Vec<f64>)> {
    let d = sigma.dim;
    for len in [a.len(), b.len(), p.len()] {
        if len != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                found: len,
            });
        }
    }
    let mut data = Vec::with_capacity(d * d);
    for &r in p.order() {
        for &c in p.order() {
            data.push(sigma.get(r, c));
        }
    }
    Ok((SymMatrix { dim: d, data }, p.apply(a), p.apply(b)))
}

/// Greedy ordering from the hardest to the easiest truncation.
///
/// At step `i` every remaining coordinate is scored by the mass of its
/// conditional interval given the truncated means already plugged in for
/// the chosen coordinates; the smallest mass goes next (ties to the smaller
/// original index). The partial Cholesky factor is updated one column per
/// step with row/column swaps, so the whole procedure is `O(d³)`.
pub fn gibson_ordering(sigma: &SymMatrix, a: &[f64], b: &[f64]) -> Result<Permutation> {
    let d = sigma.dim;
    if a.len() != d || b.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            found: a.len().min(b.len()),
        });
    }
    let mut s = sigma.clone();
    let (mut a, mut b) = (a.to_vec(), b.to_vec());
    let mut order: Vec<usize> = (0..d).collect();
    let mut c = vec![0.0; d * d];
    let mut plug = vec![0.0; d];

    for i in 0..d {
        let mut best: Option<(usize, f64, f64, Interval)> = None;
        for k in i..d {
            let row = &c[k * d..k * d + i];
            let shift: f64 = row.iter().zip(&plug[..i]).map(|(x, y)| x * y).sum();
            let var = s.get(k, k) - row.iter().map(|x| x * x).sum::<f64>();
            if !(var > 0.0) {
                continue;
            }
            let sd = var.sqrt();
            let iv = Interval::new((a[k] - shift) / sd, (b[k] - shift) / sd);
            let mass = log_interval_mass(iv).value();
            let better = match best {
                None => true,
                Some((kb, mb, _, _)) => mass < mb || (mass == mb && order[k] < order[kb]),
            };
            if better {
                best = Some((k, mass, sd, iv));
            }
        }
        let Some((k, _, sd, iv)) = best else {
            return Err(Error::NotPositiveDefinite {
                pivot: i + 1,
                value: s.get(i, i),
            });
        };
        if k != i {
            s.swap(i, k);
            a.swap(i, k);
            b.swap(i, k);
            order.swap(i, k);
            for col in 0..i {
                c.swap(i * d + col, k * d + col);
            }
        }
        c[i * d + i] = sd;
        for r in i + 1..d {
            let dot: f64 = (0..i).map(|col| c[r * d + col] * c[i * d + col]).sum();
            c[r * d + i] = (s.get(r, i) - dot) / sd;
        }
        plug[i] = truncated_mean(iv)?;
    }
    Permutation::new(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn cholesky_examples() {
        let id = cholesky(&SymMatrix::identity(3)).unwrap();
        assert_eq!(id.gram(), SymMatrix::identity(3));
        let g = cholesky(&SymMatrix::from_rows(&[vec![4.0, 2.0], vec![2.0, 5.0]]).unwrap()).unwrap();
        assert_eq!(
            (g.get(0, 0), g.get(0, 1), g.get(1, 0), g.get(1, 1)),
            (2.0, 0.0, 1.0, 2.0)
        );
        let singular = SymMatrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        match cholesky(&singular) {
            Err(Error::NotPositiveDefinite { pivot, .. }) => assert_eq!(pivot, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn rejects_asymmetric_and_bad_triangles() {
        assert!(SymMatrix::from_rows(&[vec![1.0, 0.5], vec![0.4, 1.0]]).is_err());
        assert!(LowerTriangular::from_row_major(2, vec![1.0, 0.1, 0.0, 1.0]).is_err());
        assert!(LowerTriangular::from_row_major(2, vec![1.0, 0.0, 0.3, 0.0]).is_err());
    }

    #[test]
    fn permutation_examples() {
        let rho = 0.3;
        let sigma = SymMatrix::from_rows(&[vec![1.0, rho], vec![rho, 2.0]]).unwrap();
        let (s, a, b) = permute_problem(&sigma, &[0.0, 1.0], &[2.0, 3.0], &Permutation::identity(2)).unwrap();
        assert_eq!((s.clone(), a, b), (sigma.clone(), vec![0.0, 1.0], vec![2.0, 3.0]));
        let swap = Permutation::new(vec![1, 0]).unwrap();
        let (s, a, b) = permute_problem(&sigma, &[0.0, 1.0], &[2.0, 3.0], &swap).unwrap();
        assert_eq!(s.rows(), vec![vec![2.0, rho], vec![rho, 1.0]]);
        assert_eq!((a, b), (vec![1.0, 0.0], vec![3.0, 2.0]));
        assert!(Permutation::new(vec![0, 0]).is_err());
        assert!(permute_problem(&sigma, &[0.0], &[1.0, 2.0], &swap).is_err());
    }

    #[test]
    fn gibson_puts_hardest_coordinate_first() {
        let p = gibson_ordering(
            &SymMatrix::identity(3),
            &[-INF, -INF, 3.0],
            &[INF, INF, INF],
        )
        .unwrap();
        assert_eq!(p.order()[0], 2);
        // Remaining coordinates carry full mass; ties go to the smaller index.
        assert_eq!(p.order(), &[2, 0, 1]);
        assert_eq!(
            gibson_ordering(&SymMatrix::identity(1), &[0.0], &[INF]).unwrap(),
            Permutation::identity(1)
        );
    }

    #[test]
    fn gibson_exchangeable_problem_is_valid() {
        let d = 6;
        let mut data = vec![0.5; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        let sigma = SymMatrix::from_row_major(d, data).unwrap();
        let p = gibson_ordering(&sigma, &vec![0.0; d], &vec![INF; d]).unwrap();
        assert!(Permutation::new(p.order().to_vec()).is_ok());
    }

    fn random_spd(d: usize, seed: Vec<f64>) -> SymMatrix {
        // Σ = XᵗX + I from a d×d block of the seed values.
        let x: Vec<f64> = seed.into_iter().take(d * d).collect();
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                data[i * d + j] = (0..d).map(|k| x[k * d + i] * x[k * d + j]).sum::<f64>()
                    + if i == j { 1.0 } else { 0.0 };
            }
        }
        SymMatrix::from_row_major(d, data).unwrap()
    }

    proptest! {
        #[test]
        fn cholesky_reconstructs(d in 1usize..8, vals in prop::collection::vec(-3.0f64..3.0, 64)) {
            let sigma = random_spd(d, vals);
            let g = cholesky(&sigma).unwrap();
            let back = g.gram();
            for i in 0..d {
                prop_assert!(g.diag(i) > 0.0);
                for j in 0..d {
                    prop_assert!((back.get(i, j) - sigma.get(i, j)).abs() <= 1e-10 * sigma.max_abs());
                }
            }
        }

        #[test]
        fn permutation_round_trip(d in 1usize..8, vals in prop::collection::vec(-3.0f64..3.0, 64), keys in prop::collection::vec(0u32..1000, 8)) {
            let sigma = random_spd(d, vals);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by_key(|&i| (keys[i], i));
            let p = Permutation::new(order).unwrap();
            let a: Vec<f64> = (0..d).map(|i| i as f64).collect();
            let b: Vec<f64> = (0..d).map(|i| i as f64 + 10.0).collect();
            let (s1, a1, b1) = permute_problem(&sigma, &a, &b, &p).unwrap();
            let (s2, a2, b2) = permute_problem(&s1, &a1, &b1, &p.inverse()).unwrap();
            prop_assert_eq!(s2, sigma);
            prop_assert_eq!(a2, a);
            prop_assert_eq!(b2, b);
        }

        #[test]
        fn gibson_first_choice_is_smallest_marginal_mass(
            d in 1usize..8,
            vals in prop::collection::vec(-2.0f64..2.0, 64),
            lows in prop::collection::vec(-3.0f64..3.0, 8),
        ) {
            let sigma = random_spd(d, vals);
            let a = &lows[..d];
            let b = vec![INF; d];
            let p = gibson_ordering(&sigma, a, &b).unwrap();
            prop_assert!(Permutation::new(p.order().to_vec()).is_ok());
            // Independent re-evaluation of the marginal masses.
            let masses: Vec<f64> = (0..d)
                .map(|k| {
                    let sd = sigma.get(k, k).sqrt();
                    (crate::gaussian::std_normal_cdf(-a[k] / sd)).ln()
                })
                .collect();
            let min = masses.iter().copied().fold(INF, f64::min);
            let first = p.order()[0];
            prop_assert!((masses[first] - min).abs() <= 1e-12 * min.abs().max(1.0));
        }
    }
}

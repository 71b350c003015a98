//! Dictionaries of basis functions with point evaluation and analytic partials.
//!
//! Two families are supported:
//!
//! * polynomial dictionaries: pure powers of each coordinate plus, optionally,
//!   pairwise products `x_c^a * x_e^b` with `a + b <= degree`;
//! * empirical-moment (EM) dictionaries for block-structured state vectors, where
//!   each block describes one rival and the features are a polynomial map of
//!   rival-averaged mixed moments. These are symmetric in the rival labels.
//!
//! Every dictionary starts with the constant function.

use crate::error::{Error, Result};

/// A product of coordinate powers, stored sparsely as `(coordinate, power)` pairs
/// in ascending coordinate order. The empty monomial is the constant 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monomial {
    factors: Vec<(usize, u32)>,
}

impl Monomial {
    pub fn constant() -> Self {
        Monomial { factors: vec![] }
    }

    fn from_factors(mut factors: Vec<(usize, u32)>) -> Self {
        factors.retain(|&(_, p)| p > 0);
        factors.sort_by_key(|&(c, _)| c);
        Monomial { factors }
    }

    /// Dense multi-index of length `dim`.
    pub fn exponents(&self, dim: usize) -> Vec<u32> {
        let mut e = vec![0; dim];
        for &(c, p) in &self.factors {
            e[c] = p;
        }
        e
    }

    pub fn degree(&self) -> u32 {
        self.factors.iter().map(|&(_, p)| p).sum()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.factors
            .iter()
            .fold(1.0, |acc, &(c, p)| acc * x[c].powi(p as i32))
    }

    pub fn partial(&self, x: &[f64], coord: usize) -> f64 {
        let Some(pos) = self.factors.iter().position(|&(c, _)| c == coord) else {
            return 0.0;
        };
        let mut out = 1.0;
        for (k, &(c, p)) in self.factors.iter().enumerate() {
            if k == pos {
                out *= p as f64 * x[c].powi(p as i32 - 1);
            } else {
                out *= x[c].powi(p as i32);
            }
        }
        out
    }
}

/// Polynomial monomials in the dictionary's canonical order: the constant, then
/// `x_c, x_c^2, .., x_c^degree` for each coordinate, then the pairwise products
/// for each `c < e` grouped by total degree.
fn polynomial_terms(dim: usize, degree: u32, interactions: bool) -> Vec<Monomial> {
    let mut terms = vec![Monomial::constant()];
    for c in 0..dim {
        for a in 1..=degree {
            terms.push(Monomial::from_factors(vec![(c, a)]));
        }
    }
    if interactions {
        for c in 0..dim {
            for e in (c + 1)..dim {
                for total in 2..=degree {
                    for a in (1..total).rev() {
                        terms.push(Monomial::from_factors(vec![(c, a), (e, total - a)]));
                    }
                }
            }
        }
    }
    terms
}

/// Block layout of a symmetric state vector: `num_blocks` consecutive blocks of
/// `block_width` coordinates, one block per rival.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub num_blocks: usize,
    pub block_width: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct EmSpec {
    layout: BlockLayout,
    /// One exponent vector (length `block_width`) per raw moment.
    moments: Vec<Vec<u32>>,
    /// Outer polynomial over the raw moment vector.
    outer: Vec<Monomial>,
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Poly(Vec<Monomial>),
    Em(EmSpec),
}

/// Descriptor of one basis function.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Descriptor {
    /// Multi-index over the input coordinates.
    Monomial(Vec<u32>),
    /// Multi-index over the raw EM moments (see [`Dictionary::em_moments`]).
    Moment(Vec<u32>),
}

/// An ordered, immutable list of basis functions over `R^input_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    input_dim: usize,
    kind: Kind,
}

impl Dictionary {
    /// Polynomial dictionary of the given degree.
    pub fn polynomial(dim: usize, degree: u32, include_interactions: bool) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dictionary dimension must be positive".into()));
        }
        if degree == 0 {
            return Err(Error::InvalidArgument("polynomial degree must be positive".into()));
        }
        Ok(Dictionary {
            input_dim: dim,
            kind: Kind::Poly(polynomial_terms(dim, degree, include_interactions)),
        })
    }

    /// Symmetric empirical-moment dictionary.
    ///
    /// The input is `num_rivals` blocks of `1 + dim_delta` coordinates; the first
    /// coordinate of each block is the lead variable (the rival's share for the
    /// demand state). For every order `n` in `[min_order, max_order]` a raw moment
    /// `(1/num_rivals) * sum_r prod_c v_{r,c}^{p_c}` is emitted for each multi-index
    /// with `sum p = n`, `p_1 > 0`, and, when `n >= 2`, some `p_k > 0` for `k > 1`.
    /// Features are the polynomial map of degree `outer_degree` applied to the raw
    /// moments.
    pub fn empirical_moment(
        num_rivals: usize,
        dim_delta: usize,
        min_order: u32,
        max_order: u32,
        outer_degree: u32,
        outer_interactions: bool,
    ) -> Result<Self> {
        if num_rivals == 0 || dim_delta == 0 {
            return Err(Error::InvalidArgument(
                "EM dictionary needs at least one rival and one difference coordinate".into(),
            ));
        }
        if min_order == 0 || min_order > max_order {
            return Err(Error::InvalidArgument(format!(
                "invalid moment orders [{min_order}, {max_order}]"
            )));
        }
        let width = dim_delta + 1;
        let mut moments = Vec::new();
        for n in min_order..=max_order {
            let mut idx = Vec::new();
            enumerate_compositions(n, width, &mut Vec::with_capacity(width), &mut idx);
            // lexicographically descending: high lead power first
            idx.sort_by(|a, b| b.cmp(a));
            for p in idx {
                let rival_part = p[1..].iter().any(|&e| e > 0);
                if p[0] > 0 && (n < 2 || rival_part) {
                    moments.push(p);
                }
            }
        }
        if moments.is_empty() {
            return Err(Error::Empty("admissible moment set"));
        }
        let outer = polynomial_terms(moments.len(), outer_degree.max(1), outer_interactions);
        Ok(Dictionary {
            input_dim: num_rivals * width,
            kind: Kind::Em(EmSpec {
                layout: BlockLayout {
                    num_blocks: num_rivals,
                    block_width: width,
                },
                moments,
                outer,
            }),
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn size(&self) -> usize {
        match &self.kind {
            Kind::Poly(t) => t.len(),
            Kind::Em(s) => s.outer.len(),
        }
    }

    pub fn descriptors(&self) -> Vec<Descriptor> {
        match &self.kind {
            Kind::Poly(t) => t
                .iter()
                .map(|m| Descriptor::Monomial(m.exponents(self.input_dim)))
                .collect(),
            Kind::Em(s) => s
                .outer
                .iter()
                .map(|m| Descriptor::Moment(m.exponents(s.moments.len())))
                .collect(),
        }
    }

    /// Raw moment multi-indices of an EM dictionary (empty for polynomials).
    pub fn em_moments(&self) -> &[Vec<u32>] {
        match &self.kind {
            Kind::Poly(_) => &[],
            Kind::Em(s) => &s.moments,
        }
    }

    fn check_point(&self, point: &[f64]) -> Result<()> {
        if point.len() != self.input_dim {
            return Err(Error::dims("dictionary input", self.input_dim, point.len()));
        }
        Ok(())
    }

    pub fn evaluate(&self, point: &[f64]) -> Result<Vec<f64>> {
        self.check_point(point)?;
        Ok(match &self.kind {
            Kind::Poly(t) => t.iter().map(|m| m.eval(point)).collect(),
            Kind::Em(s) => {
                let mu = s.raw_moments(point);
                s.outer.iter().map(|m| m.eval(&mu)).collect()
            }
        })
    }

    /// Partial derivative of every basis function with respect to `coord`.
    pub fn partial(&self, point: &[f64], coord: usize) -> Result<Vec<f64>> {
        self.check_point(point)?;
        if coord >= self.input_dim {
            return Err(Error::InvalidArgument(format!(
                "coordinate {coord} out of range for dimension {}",
                self.input_dim
            )));
        }
        Ok(match &self.kind {
            Kind::Poly(t) => t.iter().map(|m| m.partial(point, coord)).collect(),
            Kind::Em(_) => self.jacobian(point)?.into_iter().map(|row| row[coord]).collect(),
        })
    }

    /// Full Jacobian: one row per basis function, one column per input coordinate.
    pub fn jacobian(&self, point: &[f64]) -> Result<Vec<Vec<f64>>> {
        self.check_point(point)?;
        Ok(match &self.kind {
            Kind::Poly(t) => t
                .iter()
                .map(|m| (0..self.input_dim).map(|c| m.partial(point, c)).collect())
                .collect(),
            Kind::Em(s) => {
                let mu = s.raw_moments(point);
                let dmu = s.raw_moment_jacobian(point);
                s.outer
                    .iter()
                    .map(|m| {
                        let mut row = vec![0.0; self.input_dim];
                        for (i, dmu_i) in dmu.iter().enumerate() {
                            let g = m.partial(&mu, i);
                            if g != 0.0 {
                                for (r, d) in row.iter_mut().zip(dmu_i) {
                                    *r += g * d;
                                }
                            }
                        }
                        row
                    })
                    .collect()
            }
        })
    }
}

impl EmSpec {
    fn raw_moments(&self, point: &[f64]) -> Vec<f64> {
        let BlockLayout {
            num_blocks,
            block_width,
        } = self.layout;
        let mut contrib = Vec::with_capacity(num_blocks);
        self.moments
            .iter()
            .map(|p| {
                contrib.clear();
                contrib.extend(point.chunks(block_width).map(|block| {
                    block
                        .iter()
                        .zip(p)
                        .fold(1.0, |acc, (v, &e)| acc * v.powi(e as i32))
                }));
                // canonical summation order makes the features bitwise symmetric
                contrib.sort_by(f64::total_cmp);
                contrib.iter().sum::<f64>() / num_blocks as f64
            })
            .collect()
    }

    fn raw_moment_jacobian(&self, point: &[f64]) -> Vec<Vec<f64>> {
        let BlockLayout {
            num_blocks,
            block_width,
        } = self.layout;
        self.moments
            .iter()
            .map(|p| {
                let mut row = vec![0.0; point.len()];
                for (b, block) in point.chunks(block_width).enumerate() {
                    for c in 0..block_width {
                        if p[c] == 0 {
                            continue;
                        }
                        let mut v = p[c] as f64 * block[c].powi(p[c] as i32 - 1);
                        for (c2, (&x, &e)) in block.iter().zip(p).enumerate() {
                            if c2 != c {
                                v *= x.powi(e as i32);
                            }
                        }
                        row[b * block_width + c] = v / num_blocks as f64;
                    }
                }
                row
            })
            .collect()
    }
}

fn enumerate_compositions(total: u32, parts: usize, prefix: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if prefix.len() + 1 == parts {
        let used: u32 = prefix.iter().sum();
        let mut v = prefix.clone();
        v.push(total - used);
        out.push(v);
        return;
    }
    let used: u32 = prefix.iter().sum();
    for e in 0..=(total - used) {
        prefix.push(e);
        enumerate_compositions(total, parts, prefix, out);
        prefix.pop();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mono(e: &[u32]) -> Descriptor {
        Descriptor::Monomial(e.to_vec())
    }

    #[test]
    fn poly_one_dim_degree_two() {
        let d = Dictionary::polynomial(1, 2, false).unwrap();
        assert_eq!(d.size(), 3);
        assert_eq!(d.descriptors(), vec![mono(&[0]), mono(&[1]), mono(&[2])]);
        assert_eq!(d.evaluate(&[2.0]).unwrap(), vec![1.0, 2.0, 4.0]);
        assert_eq!(d.partial(&[3.0], 0).unwrap(), vec![0.0, 1.0, 6.0]);
    }

    #[test]
    fn poly_two_dim_with_interactions() {
        let d = Dictionary::polynomial(2, 2, true).unwrap();
        assert_eq!(
            d.descriptors(),
            vec![
                mono(&[0, 0]),
                mono(&[1, 0]),
                mono(&[2, 0]),
                mono(&[0, 1]),
                mono(&[0, 2]),
                mono(&[1, 1])
            ]
        );
        assert_eq!(
            d.evaluate(&[1.0, -1.0]).unwrap(),
            vec![1.0, 1.0, 1.0, -1.0, 1.0, -1.0]
        );
        // d(x1 x2)/dx2 at (2, 5) = x1 = 2
        assert_eq!(d.partial(&[2.0, 5.0], 1).unwrap()[5], 2.0);
    }

    #[test]
    fn poly_sizes() {
        assert_eq!(Dictionary::polynomial(3, 1, false).unwrap().size(), 4);
        // degree 3, two coordinates: 1 + 6 pure powers + x1x2, x1^2x2, x1x2^2
        assert_eq!(Dictionary::polynomial(2, 3, true).unwrap().size(), 10);
        // two-dim pure quadratics over 10 coords plus 45 products
        assert_eq!(Dictionary::polynomial(10, 2, true).unwrap().size(), 66);
        assert_eq!(Dictionary::polynomial(10, 2, false).unwrap().size(), 21);
    }

    #[test]
    fn rejects_zero_degree_or_dim() {
        assert!(Dictionary::polynomial(0, 2, false).is_err());
        assert!(Dictionary::polynomial(2, 0, false).is_err());
    }

    #[test]
    fn zero_point_evaluation() {
        let d = Dictionary::polynomial(3, 3, true).unwrap();
        let v = d.evaluate(&[0.0; 3]).unwrap();
        assert_eq!(v[0], 1.0);
        assert!(v[1..].iter().all(|&x| x == 0.0));
        let g = d.partial(&[0.3, -0.2, 1.1], 2).unwrap();
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn dimension_mismatch() {
        let d = Dictionary::polynomial(2, 2, false).unwrap();
        assert!(matches!(d.evaluate(&[1.0]), Err(Error::DimensionMismatch { .. })));
        assert!(d.partial(&[1.0, 2.0], 2).is_err());
    }

    #[test]
    fn em_admissible_sets() {
        let d = Dictionary::empirical_moment(3, 1, 2, 2, 1, false).unwrap();
        assert_eq!(d.em_moments(), &[vec![1, 1]]);
        let d = Dictionary::empirical_moment(3, 2, 2, 2, 1, false).unwrap();
        assert_eq!(d.em_moments(), &[vec![1, 1, 0], vec![1, 0, 1]]);
        // instrument role: first order allows the bare lead moment
        let d = Dictionary::empirical_moment(2, 1, 1, 2, 1, false).unwrap();
        assert_eq!(d.em_moments(), &[vec![1, 0], vec![1, 1]]);
        assert_eq!(d.size(), 3);
    }

    #[test]
    fn em_rejects_bad_orders() {
        assert!(Dictionary::empirical_moment(2, 1, 3, 2, 2, true).is_err());
        assert!(Dictionary::empirical_moment(2, 1, 0, 2, 2, true).is_err());
    }

    #[test]
    fn em_value_is_rival_mean() {
        let d = Dictionary::empirical_moment(2, 1, 2, 2, 1, false).unwrap();
        // blocks (s, delta): (0.2, 1.0), (0.4, -0.5); moment s*delta averaged
        let v = d.evaluate(&[0.2, 1.0, 0.4, -0.5]).unwrap();
        assert_eq!(v.len(), 2);
        assert!((v[1] - (0.2 - 0.2) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_ordering() {
        let a = Dictionary::polynomial(4, 3, true).unwrap();
        let b = Dictionary::polynomial(4, 3, true).unwrap();
        assert_eq!(a.descriptors(), b.descriptors());
        let a = Dictionary::empirical_moment(3, 2, 2, 3, 2, true).unwrap();
        let b = Dictionary::empirical_moment(3, 2, 2, 3, 2, true).unwrap();
        assert_eq!(a, b);
    }

    fn check_partials_fd(d: &Dictionary, point: &[f64]) {
        let h = 1e-5;
        let jac = d.jacobian(point).unwrap();
        for c in 0..d.input_dim() {
            let mut up = point.to_vec();
            let mut dn = point.to_vec();
            up[c] += h;
            dn[c] -= h;
            let fu = d.evaluate(&up).unwrap();
            let fd = d.evaluate(&dn).unwrap();
            let direct = d.partial(point, c).unwrap();
            for k in 0..d.size() {
                let fdv = (fu[k] - fd[k]) / (2.0 * h);
                let an = jac[k][c];
                assert_eq!(an, direct[k]);
                let rel = (an - fdv).abs() / an.abs().max(1.0);
                assert!(rel < 1e-6, "fn {k} coord {c}: analytic {an} fd {fdv}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn poly_partials_match_finite_differences(
            x in proptest::collection::vec(-1.5f64..1.5, 3)
        ) {
            let d = Dictionary::polynomial(3, 3, true).unwrap();
            check_partials_fd(&d, &x);
        }

        #[test]
        fn em_partials_match_finite_differences(
            x in proptest::collection::vec(-1.0f64..1.0, 6)
        ) {
            let d = Dictionary::empirical_moment(2, 2, 2, 3, 2, true).unwrap();
            check_partials_fd(&d, &x);
        }

        #[test]
        fn em_features_symmetric_in_rivals(
            x in proptest::collection::vec(-1.0f64..1.0, 9),
            perm in Just(vec![2usize, 0, 1])
        ) {
            let d = Dictionary::empirical_moment(3, 2, 2, 3, 2, true).unwrap();
            let mut y = Vec::with_capacity(9);
            for &b in &perm {
                y.extend_from_slice(&x[b * 3..b * 3 + 3]);
            }
            // bitwise equality
            prop_assert_eq!(d.evaluate(&x).unwrap(), d.evaluate(&y).unwrap());
        }
    }
}

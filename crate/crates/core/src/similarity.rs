//! Linear HSIC and linear CKA between representations of different widths.
//!
//! Rows are samples (tokens), columns are features. Centering removes each
//! feature's mean over the rows, which makes the feature-space form
//! `‖Xcᵀ Yc‖²_F` equal to the Gram form `tr(K H L H)` with `K = XXᵀ`,
//! `L = YYᵀ`. The `1/(m−1)²` normalizer is omitted everywhere; it cancels in CKA.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Matrix, Var, CKA_EPS};

/// Column-centered copies of two matrices sharing a row count.
#[derive(Clone, Debug, PartialEq)]
pub struct CenteredPair {
    pub x_centered: Matrix,
    pub y_centered: Matrix,
}

impl CenteredPair {
    pub fn new(x: &Matrix, y: &Matrix) -> Result<Self> {
        check_pair(x, y)?;
        Ok(CenteredPair {
            x_centered: center_features(x)?,
            y_centered: center_features(y)?,
        })
    }
}

fn check_pair(x: &Matrix, y: &Matrix) -> Result<()> {
    if x.rows() != y.rows() {
        return Err(Error::shape("cka row count", x.shape(), y.shape()));
    }
    if !x.is_finite() || !y.is_finite() {
        return Err(Error::Input("non-finite value in CKA input".into()));
    }
    Ok(())
}

/// Subtracts each column's mean over the rows.
pub fn center_features(x: &Matrix) -> Result<Matrix> {
    if x.rows() < 2 {
        return Err(Error::Degenerate(format!(
            "centering needs at least 2 rows, got {}",
            x.rows()
        )));
    }
    Ok(x.center_columns())
}

/// `‖Xcᵀ Yc‖²_F`.
pub fn hsic_linear(x: &Matrix, y: &Matrix) -> Result<f64> {
    let pair = CenteredPair::new(x, y)?;
    Ok(pair.x_centered.matmul_tn(&pair.y_centered)?.frobenius_sq())
}

/// Result of [`cka_linear`]. `degenerate` is set when either self-HSIC fell
/// below the guard, in which case `value` is 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cka {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cka_linear(x: &Matrix, y: &Matrix) -> Result<Cka> {
    let pair = CenteredPair::new(x, y)?;
    let (xc, yc) = (&pair.x_centered, &pair.y_centered);
    let hxy = xc.matmul_tn(yc)?.frobenius_sq();
    let hxx = xc.matmul_tn(xc)?.frobenius_sq();
    let hyy = yc.matmul_tn(yc)?.frobenius_sq();
    if hxx < CKA_EPS || hyy < CKA_EPS {
        return Ok(Cka {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(Cka {
        value: hxy / (hxx.sqrt() * hyy.sqrt()),
        degenerate: false,
    })
}

/// `1 − CKA(x, y)` with `y` treated as a fixed target. A degenerate input
/// yields a constant loss of 1 (no gradient) and `true` in the flag.
pub fn cka_loss(graph: &Graph, x: Var, y: &Matrix) -> Result<(Var, bool)> {
    let xv = graph.value(x);
    check_pair(&xv, y)?;
    if xv.rows() < 2 {
        return Err(Error::Degenerate(format!(
            "CKA needs at least 2 rows, got {}",
            xv.rows()
        )));
    }
    match graph.cka_loss(x, y)? {
        Some(v) => Ok((v, false)),
        None => Ok((graph.constant(Matrix::scalar(1.0)), true)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{central_difference, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Gram-form HSIC written independently: tr(K H L H).
    fn gram_hsic(x: &Matrix, y: &Matrix) -> f64 {
        let m = x.rows();
        let k = x.matmul_nt(x).unwrap();
        let l = y.matmul_nt(y).unwrap();
        let h = Matrix::from_fn(m, m, |i, j| if i == j { 1.0 } else { 0.0 } - 1.0 / m as f64);
        let khlh = k.matmul(&h).unwrap().matmul(&l).unwrap().matmul(&h).unwrap();
        (0..m).map(|i| khlh[(i, i)]).sum()
    }

    #[test]
    fn centering_examples() {
        let x = Matrix::from_rows(&[[1.0], [3.0]]);
        assert_eq!(center_features(&x).unwrap(), Matrix::from_rows(&[[-1.0], [1.0]]));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = random(5, 3, &mut rng);
        let c = center_features(&r).unwrap();
        for col in 0..3 {
            let s: f64 = (0..5).map(|row| c[(row, col)]).sum();
            assert!(s.abs() < 1e-10);
        }
        let again = center_features(&c).unwrap();
        assert!(again.zip_map(&c, |a, b| (a - b).abs()).unwrap().max_abs() < 1e-12);
        assert!(matches!(
            center_features(&Matrix::zeros(1, 3)),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn hsic_examples() {
        let x = Matrix::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]);
        assert_eq!(hsic_linear(&x, &x).unwrap(), 4.0);
        assert_eq!(hsic_linear(&x, &Matrix::zeros(2, 3)).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(6, 4, &mut rng);
        let b = random(6, 7, &mut rng);
        let feature = hsic_linear(&a, &b).unwrap();
        assert!((feature - gram_hsic(&a, &b)).abs() < 1e-8);
        assert!((feature - hsic_linear(&b, &a).unwrap()).abs() < 1e-12);
        assert!(hsic_linear(&a, &random(5, 4, &mut rng)).is_err());
    }

    #[test]
    fn cka_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(8, 3, &mut rng);
        assert!((cka_linear(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
        assert!((cka_linear(&x, &x.scale(3.7)).unwrap().value - 1.0).abs() < 1e-8);
        // rotation in the first two features
        let (s, c) = 0.7f64.sin_cos();
        let q = Matrix::from_rows(&[[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]);
        assert!((cka_linear(&x, &x.matmul(&q).unwrap()).unwrap().value - 1.0).abs() < 1e-8);
        let y = random(8, 5, &mut rng);
        let expected = gram_hsic(&x, &y) / (gram_hsic(&x, &x) * gram_hsic(&y, &y)).sqrt();
        assert!((cka_linear(&x, &y).unwrap().value - expected).abs() < 1e-8);
        let nan = Matrix::filled(8, 2, f64::NAN);
        assert!(cka_linear(&x, &nan).is_err());
    }

    #[test]
    fn degenerate_input_flags() {
        let x = Matrix::filled(4, 2, 0.5);
        let y = Matrix::from_fn(4, 3, |r, c| (r * c) as f64);
        let c = cka_linear(&x, &y).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.value, 0.0);
    }

    #[test]
    fn cka_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let y = random(5, 6, &mut rng);
        let g = Graph::new();
        let x = g.leaf(y.clone());
        let (loss, flag) = cka_loss(&g, x, &y).unwrap();
        assert!(!flag);
        assert!(g.scalar_value(loss).abs() < 1e-12);

        let student = random(5, 2, &mut rng);
        let g = Graph::new();
        let x = g.leaf(student.clone());
        let (loss, _) = cka_loss(&g, x, &y).unwrap();
        g.backward(loss).unwrap();
        let numeric = central_difference(&student, 1e-4, |m| {
            let g = Graph::new();
            let v = g.leaf(m.clone());
            g.scalar_value(cka_loss(&g, v, &y).unwrap().0)
        });
        for (a, n) in g.grad(x).data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n, 1e-6) < 1e-4);
        }

        let g = Graph::new();
        let constant = g.leaf(Matrix::filled(5, 2, 1.0));
        let (loss, flag) = cka_loss(&g, constant, &y).unwrap();
        assert!(flag);
        assert_eq!(g.scalar_value(loss), 1.0);
        let total = g.add(loss, g.sum(g.scale(constant, 0.0))).unwrap();
        g.backward(total).unwrap();
        assert_eq!(g.grad(constant).max_abs(), 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Matrix> {
            prop::collection::vec(-1.0f64..1.0, rows * cols)
                .prop_map(move |d| Matrix::from_vec(rows, cols, d).unwrap())
        }

        proptest! {
            #[test]
            fn symmetric_and_bounded((x, y) in (3usize..10, 1usize..6, 1usize..6)
                .prop_flat_map(|(k, a, b)| (matrix(k, a), matrix(k, b)))) {
                let xy = cka_linear(&x, &y).unwrap().value;
                let yx = cka_linear(&y, &x).unwrap().value;
                prop_assert!((xy - yx).abs() < 1e-12);
                prop_assert!((0.0..=1.0 + 1e-12).contains(&xy));
            }

            #[test]
            fn row_permutation_invariant((x, y, perm) in (3usize..9, 1usize..5, 1usize..5)
                .prop_flat_map(|(k, a, b)| (matrix(k, a), matrix(k, b), Just((0..k).collect::<Vec<_>>()).prop_shuffle()))) {
                let base = cka_linear(&x, &y).unwrap().value;
                let permuted = cka_linear(&x.select_rows(&perm), &y.select_rows(&perm)).unwrap().value;
                prop_assert!((base - permuted).abs() < 1e-12);
            }
        }
    }
}

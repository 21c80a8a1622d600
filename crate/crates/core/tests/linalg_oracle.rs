//! Hand-rolled linear algebra against nalgebra.

use approx::assert_relative_eq;
use driftlab::codec::{CodecParams, LossyCodec};
use driftlab::linalg::{least_squares, Matrix};
use driftlab::rng;
use nalgebra::{DMatrix, DVector};

fn random(rows: usize, cols: usize, seed: u64) -> (Matrix<f64>, DMatrix<f64>) {
    let data = rng::normal_vec::<f64>(&mut rng::stream(seed, "oracle", "matrix"), rows * cols);
    (Matrix::from_rows(rows, cols, data.clone()).unwrap(), DMatrix::from_row_slice(rows, cols, &data))
}

#[test]
fn inverse_matches_nalgebra() {
    for (n, seed) in [(3, 1), (8, 2), (32, 3)] {
        let (ours, theirs) = random(n, n, seed);
        let inv = ours.inverse().unwrap();
        let expected = theirs.try_inverse().unwrap();
        for i in 0..n {
            for j in 0..n {
                assert_relative_eq!(inv[(i, j)], expected[(i, j)], epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }
}

#[test]
fn least_squares_matches_svd() {
    let (a, na) = random(16, 8, 4);
    let b = rng::normal_vec::<f64>(&mut rng::stream(5, "oracle", "rhs"), 16);
    let x = least_squares(&a, &b).unwrap();
    let expected = na.svd(true, true).solve(&DVector::from_column_slice(&b), 1e-12).unwrap();
    for (u, v) in x.iter().zip(expected.iter()) {
        assert_relative_eq!(*u, *v, epsilon = 1e-9);
    }
}

#[test]
fn encoder_inverse_is_the_matrix_inverse() {
    let codec = LossyCodec::<f64>::new(CodecParams::lossless(32, 6)).unwrap();
    let a = codec.encoder_matrix();
    let na = DMatrix::from_row_slice(32, 32, a.as_slice());
    let x = rng::normal_vec::<f64>(&mut rng::stream(7, "oracle", "x"), 32);
    let z: Vec<f64> = a.matvec(&x).unwrap().iter().zip(codec.offset()).map(|(v, o)| v + o).collect();
    let back = codec.invert(&z).unwrap();
    let shifted: Vec<f64> = z.iter().zip(codec.offset()).map(|(v, o)| v - o).collect();
    let expected = na.try_inverse().unwrap() * DVector::from_column_slice(&shifted);
    for (u, v) in back.values().iter().zip(expected.iter()) {
        assert_relative_eq!(*u, *v, epsilon = 1e-10);
    }
}

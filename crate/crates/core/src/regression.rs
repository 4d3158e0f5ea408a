//! Weighted least-squares estimation of conditional expectations on a
//! declared basis. Rank-deficient normal equations are solved by minimum-norm
//! least squares via a symmetric eigendecomposition pseudo-inverse; condition
//! numbers above `CONDITION_WARN_THRESHOLD` are reported to the caller.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub const CONDITION_WARN_THRESHOLD: f64 = 1e8;

/// Basis declaration for the regression features.
#[derive(Debug, Clone, PartialEq)]
pub enum BasisSpec {
    /// All monomials of total degree `<= degree` in the features.
    Polynomial { degree: usize },
    /// One indicator column per distinct feature vector (exact conditional
    /// expectations on enumerated batches).
    Indicator,
}

impl BasisSpec {
    pub fn describe(&self) -> String {
        match self {
            BasisSpec::Polynomial { degree } => format!("polynomial(degree={degree})"),
            BasisSpec::Indicator => "indicator".to_string(),
        }
    }
}

/// Row-major view of the per-observation feature vectors.
#[derive(Clone, Copy)]
pub struct FeatureMatrix<'a> {
    pub data: &'a [f64],
    pub width: usize,
}

impl<'a> FeatureMatrix<'a> {
    pub fn new(data: &'a [f64], width: usize) -> Self {
        assert!(width > 0 && data.len().is_multiple_of(width));
        FeatureMatrix { data, width }
    }

    pub fn n_rows(&self) -> usize {
        self.data.len() / self.width
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Exponent tuples of total degree `<= degree` over `n_features` variables.
fn monomial_exponents(n_features: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(out: &mut Vec<Vec<usize>>, current: &mut Vec<usize>, pos: usize, left: usize) {
        if pos == current.len() {
            out.push(current.clone());
            return;
        }
        for e in 0..=left {
            current[pos] = e;
            rec(out, current, pos + 1, left - e);
        }
        current[pos] = 0;
    }
    let mut out = Vec::new();
    rec(&mut out, &mut vec![0usize; n_features], 0, degree);
    out
}

/// A fitted conditional-expectation function on the declared basis.
pub struct Fit {
    design: Design,
    coeffs: DVector<f64>,
    pub condition: f64,
}

enum Design {
    Polynomial { exponents: Vec<Vec<usize>> },
    Indicator { cells: Vec<Vec<u64>> },
}

impl Design {
    fn row(&self, features: &[f64], out: &mut [f64]) {
        match self {
            Design::Polynomial { exponents } => {
                for (j, exps) in exponents.iter().enumerate() {
                    let mut v = 1.0;
                    for (f, &e) in features.iter().zip(exps) {
                        for _ in 0..e {
                            v *= f;
                        }
                    }
                    out[j] = v;
                }
            }
            Design::Indicator { cells } => {
                for (j, cell) in cells.iter().enumerate() {
                    let hit = cell
                        .iter()
                        .zip(features)
                        .all(|(&bits, &f)| bits == f.to_bits());
                    out[j] = if hit { 1.0 } else { 0.0 };
                }
            }
        }
    }

    fn width(&self) -> usize {
        match self {
            Design::Polynomial { exponents } => exponents.len(),
            Design::Indicator { cells } => cells.len(),
        }
    }
}

/// Fits `E[response | features]` by weighted least squares.
pub fn fit(
    basis: &BasisSpec,
    features: FeatureMatrix,
    response: &[f64],
    weights: &[f64],
) -> Result<Fit> {
    let n = features.n_rows();
    if n != response.len() || n != weights.len() {
        return Err(Error::Shape(format!(
            "regression data rows disagree: {} features, {} responses, {} weights",
            n,
            response.len(),
            weights.len()
        )));
    }
    if n == 0 {
        return Err(Error::Basis("no observations".into()));
    }
    let design = match basis {
        BasisSpec::Polynomial { degree } => Design::Polynomial {
            exponents: monomial_exponents(features.width, *degree),
        },
        BasisSpec::Indicator => {
            let mut cells: Vec<Vec<u64>> = (0..n)
                .map(|i| features.row(i).iter().map(|x| x.to_bits()).collect())
                .collect();
            cells.sort();
            cells.dedup();
            Design::Indicator { cells }
        }
    };
    let k = design.width();

    // Accumulate the weighted normal equations.
    let mut xtx = DMatrix::<f64>::zeros(k, k);
    let mut xty = DVector::<f64>::zeros(k);
    let mut row = vec![0.0; k];
    for i in 0..n {
        design.row(features.row(i), &mut row);
        let w = weights[i];
        let y = response[i];
        for a in 0..k {
            let wa = w * row[a];
            xty[a] += wa * y;
            for b in a..k {
                xtx[(a, b)] += wa * row[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }

    // Symmetric eigendecomposition gives the minimum-norm solution and the
    // condition number in one pass.
    let eig = xtx.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    if max_ev <= 0.0 {
        return Err(Error::Basis("normal equations are identically zero".into()));
    }
    let cutoff = max_ev * 1e-13;
    let min_pos = eig
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&e| e > cutoff)
        .fold(f64::INFINITY, f64::min);
    let condition = max_ev / min_pos;

    let proj = eig.eigenvectors.transpose() * &xty;
    let mut scaled = DVector::<f64>::zeros(k);
    for i in 0..k {
        if eig.eigenvalues[i] > cutoff {
            scaled[i] = proj[i] / eig.eigenvalues[i];
        }
    }
    let coeffs = &eig.eigenvectors * scaled;

    Ok(Fit {
        design,
        coeffs,
        condition,
    })
}

impl Fit {
    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut row = vec![0.0; self.design.width()];
        self.design.row(features, &mut row);
        row.iter().zip(self.coeffs.iter()).map(|(r, c)| r * c).sum()
    }

    pub fn predict_all(&self, features: FeatureMatrix) -> Vec<f64> {
        let mut row = vec![0.0; self.design.width()];
        (0..features.n_rows())
            .map(|i| {
                self.design.row(features.row(i), &mut row);
                row.iter().zip(self.coeffs.iter()).map(|(r, c)| r * c).sum()
            })
            .collect()
    }
}

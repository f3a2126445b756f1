//! Plane projective transforms in f64, normalized so h₃₃ = 1.

use crate::error::{Error, Result};

const MIN_DET: f64 = 1e-8;
const MIN_DENOM: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub fn identity() -> Self {
        Homography {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalize h₃₃ to 1 and reject singular matrices.
    pub fn from_matrix(raw: [[f64; 3]; 3]) -> Result<Self> {
        let s = raw[2][2];
        if s.abs() < 1e-12 {
            return Err(Error::Contract("homography h33 is (near) zero".into()));
        }
        let mut m = raw;
        for row in &mut m {
            for v in row {
                *v /= s;
            }
        }
        let h = Homography { m };
        if h.det().abs() <= MIN_DET {
            return Err(Error::Contract(format!(
                "homography is singular (|det| = {:e})",
                h.det().abs()
            )));
        }
        Ok(h)
    }

    /// Exact homography mapping four source points to four destinations,
    /// via the 8×8 linear system with h₃₃ pinned to 1.
    pub fn from_4pt(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Result<Self> {
        let mut a = [[0.0f64; 9]; 8]; // augmented [A | b]
        for i in 0..4 {
            let (x, y) = src[i];
            let (u, v) = dst[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        // Gaussian elimination with partial pivoting
        for col in 0..8 {
            let pivot = (col..8)
                .max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs()))
                .unwrap();
            if a[pivot][col].abs() < 1e-10 {
                return Err(Error::Contract(
                    "degenerate point configuration for 4-point homography".into(),
                ));
            }
            a.swap(col, pivot);
            let d = a[col][col];
            for k in col..9 {
                a[col][k] /= d;
            }
            for row in 0..8 {
                if row != col && a[row][col] != 0.0 {
                    let f = a[row][col];
                    for k in col..9 {
                        a[row][k] -= f * a[col][k];
                    }
                }
            }
        }
        let h = &a;
        Homography::from_matrix([
            [h[0][8], h[1][8], h[2][8]],
            [h[3][8], h[4][8], h[5][8]],
            [h[6][8], h[7][8], 1.0],
        ])
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> f64 {
        let m = &self.m;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Inverse via the adjugate; renormalized so h₃₃ = 1.
    pub fn inverse(&self) -> Result<Homography> {
        let m = &self.m;
        let det = self.det();
        if det.abs() <= MIN_DET {
            return Err(Error::Contract("homography is singular".into()));
        }
        let adj = [
            [
                m[1][1] * m[2][2] - m[1][2] * m[2][1],
                m[0][2] * m[2][1] - m[0][1] * m[2][2],
                m[0][1] * m[1][2] - m[0][2] * m[1][1],
            ],
            [
                m[1][2] * m[2][0] - m[1][0] * m[2][2],
                m[0][0] * m[2][2] - m[0][2] * m[2][0],
                m[0][2] * m[1][0] - m[0][0] * m[1][2],
            ],
            [
                m[1][0] * m[2][1] - m[1][1] * m[2][0],
                m[0][1] * m[2][0] - m[0][0] * m[2][1],
                m[0][0] * m[1][1] - m[0][1] * m[1][0],
            ],
        ];
        Homography::from_matrix(adj)
    }

    /// self ∘ other: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Result<Homography> {
        let (a, b) = (&self.m, &other.m);
        let mut out = [[0.0f64; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    out[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        Homography::from_matrix(out)
    }

    pub fn warp_point(&self, p: (f64, f64)) -> Result<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * p.0 + m[2][1] * p.1 + m[2][2];
        if w.abs() <= MIN_DENOM {
            return Err(Error::Contract(format!(
                "point ({}, {}) maps to infinity",
                p.0, p.1
            )));
        }
        Ok((
            (m[0][0] * p.0 + m[0][1] * p.1 + m[0][2]) / w,
            (m[1][0] * p.0 + m[1][1] * p.1 + m[1][2]) / w,
        ))
    }
}

use serde::{Deserialize, Serialize};

use super::{Result, VocabError};

/// Fitted principal-component basis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `d` rows of length `input_dim`, descending eigenvalue order. Rows past
    /// the data's rank are zero.
    pub components: Vec<Vec<f64>>,
    /// All eigenvalues of the covariance, descending.
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn project(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((c, x), m)| c * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &z) in self.components.iter().zip(coords) {
            for (o, v) in out.iter_mut().zip(c) {
                *o += z * v;
            }
        }
        out
    }

    /// Fraction of total variance captured by each kept component.
    pub fn explained_variance_ratio(&self) -> Vec<f64> {
        let total: f64 = self.eigenvalues.iter().map(|v| v.max(0.0)).sum();
        self.eigenvalues
            .iter()
            .take(self.components.len())
            .map(|v| if total > 0.0 { v.max(0.0) / total } else { 0.0 })
            .collect()
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns `(eigenvalues, eigenvectors as columns of a row-major matrix)`.
fn jacobi_eigen(mut a: Vec<f64>, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Projects mean-centred rows onto the top-`d` covariance eigenvectors.
/// Each component's largest-magnitude entry is made positive. If the data
/// has rank below `d`, the missing components are zero and a warning is logged.
pub fn pca_reduce(rows: &[Vec<f64>], d: usize) -> Result<(Vec<Vec<f64>>, Pca)> {
    let n = rows.len();
    let dim = rows.first().map(Vec::len).unwrap_or(0);
    if n == 0 || dim == 0 {
        return Err(VocabError::Config("PCA needs a nonempty matrix".into()));
    }
    if rows.iter().any(|r| r.len() != dim) {
        return Err(VocabError::Config("PCA rows have inconsistent lengths".into()));
    }
    if d > dim {
        return Err(VocabError::Config(format!("cannot keep {d} components of {dim}-D data")));
    }
    let mut mean = vec![0.0; dim];
    for r in rows {
        for (m, x) in mean.iter_mut().zip(r) {
            *m += x / n as f64;
        }
    }
    let mut cov = vec![0.0; dim * dim];
    for r in rows {
        let c: Vec<f64> = r.iter().zip(&mean).map(|(x, m)| x - m).collect();
        for i in 0..dim {
            for j in i..dim {
                cov[i * dim + j] += c[i] * c[j];
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    for i in 0..dim {
        for j in i..dim {
            cov[i * dim + j] /= denom;
            cov[j * dim + i] = cov[i * dim + j];
        }
    }
    let (vals, vecs) = jacobi_eigen(cov, dim);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| vals[i]).collect();
    let tol = eigenvalues[0].abs().max(f64::MIN_POSITIVE) * 1e-12 * dim as f64;
    let mut components = Vec::with_capacity(d);
    let mut deficient = 0;
    for &i in order.iter().take(d) {
        if vals[i] <= tol {
            components.push(vec![0.0; dim]);
            deficient += 1;
            continue;
        }
        let mut c: Vec<f64> = (0..dim).map(|k| vecs[k * dim + i]).collect();
        let pivot = c
            .iter()
            .enumerate()
            .fold(0, |best, (k, x)| if x.abs() > c[best].abs() { k } else { best });
        if c[pivot] < 0.0 {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        components.push(c);
    }
    if deficient > 0 {
        log::warn!("PCA: data rank is below {d}; {deficient} component(s) padded with zeros");
    }
    let pca = Pca {
        mean,
        components,
        eigenvalues,
    };
    let projected = rows.iter().map(|r| pca.project(r)).collect();
    Ok((projected, pca))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collinear_points_need_one_component() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, 2.0 * i as f64, -(i as f64)]).collect();
        let (proj, pca) = pca_reduce(&rows, 1).unwrap();
        assert!((pca.explained_variance_ratio()[0] - 1.0).abs() < 1e-12);
        for (r, p) in rows.iter().zip(&proj) {
            let back = pca.reconstruct(p);
            for (a, b) in r.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rank_deficiency_pads_with_zeros() {
        let rows: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 1.0, 0.0]).collect();
        let (proj, pca) = pca_reduce(&rows, 3).unwrap();
        assert!(pca.components[1].iter().all(|&x| x == 0.0));
        assert!(proj.iter().all(|p| p[1] == 0.0 && p[2] == 0.0));
    }

    #[test]
    fn rejects_too_many_components() {
        assert!(pca_reduce(&[vec![1.0, 2.0]], 3).is_err());
    }
}

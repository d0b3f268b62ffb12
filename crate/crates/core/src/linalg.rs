//! Dense kernels behind the dependence estimators: one-sided Jacobi SVD,
//! top canonical correlation, Gaussian KDE on a grid, rank and quantile
//! helpers.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 60;

#[derive(Clone, Debug)]
pub struct SvdResult {
    /// Descending, nonnegative.
    pub values: Array1<f64>,
    /// m × k left singular vectors.
    pub u: Array2<f64>,
    /// n × k right singular vectors.
    pub v: Array2<f64>,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.u * &self.values;
        scaled.dot(&self.v.t())
    }
}

/// Thin SVD by one-sided (Hestenes) Jacobi rotations.
///
/// Sign convention: the largest-magnitude entry of each left vector is
/// positive. Left vectors of zero singular values are left as zero columns.
pub fn svd(a: ArrayView2<f64>) -> Result<SvdResult> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("svd input".into()));
    }
    if a.nrows() < a.ncols() {
        let t = svd(a.t())?;
        // A^T = U S V^T  =>  A = V S U^T; re-apply the sign convention on V.
        let mut out = SvdResult {
            values: t.values,
            u: t.v,
            v: t.u,
        };
        fix_signs(&mut out);
        return Ok(out);
    }
    let (m, n) = a.dim();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j).to_vec()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for i in 0..m {
                        alpha += cp[i] * cp[i];
                        beta += cq[i] * cq[i];
                        gamma += cp[i] * cq[i];
                    }
                    (alpha, beta, gamma)
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "jacobi svd",
            iterations: MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let mut values = Array1::zeros(n);
    let mut u = Array2::zeros((m, n));
    let mut v = Array2::zeros((n, n));
    for (k, &j) in order.iter().enumerate() {
        values[k] = norms[j];
        if norms[j] > 0.0 {
            for i in 0..m {
                u[[i, k]] = cols[j][i] / norms[j];
            }
        }
        for i in 0..n {
            v[[i, k]] = vcols[j][i];
        }
    }
    let mut out = SvdResult { values, u, v };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let (cp, cq) = (&mut lo[p], &mut hi[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

fn fix_signs(r: &mut SvdResult) {
    for k in 0..r.values.len() {
        let col = r.u.column(k);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best });
        if pivot < 0.0 {
            r.u.column_mut(k).mapv_inplace(|x| -x);
            r.v.column_mut(k).mapv_inplace(|x| -x);
        }
    }
}

/// Inverse square root of a symmetric positive semi-definite matrix, via its
/// SVD (which coincides with the eigendecomposition). Returns the matrix and
/// the eigenvalues.
fn sym_inv_sqrt(c: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>)> {
    let d = svd(c.view())?;
    let inv = d.values.mapv(|s| if s > 0.0 { 1.0 / s.sqrt() } else { 0.0 });
    let scaled = &d.v * &inv;
    Ok((scaled.dot(&d.v.t()), d.values))
}

fn centered(a: ArrayView2<f64>) -> Array2<f64> {
    let mean = a.mean_axis(Axis(0)).expect("non-empty");
    &a - &mean
}

#[derive(Clone, Copy, Debug)]
pub struct CcaResult {
    pub correlation: f64,
    /// Some unregularized covariance block was numerically rank-deficient.
    pub rank_deficient: bool,
}

/// Largest canonical correlation between the column blocks `a` and `b`.
pub fn cca_top(a: ArrayView2<f64>, b: ArrayView2<f64>, ridge: f64) -> Result<f64> {
    cca_top_detailed(a, b, ridge).map(|r| r.correlation)
}

pub fn cca_top_detailed(a: ArrayView2<f64>, b: ArrayView2<f64>, ridge: f64) -> Result<CcaResult> {
    if a.nrows() != b.nrows() {
        return Err(Error::Shape {
            op: "cca_top",
            left: a.dim(),
            right: b.dim(),
        });
    }
    if ridge < 0.0 || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!("ridge must be ≥ 0, got {ridge}")));
    }
    let n = a.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument("cca needs ≥ 2 rows".into()));
    }
    let (ac, bc) = (centered(a), centered(b));
    let scale = 1.0 / (n as f64 - 1.0);
    let caa = ac.t().dot(&ac) * scale;
    let cbb = bc.t().dot(&bc) * scale;
    let cab = ac.t().dot(&bc) * scale;

    let mut rank_deficient = false;
    let mut whiten = |cov: Array2<f64>| -> Result<Array2<f64>> {
        let mut reg = cov;
        for i in 0..reg.nrows() {
            reg[[i, i]] += ridge;
        }
        let (w, eig) = sym_inv_sqrt(&reg)?;
        let max = eig.iter().copied().fold(0.0, f64::max);
        let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
        if max == 0.0 || min - ridge <= 1e-12 * max {
            rank_deficient = true;
            if ridge == 0.0 {
                return Err(Error::Degenerate(
                    "singular covariance in cca; use a positive ridge".into(),
                ));
            }
        }
        Ok(w)
    };
    let wa = whiten(caa)?;
    let wb = whiten(cbb)?;
    let m = wa.dot(&cab).dot(&wb);
    let top = svd(m.view())?.values.first().copied().unwrap_or(0.0);
    Ok(CcaResult {
        correlation: top.clamp(0.0, 1.0),
        rank_deficient,
    })
}

/// Joint Gaussian-kernel density evaluated at cell centers of a regular grid.
#[derive(Clone, Debug)]
pub struct KdeGrid {
    pub bins_u: usize,
    pub bins_v: usize,
    pub bandwidth_u: f64,
    pub bandwidth_v: f64,
    pub centers_u: Array1<f64>,
    pub centers_v: Array1<f64>,
    pub cell_u: f64,
    pub cell_v: f64,
    /// bins_u × bins_v, integrates to 1 over the grid.
    pub density: Array2<f64>,
}

impl KdeGrid {
    pub fn integral(&self) -> f64 {
        self.density.sum() * self.cell_u * self.cell_v
    }

    /// Probability mass per cell.
    pub fn cell_masses(&self) -> Array2<f64> {
        &self.density * (self.cell_u * self.cell_v)
    }
}

/// Mass of N(0, 1) on `[a, b]`, computed on the side of zero that keeps the
/// tail subtraction accurate.
fn normal_interval(a: f64, b: f64) -> f64 {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    if a >= 0.0 {
        0.5 * (libm::erfc(a * s) - libm::erfc(b * s))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b * s) - libm::erfc(-a * s))
    } else {
        1.0 - 0.5 * (libm::erfc(-a * s) + libm::erfc(b * s))
    }
}

/// Per-point kernel density averaged over each cell. Integrating over the
/// cell instead of sampling the centre keeps narrow kernels from vanishing.
fn axis_kernel(x: ArrayView1<f64>, bins: usize, bw: f64) -> (Array1<f64>, f64, Array2<f64>) {
    let min = x.iter().copied().fold(f64::INFINITY, f64::min);
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lo = min - 3.0 * bw;
    let cell = (max + 3.0 * bw - lo) / bins as f64;
    let centers = Array1::from_shape_fn(bins, |i| lo + (i as f64 + 0.5) * cell);
    let k = Array2::from_shape_fn((x.len(), bins), |(r, i)| {
        let a = (lo + i as f64 * cell - x[r]) / bw;
        let b = (lo + (i + 1) as f64 * cell - x[r]) / bw;
        normal_interval(a, b) / cell
    });
    (centers, cell, k)
}

/// Gaussian product-kernel density of `(u, v)` on a `bins × bins` grid
/// spanning `[min − 3bw, max + 3bw]` per axis.
pub fn kde_density_grid(
    u: ArrayView1<f64>,
    v: ArrayView1<f64>,
    bins: usize,
    bw_u: f64,
    bw_v: f64,
) -> Result<KdeGrid> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "kde needs equal non-empty columns, got {} and {}",
            u.len(),
            v.len()
        )));
    }
    if bins < 4 {
        return Err(Error::InvalidArgument(format!("kde needs ≥ 4 bins, got {bins}")));
    }
    if !(bw_u > 0.0 && bw_v > 0.0) {
        return Err(Error::InvalidArgument("kde bandwidths must be > 0".into()));
    }
    let (centers_u, cell_u, ku) = axis_kernel(u, bins, bw_u);
    let (centers_v, cell_v, kv) = axis_kernel(v, bins, bw_v);

    // Accumulated point by point so that swapping (u, v) yields the exact
    // transpose.
    let mut raw = Array2::<f64>::zeros((bins, bins));
    let mut total = 0.0;
    for (ru, rv) in ku.rows().into_iter().zip(kv.rows()) {
        total += ru.sum() * rv.sum();
        for (i, &a) in ru.iter().enumerate() {
            let mut row = raw.row_mut(i);
            for (cell, &b) in row.iter_mut().zip(rv.iter()) {
                *cell += a * b;
            }
        }
    }
    let area = cell_u * cell_v;
    let scale = 1.0 / (total * area);
    raw.mapv_inplace(|d| d * scale);
    Ok(KdeGrid {
        bins_u: bins,
        bins_v: bins,
        bandwidth_u: bw_u,
        bandwidth_v: bw_v,
        centers_u,
        centers_v,
        cell_u,
        cell_v,
        density: raw,
    })
}

pub fn mean_std(x: ArrayView1<f64>) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Linear-interpolated empirical quantile (`p` in [0, 1]).
pub fn quantile(x: ArrayView1<f64>, p: f64) -> f64 {
    let mut sorted = x.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Silverman's rule of thumb, `0.9 · min(sd, IQR/1.34) · n^(−1/5)`.
pub fn silverman_bandwidth(x: ArrayView1<f64>) -> f64 {
    let n = x.len() as f64;
    let (_, sd) = mean_std(x);
    let iqr = quantile(x, 0.75) - quantile(x, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Indices of `s` in ascending order, ties kept in input order.
pub fn stable_argsort(s: ArrayView1<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[a].total_cmp(&s[b]));
    idx
}

/// Empirical copula transform: rank / n with ranks 1..=n (ties broken by
/// input order).
pub fn copula_ranks(s: ArrayView1<f64>) -> Array1<f64> {
    let n = s.len();
    let mut out = Array1::zeros(n);
    for (rank, i) in stable_argsort(s).into_iter().enumerate() {
        out[i] = (rank + 1) as f64 / n as f64;
    }
    out
}

/// Splits row indices into `q` equal-count buckets ordered by `s`. Bucket
/// sizes differ by at most one.
pub fn quantile_partition(s: ArrayView1<f64>, q: usize) -> Result<Vec<Vec<usize>>> {
    let n = s.len();
    if q == 0 || q > n {
        return Err(Error::InvalidArgument(format!(
            "cannot split {n} rows into {q} quantile buckets"
        )));
    }
    let order = stable_argsort(s);
    Ok((0..q)
        .map(|k| order[k * n / q..(k + 1) * n / q].to_vec())
        .collect())
}

//! Dense matrix kernels over row-major slices.

/// `c = beta * c + a · b` where `a` is `m×k` and `b` is `k×n`.
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = beta * c + a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c = beta * c + aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], beta: f64, c: &mut [f64]) {
    assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: as above; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Compressed sparse row adjacency: the neighbours of row `u` are
/// `cols[offsets[u]..offsets[u + 1]]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Csr {
    pub offsets: Vec<usize>,
    pub cols: Vec<usize>,
}

impl Csr {
    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut cols = Vec::new();
        offsets.push(0);
        for l in lists {
            cols.extend_from_slice(l);
            offsets.push(cols.len());
        }
        Csr { offsets, cols }
    }

    pub fn rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, u: usize) -> &[usize] {
        &self.cols[self.offsets[u]..self.offsets[u + 1]]
    }

    /// Row index of every stored entry, in storage order.
    pub fn row_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.nnz());
        for u in 0..self.rows() {
            ids.extend(std::iter::repeat_n(u, self.offsets[u + 1] - self.offsets[u]));
        }
        ids
    }
}

/// Multi-head attention restricted to CSR neighbourhoods.
///
/// `q`, `k`, `v` are `n × (heads·head_dim)`; head `h` owns columns
/// `[h·head_dim, (h+1)·head_dim)`. Returns the aggregated values and the
/// attention weights laid out as `nnz × heads`.
pub fn neighbor_attention(
    csr: &Csr,
    heads: usize,
    head_dim: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let width = heads * head_dim;
    let n = csr.rows();
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = vec![0.0; n * width];
    let mut alpha = vec![0.0; csr.nnz() * heads];
    for u in 0..n {
        let (lo, hi) = (csr.offsets[u], csr.offsets[u + 1]);
        for h in 0..heads {
            let off = h * head_dim;
            let qu = &q[u * width + off..u * width + off + head_dim];
            let mut max = f64::NEG_INFINITY;
            for e in lo..hi {
                let w = csr.cols[e];
                let kv = &k[w * width + off..w * width + off + head_dim];
                let s = dot(qu, kv) * scale;
                alpha[e * heads + h] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for e in lo..hi {
                let a = (alpha[e * heads + h] - max).exp();
                alpha[e * heads + h] = a;
                total += a;
            }
            let zu = &mut out[u * width + off..u * width + off + head_dim];
            for e in lo..hi {
                let a = alpha[e * heads + h] / total;
                alpha[e * heads + h] = a;
                let w = csr.cols[e];
                let vv = &v[w * width + off..w * width + off + head_dim];
                zu.iter_mut().zip(vv).for_each(|(z, x)| *z += a * x);
            }
        }
    }
    (out, alpha)
}

/// Vector-Jacobian product of [`neighbor_attention`]; accumulates into
/// `dq`, `dk`, `dv` when present.
#[allow(clippy::too_many_arguments)]
pub fn neighbor_attention_backward(
    csr: &Csr,
    heads: usize,
    head_dim: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    alpha: &[f64],
    dout: &[f64],
    mut dq: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut dv: Option<&mut [f64]>,
) {
    let width = heads * head_dim;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut dalpha = Vec::new();
    for u in 0..csr.rows() {
        let (lo, hi) = (csr.offsets[u], csr.offsets[u + 1]);
        for h in 0..heads {
            let off = h * head_dim;
            let gu = &dout[u * width + off..u * width + off + head_dim];
            dalpha.clear();
            let mut weighted = 0.0;
            for e in lo..hi {
                let w = csr.cols[e];
                let a = alpha[e * heads + h];
                let vv = &v[w * width + off..w * width + off + head_dim];
                let da = dot(gu, vv);
                weighted += a * da;
                dalpha.push(da);
                if let Some(dv) = dv.as_deref_mut() {
                    let dvw = &mut dv[w * width + off..w * width + off + head_dim];
                    dvw.iter_mut().zip(gu).for_each(|(d, g)| *d += a * g);
                }
            }
            for (i, e) in (lo..hi).enumerate() {
                let w = csr.cols[e];
                let ds = alpha[e * heads + h] * (dalpha[i] - weighted) * scale;
                if ds == 0.0 {
                    continue;
                }
                if let Some(dq) = dq.as_deref_mut() {
                    let kv = &k[w * width + off..w * width + off + head_dim];
                    let dqu = &mut dq[u * width + off..u * width + off + head_dim];
                    dqu.iter_mut().zip(kv).for_each(|(d, x)| *d += ds * x);
                }
                if let Some(dk) = dk.as_deref_mut() {
                    let qu = &q[u * width + off..u * width + off + head_dim];
                    let dkw = &mut dk[w * width + off..w * width + off + head_dim];
                    dkw.iter_mut().zip(qu).for_each(|(d, x)| *d += ds * x);
                }
            }
        }
    }
}

/// Four independent accumulators so the loop vectorises.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, 0.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(m, k, &a);
        let mut c = vec![1.0; m * n];
        gemm_tn(m, k, n, &at, &b, 1.0, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - 1.0 - y).abs() < 1e-12);
        }
    }

    #[test]
    fn csr_row_ids() {
        let csr = Csr::from_lists(&[vec![0, 1], vec![1], vec![0, 1, 2]]);
        assert_eq!(csr.row_ids(), vec![0, 0, 1, 2, 2, 2]);
        assert_eq!(csr.row(2), &[0, 1, 2]);
    }
}

// Dense loops used by the graph ops. Every output row is computed with the
// same instruction sequence regardless of how many rows are processed, so a
// batched evaluation is bit-identical to the per-row one.

/// `c[n,p] += a[n,m] · b[m,p]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], c: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let crow = &mut c[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = &b[k * p..(k + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    }
}

/// `da[n,m] += dc[n,p] · b[m,p]ᵀ`
pub(crate) fn gemm_a_bt_acc(dc: &[f64], b: &[f64], da: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let dcrow = &dc[i * p..(i + 1) * p];
        for k in 0..m {
            let brow = &b[k * p..(k + 1) * p];
            let mut s = 0.0;
            for (x, y) in dcrow.iter().zip(brow) {
                s += x * y;
            }
            da[i * m + k] += s;
        }
    }
}

/// `db[m,p] += a[n,m]ᵀ · dc[n,p]`
pub(crate) fn gemm_at_b_acc(a: &[f64], dc: &[f64], db: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * m..(i + 1) * m];
        let dcrow = &dc[i * p..(i + 1) * p];
        for (k, &aik) in arow.iter().enumerate() {
            let dbrow = &mut db[k * p..(k + 1) * p];
            for (d, &g) in dbrow.iter_mut().zip(dcrow) {
                *d += aik * g;
            }
        }
    }
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For each element of `out_shape`, the linear index of the element of
/// `in_shape` it is broadcast from.
pub(crate) fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..in_shape.len()).rev() {
        in_strides[i + offset] = if in_shape[i] == 1 { 0 } else { s };
        s *= in_shape[i];
    }
    let total: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut lin = 0usize;
    for _ in 0..total {
        map.push(lin);
        for d in (0..rank).rev() {
            idx[d] += 1;
            lin += in_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            lin -= in_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// (outer, len, inner) decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gathers `src` (shape `shape`) into the axis order `perm`.
pub(crate) fn permute(src: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    for _ in 0..src.len() {
        let mut lin = 0;
        for d in 0..rank {
            lin += idx[d] * src_strides[perm[d]];
        }
        out.push(src[lin]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

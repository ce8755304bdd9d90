//! Raw kernels shared by forward and backward passes.

/// Broadcast result shape under trailing-dimension alignment, or `None`
/// when some aligned pair of extents differs and neither is 1.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (ea, eb) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` laid out against `out`, with 0 on stretched axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[off + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the
/// broadcast output, in row-major output order.
pub(crate) fn for_each_broadcast<F: FnMut(usize, usize, usize)>(
    a: &[usize],
    b: &[usize],
    out: &[usize],
    mut f: F,
) {
    let n: usize = out.iter().product();
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if n == 0 {
        return;
    }
    if na == n && nb == n {
        for i in 0..n {
            f(i, i, i);
        }
        return;
    }
    if nb == 1 && na == n {
        for i in 0..n {
            f(i, i, 0);
        }
        return;
    }
    if na == 1 && nb == n {
        for i in 0..n {
            f(i, 0, i);
        }
        return;
    }
    // b is a contiguous suffix of the output (e.g. a bias row)
    if na == n && is_suffix(b, out) {
        for i in 0..n {
            f(i, i, i % nb);
        }
        return;
    }
    if nb == n && is_suffix(a, out) {
        for i in 0..n {
            f(i, i % na, i);
        }
        return;
    }
    let sa = aligned_strides(a, out);
    let sb = aligned_strides(b, out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for i in 0..n {
        f(i, ia, ib);
        // odometer increment
        let mut d = rank;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

fn is_suffix(small: &[usize], out: &[usize]) -> bool {
    let mut s = small;
    while let Some((&1, rest)) = s.split_first() {
        s = rest;
    }
    s.len() <= out.len() && out[out.len() - s.len()..] == *s
}

/// `c[m×n] += a[m×k] · b[k×n]` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: callers pass buffers whose extents cover the strided views
    // (checked by the tape's shape validation); `c` is dense row-major.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Overflow-free `ln(1 + e^x)`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Storage order of a logical `[rows, cols]` operand.
#[derive(Clone, Copy, Debug)]
pub(crate) enum Layout {
    /// Row-major as given.
    Normal,
    /// The operand is the transpose of a row-major buffer with this many columns.
    Transposed(usize),
}

/// `c[m,n] = a[m,k] · b[k,n] + beta · c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = strides(la, k);
    let (rsb, csb) = strides(lb, n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the asserts above bound every access made through the given strides.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `a[m,k] · b[k,n]` in a freshly allocated row-major buffer.
pub(crate) fn gemm_new(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    if m == 0 || n == 0 || k == 0 {
        return vec![0.0; m * n];
    }
    let (rsa, csa) = strides(la, k);
    let (rsb, csb) = strides(lb, n);
    let mut c = Vec::with_capacity(m * n);
    // SAFETY: with beta = 0 dgemm writes every element of the m×n output
    // without reading it, so the buffer is fully initialised before set_len.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        c.set_len(m * n);
    }
    c
}

fn strides(layout: Layout, cols: usize) -> (isize, isize) {
    match layout {
        Layout::Normal => (cols as isize, 1),
        // logical [i, j] lives at j * stored_cols + i
        Layout::Transposed(stored_cols) => (1, stored_cols as isize),
    }
}

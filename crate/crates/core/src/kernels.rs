//! Slice-level numeric kernels behind the graph operations.
//!
//! Convolution uses the fact that for a row-major `[N, Cin]` signal the receptive
//! field of output step `t` (`K` consecutive rows) is one contiguous run of
//! `K * Cin` values. The im2col matrix is therefore a strided view of the input
//! with row stride `Cin`, and every convolution pass is a single GEMM.

/// Strided matrix view description: `rows x cols`, element `(i, j)` at `i * rs + j * cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn dense(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn extent(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c = alpha * a * b + beta * c`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm row dimension");
    assert_eq!(bv.cols, cv.cols, "gemm column dimension");
    assert!(av.extent() <= a.len() && bv.extent() <= b.len() && cv.extent() <= c.len());
    // Output views must not alias themselves.
    assert!(cv.cs >= 1 && cv.rs >= cv.cols * cv.cs || cv.rows <= 1);
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: extents were checked against the slice lengths above and the
    // output view is non-overlapping.
    unsafe {
        matrixmultiply::dgemm(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub len: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
}

impl ConvDims {
    pub fn out_len(&self) -> usize {
        self.len - self.k + 1
    }
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let t_out = d.out_len();
    let mut out = vec![0.0; d.batch * t_out * d.cout];
    for (b, ob) in out.chunks_exact_mut(t_out * d.cout).enumerate() {
        for row in ob.chunks_exact_mut(d.cout) {
            row.copy_from_slice(bias);
        }
        let xb = &x[b * d.len * d.cin..(b + 1) * d.len * d.cin];
        let cols = View {
            rows: t_out,
            cols: d.k * d.cin,
            rs: d.cin,
            cs: 1,
        };
        gemm(
            1.0,
            xb,
            cols,
            w,
            View::dense(d.k * d.cin, d.cout),
            1.0,
            ob,
            View::dense(t_out, d.cout),
        );
    }
    out
}

/// Accumulates kernel and bias gradients.
pub(crate) fn conv1d_backward_params(
    x: &[f64],
    g: &[f64],
    d: ConvDims,
    gw: &mut [f64],
    gb: &mut [f64],
) {
    let t_out = d.out_len();
    for b in 0..d.batch {
        let xb = &x[b * d.len * d.cin..(b + 1) * d.len * d.cin];
        let gbatch = &g[b * t_out * d.cout..(b + 1) * t_out * d.cout];
        let cols = View {
            rows: t_out,
            cols: d.k * d.cin,
            rs: d.cin,
            cs: 1,
        };
        gemm(
            1.0,
            xb,
            cols.t(),
            gbatch,
            View::dense(t_out, d.cout),
            1.0,
            gw,
            View::dense(d.k * d.cin, d.cout),
        );
        for row in gbatch.chunks_exact(d.cout) {
            for (acc, v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
}

/// Accumulates the input gradient as a full convolution of the output gradient
/// with the time-reversed, transposed kernel.
pub(crate) fn conv1d_backward_input(w: &[f64], g: &[f64], d: ConvDims, gx: &mut [f64]) {
    let t_out = d.out_len();
    let (k, cin, cout) = (d.k, d.cin, d.cout);
    // flipped[(j, o), c] = w[k - 1 - j, c, o]
    let mut flipped = vec![0.0; k * cout * cin];
    for j in 0..k {
        for c in 0..cin {
            for o in 0..cout {
                flipped[(j * cout + o) * cin + c] = w[((k - 1 - j) * cin + c) * cout + o];
            }
        }
    }
    let padded_len = t_out + 2 * (k - 1);
    let mut padded = vec![0.0; padded_len * cout];
    for b in 0..d.batch {
        let gbatch = &g[b * t_out * cout..(b + 1) * t_out * cout];
        padded[(k - 1) * cout..(k - 1 + t_out) * cout].copy_from_slice(gbatch);
        let cols = View {
            rows: d.len,
            cols: k * cout,
            rs: cout,
            cs: 1,
        };
        let gxb = &mut gx[b * d.len * cin..(b + 1) * d.len * cin];
        gemm(
            1.0,
            &padded,
            cols,
            &flipped,
            View::dense(k * cout, cin),
            1.0,
            gxb,
            View::dense(d.len, cin),
        );
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

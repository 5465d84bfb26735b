//! Non-overlapping max-pool downsampling and kernel-equals-stride transposed
//! convolution upsampling.

use crate::error::{Error, Result};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Real, Tensor5};

pub fn check_divisible(spatial: [usize; 3], kernel: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if !spatial[a].is_multiple_of(kernel[a]) {
            return Err(Error::Shape(format!(
                "spatial extent {spatial:?} not divisible by resampling kernel {kernel:?}"
            )));
        }
    }
    Ok(())
}

/// Returns the pooled tensor and, per output element, the flat window offset
/// of the winning input (first maximum wins).
pub fn max_pool<T: Real>(x: &Tensor5<T>, kernel: [usize; 3]) -> Result<(Tensor5<T>, Vec<u8>)> {
    let [n, h, w, d, c] = x.shape();
    check_divisible([h, w, d], kernel)?;
    let [kh, kw, kd] = kernel;
    let (oh, ow, od) = (h / kh, w / kw, d / kd);
    let mut out = Tensor5::zeros([n, oh, ow, od, c]);
    let mut arg = vec![0u8; out.data().len()];
    let mut o = 0;
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for l in 0..od {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut which = 0u8;
                        let mut t = 0u8;
                        for a in 0..kh {
                            for b in 0..kw {
                                for e in 0..kd {
                                    let v = *x.get([ni, i * kh + a, j * kw + b, l * kd + e, ch]);
                                    if v > best {
                                        best = v;
                                        which = t;
                                    }
                                    t += 1;
                                }
                            }
                        }
                        out.data_mut()[o] = best;
                        arg[o] = which;
                        o += 1;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn max_pool_backward<T: Real>(input_shape: [usize; 5], kernel: [usize; 3], arg: &[u8], dy: &Tensor5<T>) -> Tensor5<T> {
    let mut dx = Tensor5::zeros(input_shape);
    let [n, oh, ow, od, c] = dy.shape();
    let [kh, kw, kd] = kernel;
    let mut o = 0;
    for ni in 0..n {
        for i in 0..oh {
            for j in 0..ow {
                for l in 0..od {
                    for ch in 0..c {
                        let t = arg[o] as usize;
                        let (a, b, e) = (t / (kw * kd), (t / kd) % kw, t % kd);
                        *dx.get_mut([ni, i * kh + a, j * kw + b, l * kd + e, ch]) += dy.data()[o];
                        o += 1;
                    }
                }
            }
        }
    }
    dx
}

/// Weights laid out `[c_in][tap][c_out]`; output grows by `kernel` per axis.
pub fn conv_transpose<T: Real>(x: &Tensor5<T>, w: &[T], bias: &[T], kernel: [usize; 3], cout: usize) -> Tensor5<T> {
    let [n, h, wd, d, cin] = x.shape();
    let taps: usize = kernel.iter().product();
    assert_eq!(w.len(), cin * taps * cout);
    let rows = n * h * wd * d;
    let mut expanded = vec![T::zero(); rows * taps * cout];
    matmul(rows, cin, taps * cout, x.data(), w, T::zero(), &mut expanded);
    let [kh, kw, kd] = kernel;
    let mut out = Tensor5::zeros([n, h * kh, wd * kw, d * kd, cout]);
    for (r, block) in expanded.chunks_exact(taps * cout).enumerate() {
        let (ni, i, j, l) = unflatten(r, h, wd, d);
        for (t, vals) in block.chunks_exact(cout).enumerate() {
            let (a, b, e) = (t / (kw * kd), (t / kd) % kw, t % kd);
            let base = out.index([ni, i * kh + a, j * kw + b, l * kd + e, 0]);
            for ((o, &v), &bb) in out.data_mut()[base..base + cout].iter_mut().zip(vals).zip(bias) {
                *o = v + bb;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose_backward<T: Real>(
    x: &Tensor5<T>,
    w: &[T],
    kernel: [usize; 3],
    cout: usize,
    dy: &Tensor5<T>,
    dw: &mut [T],
    db: &mut [T],
    need_dx: bool,
) -> Option<Tensor5<T>> {
    let [n, h, wd, d, cin] = x.shape();
    let taps: usize = kernel.iter().product();
    let [kh, kw, kd] = kernel;
    let rows = n * h * wd * d;
    let mut gathered = vec![T::zero(); rows * taps * cout];
    for (r, block) in gathered.chunks_exact_mut(taps * cout).enumerate() {
        let (ni, i, j, l) = unflatten(r, h, wd, d);
        for (t, vals) in block.chunks_exact_mut(cout).enumerate() {
            let (a, b, e) = (t / (kw * kd), (t / kd) % kw, t % kd);
            let base = dy.index([ni, i * kh + a, j * kw + b, l * kd + e, 0]);
            vals.copy_from_slice(&dy.data()[base..base + cout]);
        }
    }
    for row in dy.data().chunks_exact(cout) {
        for (g, &v) in db.iter_mut().zip(row) {
            *g += v;
        }
    }
    matmul_tn(cin, rows, taps * cout, x.data(), &gathered, T::one(), dw);
    need_dx.then(|| {
        let mut dx = Tensor5::zeros(x.shape());
        matmul_nt(rows, taps * cout, cin, &gathered, w, T::zero(), dx.data_mut());
        dx
    })
}

fn unflatten(r: usize, h: usize, w: usize, d: usize) -> (usize, usize, usize, usize) {
    let l = r % d;
    let r = r / d;
    let j = r % w;
    let r = r / w;
    (r / h, r % h, j, l)
}

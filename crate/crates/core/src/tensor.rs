//! Dense five-axis feature arrays laid out `(batch, height, width, depth, channels)`
//! with channels innermost, plus the scalar trait the network is generic over.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

/// Floating point element type for network math. Training runs in `f32`;
/// gradient verification runs in `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    /// `c = alpha * a·b + beta * c` on strided matrices (see `matrixmultiply`).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 always converts")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("real always converts")
    }
}

macro_rules! impl_real {
    ($t:ty, $f:path) => {
        impl Real for $t {
            #[allow(clippy::too_many_arguments)]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                debug_assert!(a.len() >= extent(m, k, rsa, csa));
                debug_assert!(b.len() >= extent(k, n, rsb, csb));
                debug_assert!(c.len() >= extent(m, n, rsc, csc));
                // SAFETY: extents checked above (in debug) and guaranteed by
                // every caller in this crate, which pass dense buffers.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

fn extent(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs.unsigned_abs() + (cols - 1) * cs.unsigned_abs() + 1
}

/// `c (m×n) = a (m×k) · b (k×n) + beta·c`, all row-major dense.
pub(crate) fn matmul<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

/// `c (m×n) = aᵀ · b + beta·c` where `a` is stored row-major as `k×m`.
pub(crate) fn matmul_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        1,
        m as isize,
        b,
        n as isize,
        1,
        beta,
        c,
        n as isize,
        1,
    );
}

/// `c (m×n) = a · bᵀ + beta·c` where `b` is stored row-major as `n×k`.
pub(crate) fn matmul_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], beta: T, c: &mut [T]) {
    T::gemm(
        m,
        k,
        n,
        T::one(),
        a,
        k as isize,
        1,
        b,
        1,
        k as isize,
        beta,
        c,
        n as isize,
        1,
    );
}

/// Shape `[N, H, W, D, C]`.
pub type Shape5 = [usize; 5];

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor5<T> {
    shape: Shape5,
    data: Vec<T>,
}

impl<T: Real> Tensor5<T> {
    pub fn zeros(shape: Shape5) -> Self {
        assert!(shape.iter().all(|&s| s >= 1), "tensor axes must be >= 1: {shape:?}");
        Self {
            shape,
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape5, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-length axis in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "{} elements for shape {shape:?} (expected {expected})",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn from_fn(shape: Shape5, mut f: impl FnMut([usize; 5]) -> T) -> Self {
        let mut t = Self::zeros(shape);
        let [_, h, w, d, c] = shape;
        for (i, v) in t.data.iter_mut().enumerate() {
            let ci = i % c;
            let r = i / c;
            let di = r % d;
            let r = r / d;
            let wi = r % w;
            let r = r / w;
            let hi = r % h;
            let ni = r / h;
            *v = f([ni, hi, wi, di, ci]);
        }
        t
    }

    pub fn cast<U: Real>(&self) -> Tensor5<U> {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl<T> Tensor5<T> {
    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[4]
    }

    /// Spatial extent `[H, W, D]`.
    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[1], self.shape[2], self.shape[3]]
    }

    /// Voxels per sample.
    pub fn voxels(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, [n, h, w, d, c]: [usize; 5]) -> usize {
        let [_, sh, sw, sd, sc] = self.shape;
        (((n * sh + h) * sw + w) * sd + d) * sc + c
    }

    pub fn get(&self, at: [usize; 5]) -> &T {
        &self.data[self.index(at)]
    }

    pub fn get_mut(&mut self, at: [usize; 5]) -> &mut T {
        let i = self.index(at);
        &mut self.data[i]
    }

    /// Contiguous slice holding sample `n`.
    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.voxels() * self.channels();
        &self.data[n * len..(n + 1) * len]
    }
}

/// Concatenates along the channel axis.
pub fn concat_channels<T: Real>(a: &Tensor5<T>, b: &Tensor5<T>) -> Result<Tensor5<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[..4] != sb[..4] {
        return Err(Error::Shape(format!("cannot concat {sa:?} with {sb:?}")));
    }
    let (ca, cb) = (sa[4], sb[4]);
    let mut out = Vec::with_capacity(a.data.len() + b.data.len());
    for (ra, rb) in a.data.chunks_exact(ca).zip(b.data.chunks_exact(cb)) {
        out.extend_from_slice(ra);
        out.extend_from_slice(rb);
    }
    Tensor5::from_vec([sa[0], sa[1], sa[2], sa[3], ca + cb], out)
}

/// Inverse of [`concat_channels`]: splits off the first `ca` channels.
pub fn split_channels<T: Real>(x: &Tensor5<T>, ca: usize) -> (Tensor5<T>, Tensor5<T>) {
    let s = x.shape();
    let c = s[4];
    assert!(ca < c);
    let cb = c - ca;
    let rows = x.data.len() / c;
    let mut a = Vec::with_capacity(rows * ca);
    let mut b = Vec::with_capacity(rows * cb);
    for r in x.data.chunks_exact(c) {
        a.extend_from_slice(&r[..ca]);
        b.extend_from_slice(&r[ca..]);
    }
    (
        Tensor5 { shape: [s[0], s[1], s[2], s[3], ca], data: a },
        Tensor5 { shape: [s[0], s[1], s[2], s[3], cb], data: b },
    )
}

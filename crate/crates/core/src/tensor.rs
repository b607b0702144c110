//! Dense row-major `f64` tensors and the GEMM entry point used by every
//! matrix-shaped kernel in the crate.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Samples i.i.d. `N(0, std^2)` entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(n, c, h, w)` of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [n, c, h, w] => Ok((n, c, h, w)),
            _ => Err(Error::invalid(format!(
                "expected a rank-4 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Copies out batch item `i` of a rank-4 tensor as a `[1, c, h, w]` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let (n, c, h, w) = self.dims4()?;
        if i >= n {
            return Err(Error::invalid(format!("batch index {i} out of range {n}")));
        }
        let len = c * h * w;
        Tensor::new(&[1, c, h, w], self.data[i * len..(i + 1) * len].to_vec())
    }

    /// Stacks rank-4 tensors with equal `(c, h, w)` along the batch axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("cannot stack an empty list"))?;
        let (_, c, h, w) = first.dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let (tn, tc, th, tw) = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(Error::invalid(format!(
                    "cannot stack {:?} with {:?}",
                    t.shape, first.shape
                )));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(&[n, c, h, w], data)
    }
}

/// Correctly rounded sum of finite values. The result depends only on the
/// multiset of inputs, never on their order. `scratch` is reusable buffer
/// space. Sums whose partial totals approach `f64::MAX` may overflow.
///
/// Error-free extraction: with `σ = 2^k` above `n·max|x|`, every
/// `q = (σ + x) − σ` lands on one grid, so the `q` add up exactly in any
/// order and the remainders `x − q` are exact too. Each level peels off
/// ~50 − log₂ n bits; the few level sums are combined with Shewchuk's
/// partials.
pub fn exact_sum(values: impl IntoIterator<Item = f64>, scratch: &mut Vec<f64>) -> f64 {
    const SIGN: u64 = 1 << 63;
    scratch.clear();
    scratch.extend(values);
    let max_bits = scratch.iter().map(|x| x.to_bits() & !SIGN).max().unwrap_or(0);
    if max_bits == 0 || max_bits >= f64::INFINITY.to_bits() {
        // all zeros (signed-zero rules) or non-finite input
        let values = std::mem::take(scratch);
        return shewchuk_sum(&values, scratch);
    }
    let count_bits = (usize::BITS - (scratch.len() + 2).leading_zeros()) as i32;
    // every remaining |x| < 2^top
    let mut top = ((max_bits >> 52) as i32).max(1) - 1022;
    let mut levels = Vec::new();
    loop {
        let k = top + count_bits;
        if k > 1023 {
            // σ would overflow; the partials handle what is left
            levels.extend_from_slice(scratch);
            break;
        }
        if k < -1022 {
            // below the normal range everything sits on the 2^-1074 grid
            levels.push(scratch.iter().sum());
            break;
        }
        let sigma = pow2(k);
        // any grouping of on-grid values is exact; four lanes for throughput
        let mut lanes = [0.0; 4];
        let mut rest = false;
        let mut chunks = scratch.chunks_exact_mut(4);
        for chunk in &mut chunks {
            for (lane, x) in lanes.iter_mut().zip(chunk) {
                let q = (sigma + *x) - sigma;
                *lane += q;
                *x -= q;
                rest |= *x != 0.0;
            }
        }
        for x in chunks.into_remainder() {
            let q = (sigma + *x) - sigma;
            lanes[0] += q;
            *x -= q;
            rest |= *x != 0.0;
        }
        levels.push((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]));
        if !rest {
            break;
        }
        top = k - 52;
    }
    if let [only] = levels[..] {
        return only;
    }
    shewchuk_sum(&levels, scratch)
}

fn pow2(k: i32) -> f64 {
    f64::from_bits(((k + 1023) as u64) << 52)
}

/// Shewchuk's partials with a final half-even correction.
fn shewchuk_sum(values: &[f64], partials: &mut Vec<f64>) -> f64 {
    partials.clear();
    for &x in values {
        let mut x = x;
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        let y = partials[n - 1];
        n -= 1;
        hi = x + y;
        lo = y - (hi - x);
        if lo != 0.0 {
            break;
        }
    }
    // the remaining partials decide ties in the rounding of hi + lo
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`, all row-major.
///
/// With `a_trans` the buffer `a` holds the `k x m` matrix, likewise `b_trans`
/// means `b` holds `n x k`. When `beta == 0` the prior content of `c` is
/// ignored.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index dgemm touches given these
    // strides, and `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
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
            n as isize,
            1,
        );
    }
}

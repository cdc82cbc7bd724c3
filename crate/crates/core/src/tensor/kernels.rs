use crate::error::{Error, Result};

/// `c = a·b + beta·c` for row/column-strided operands.
///
/// Strides are given as `(row_stride, col_stride)` so transposed views need
/// no copy.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    // Bounds of the strided views, checked once here so the raw-pointer call
    // below cannot read outside the slices.
    let extent =
        |rows: usize, cols: usize, (rs, cs): (isize, isize)| (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(a_strides.0 >= 0 && a_strides.1 >= 0 && b_strides.0 >= 0 && b_strides.1 >= 0);
    assert!((extent(m, k, a_strides) as usize) < a.len());
    assert!((extent(k, n, b_strides) as usize) < b.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Maps flat output offsets of a broadcast result back to operand offsets.
///
/// Broadcasting aligns trailing axes; an operand extent of 1 repeats.
#[derive(Debug, Clone)]
pub(crate) struct BroadcastIndex {
    pub out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
    kind: Kind,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Kind {
    Same,
    /// `b` repeats with period `len(b)` (its shape is a suffix of `a`'s).
    SuffixB(usize),
    SuffixA(usize),
    General,
}

fn strides_for(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

impl BroadcastIndex {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let mut out = vec![0; rank];
        for i in 0..rank {
            let ea = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
            let eb = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
            out[i] = match (ea, eb) {
                (x, y) if x == y => x,
                (1, y) => y,
                (x, 1) => x,
                _ => return Err(Error::dim(format!("cannot broadcast shapes {a:?} and {b:?}"))),
            };
        }
        let kind = if a == b {
            Kind::Same
        } else if a == out.as_slice() && is_suffix(b, &out) {
            Kind::SuffixB(b.iter().product())
        } else if b == out.as_slice() && is_suffix(a, &out) {
            Kind::SuffixA(a.iter().product())
        } else {
            Kind::General
        };
        Ok(Self {
            a_strides: strides_for(a, &out),
            b_strides: strides_for(b, &out),
            out_shape: out,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.out_shape.iter().product()
    }

    /// Calls `f(out, ia, ib)` for each output offset in order.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let n = self.len();
        match self.kind {
            Kind::Same => (0..n).for_each(|i| f(i, i, i)),
            Kind::SuffixB(p) => (0..n).for_each(|i| f(i, i, i % p)),
            Kind::SuffixA(p) => (0..n).for_each(|i| f(i, i % p, i)),
            Kind::General => {
                let rank = self.out_shape.len();
                let mut idx = vec![0usize; rank];
                let (mut ia, mut ib) = (0usize, 0usize);
                for o in 0..n {
                    f(o, ia, ib);
                    for ax in (0..rank).rev() {
                        idx[ax] += 1;
                        ia += self.a_strides[ax];
                        ib += self.b_strides[ax];
                        if idx[ax] < self.out_shape[ax] {
                            break;
                        }
                        ia -= self.a_strides[ax] * idx[ax];
                        ib -= self.b_strides[ax] * idx[ax];
                        idx[ax] = 0;
                    }
                }
            }
        }
    }
}

/// True when `s` equals the trailing axes of `out` after dropping leading 1s.
fn is_suffix(s: &[usize], out: &[usize]) -> bool {
    let trimmed: Vec<usize> = s.iter().copied().skip_while(|&e| e == 1).collect();
    trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposed_view() {
        // a = [[1,2],[3,4]], b viewed as transpose of [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (2, 1), &b, (1, 2), &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn broadcast_general_and_suffix_agree() {
        let bi = BroadcastIndex::new(&[2, 3], &[1, 3]).unwrap();
        let mut pairs = Vec::new();
        bi.for_each(|o, a, b| pairs.push((o, a, b)));
        assert_eq!(pairs[4], (4, 4, 1));
        let bi = BroadcastIndex::new(&[2, 1], &[1, 3]).unwrap();
        assert_eq!(bi.out_shape, vec![2, 3]);
        let mut pairs = Vec::new();
        bi.for_each(|o, a, b| pairs.push((o, a, b)));
        assert_eq!(pairs[5], (5, 1, 2));
        assert!(BroadcastIndex::new(&[2, 3], &[2]).is_err());
    }
}

//! Inner loops shared by the graph forward and backward passes.

/// Maps a flat index of a larger (broadcast) shape onto a smaller one.
#[derive(Clone, Debug)]
pub(crate) enum IndexMap {
    /// `small = (i / inner) % mid`
    Strided { inner: usize, mid: usize },
    Table(Vec<usize>),
}

impl IndexMap {
    /// Builds the map from `big` onto `small`, where `small` broadcasts to `big`
    /// (right-aligned, size-1 axes stretch). Caller has validated compatibility.
    pub fn new(small: &[usize], big: &[usize]) -> Self {
        let offset = big.len() - small.len();
        let dim = |i: usize| if i < offset { 1 } else { small[i - offset] };
        // Look for the pattern 1..1, big[a..b], 1..1.
        let kept: Vec<usize> = (0..big.len()).filter(|&i| dim(i) != 1 || big[i] == 1).collect();
        let contiguous_kept = match (kept.first(), kept.last()) {
            (Some(&lo), Some(&hi)) => (lo..=hi).all(|i| dim(i) == big[i]),
            _ => true,
        };
        if contiguous_kept {
            let (lo, hi) = match (kept.first(), kept.last()) {
                (Some(&lo), Some(&hi)) => (lo, hi + 1),
                _ => (big.len(), big.len()),
            };
            let inner: usize = big[hi..].iter().product();
            let mid: usize = big[lo..hi].iter().product();
            return IndexMap::Strided { inner, mid: mid.max(1) };
        }
        let n: usize = big.iter().product();
        let mut strides = vec![0usize; big.len()];
        let mut acc = 1usize;
        for i in (0..big.len()).rev() {
            let d = dim(i);
            strides[i] = if d == 1 { 0 } else { acc };
            acc *= d;
        }
        let mut table = Vec::with_capacity(n);
        let mut idx = vec![0usize; big.len()];
        let mut off = 0usize;
        for _ in 0..n {
            table.push(off);
            for ax in (0..big.len()).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < big[ax] {
                    break;
                }
                off -= strides[ax] * idx[ax];
                idx[ax] = 0;
            }
        }
        IndexMap::Table(table)
    }

    /// Materializes `src[map(i)]` for `i in 0..n`.
    pub fn expand(&self, src: &[f64], n: usize) -> Vec<f64> {
        match self {
            IndexMap::Strided { inner: 1, mid } if *mid == n => src[..n].to_vec(),
            IndexMap::Strided { inner: 1, mid } => {
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    out.extend_from_slice(&src[..*mid]);
                }
                out
            }
            IndexMap::Strided { inner, mid } => {
                let mut out = Vec::with_capacity(n);
                while out.len() < n {
                    for &v in &src[..*mid] {
                        out.extend(std::iter::repeat_n(v, *inner));
                    }
                }
                out
            }
            IndexMap::Table(t) => t.iter().map(|&j| src[j]).collect(),
        }
    }
}

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// `small[map(i)] += big[i]` for every `i`.
pub(crate) fn reduce_into(small: &mut [f64], big: &[f64], map: &IndexMap) {
    match map {
        IndexMap::Strided { inner: 1, mid } if *mid == big.len() => {
            for (s, b) in small.iter_mut().zip(big) {
                *s += b;
            }
        }
        IndexMap::Strided { inner: 1, mid } => {
            for chunk in big.chunks_exact(*mid) {
                for (s, b) in small.iter_mut().zip(chunk) {
                    *s += b;
                }
            }
        }
        IndexMap::Strided { inner, mid } => {
            for (i, chunk) in big.chunks_exact(*inner).enumerate() {
                small[i % mid] += chunk.iter().sum::<f64>();
            }
        }
        IndexMap::Table(t) => {
            for (i, b) in big.iter().enumerate() {
                small[t[i]] += b;
            }
        }
    }
}

/// Row-major `r x c` matrix view described by pointer strides.
#[derive(Clone, Copy)]
pub(crate) struct MatView {
    pub rs: isize,
    pub cs: isize,
}

impl MatView {
    /// View of a stored row-major block with `cols` columns, optionally transposed.
    pub fn of(cols: usize, transposed: bool) -> Self {
        if transposed {
            MatView { rs: 1, cs: cols as isize }
        } else {
            MatView { rs: cols as isize, cs: 1 }
        }
    }
}

/// `c = beta * c + a * b` with `a: m x k`, `b: k x n`, `c: m x n` (row-major `c`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    av: MatView,
    b: &[f64],
    bv: MatView,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds views of `a`, `b`, `c`; the callers
    // derive them from validated shapes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            av.rs,
            av.cs,
            b.as_ptr(),
            bv.rs,
            bv.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(small: &[usize], big: &[usize]) -> Vec<usize> {
        let offset = big.len() - small.len();
        let n: usize = big.iter().product();
        (0..n)
            .map(|mut i| {
                let mut idx = vec![0; big.len()];
                for ax in (0..big.len()).rev() {
                    idx[ax] = i % big[ax];
                    i /= big[ax];
                }
                let mut off = 0;
                for ax in offset..big.len() {
                    let d = small[ax - offset];
                    off = off * d + if d == 1 { 0 } else { idx[ax] };
                }
                off
            })
            .collect()
    }

    #[test]
    fn index_maps_match_naive_broadcast() {
        let cases: &[(&[usize], &[usize])] = &[
            (&[3], &[2, 3]),
            (&[2, 1], &[2, 3]),
            (&[1], &[4, 5]),
            (&[2, 1, 4], &[2, 3, 4]),
            (&[1, 3, 1], &[2, 3, 4]),
            (&[2, 3, 4], &[2, 3, 4]),
            (&[3, 1], &[2, 3, 5]),
            (&[1, 1], &[1, 1]),
        ];
        for (small, big) in cases {
            let map = IndexMap::new(small, big);
            let n: usize = big.iter().product();
            let src: Vec<f64> = (0..small.iter().product::<usize>()).map(|j| j as f64).collect();
            let got: Vec<usize> = map.expand(&src, n).into_iter().map(|v| v as usize).collect();
            assert_eq!(got, naive(small, big), "{small:?} -> {big:?}");
        }
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[1, 4]), Some(vec![2, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }
}

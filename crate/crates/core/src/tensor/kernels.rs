//! Forward/backward kernels shared by the tape ops.

use super::{lit, strides, Scalar};
use crate::error::{Error, Result};

/// Maps an output flat index to an input flat index under broadcasting.
#[derive(Debug, Clone)]
pub(crate) enum Bcast {
    Same,
    Cycle(usize),
    Map(Vec<usize>),
}

impl Bcast {
    pub fn new(input: &[usize], out: &[usize]) -> Self {
        if input == out {
            return Bcast::Same;
        }
        let trimmed: Vec<usize> = input.iter().copied().skip_while(|&d| d == 1).collect();
        if trimmed.len() <= out.len() && out[out.len() - trimmed.len()..] == trimmed[..] {
            return Bcast::Cycle(trimmed.iter().product::<usize>().max(1));
        }
        let nd = out.len();
        let mut padded = vec![1; nd - input.len()];
        padded.extend_from_slice(input);
        let in_strides = strides(&padded);
        let eff: Vec<usize> = (0..nd)
            .map(|i| if padded[i] == 1 { 0 } else { in_strides[i] })
            .collect();
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; nd];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for d in (0..nd).rev() {
                idx[d] += 1;
                off += eff[d];
                if idx[d] < out[d] {
                    break;
                }
                off -= eff[d] * idx[d];
                idx[d] = 0;
            }
        }
        Bcast::Map(map)
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Cycle(n) => i % n,
            Bcast::Map(m) => m[i],
        }
    }
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd {
            a[i + a.len() - nd]
        } else {
            1
        };
        let db = if i + b.len() >= nd {
            b[i + b.len() - nd]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Sum `g` (shaped like the broadcast output) back onto an input of `numel` elements.
pub(crate) fn reduce_into<F: Scalar>(map: &Bcast, g: &[F], dst: &mut [F]) {
    match map {
        Bcast::Same => dst.iter_mut().zip(g).for_each(|(d, &x)| *d += x),
        _ => {
            for (i, &x) in g.iter().enumerate() {
                dst[map.at(i)] += x;
            }
        }
    }
}

pub(crate) fn check_perm(shape: &[usize], perm: &[usize]) -> Result<()> {
    let mut seen = vec![false; shape.len()];
    if perm.len() != shape.len() {
        return Err(Error::shape("permute", shape, perm));
    }
    for &p in perm {
        if p >= shape.len() || seen[p] {
            return Err(Error::shape("permute", shape, perm));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(crate) fn permute<F: Copy>(
    shape: &[usize],
    data: &[F],
    perm: &[usize],
) -> (Vec<usize>, Vec<F>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let eff: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[derive(Debug, Clone)]
pub(crate) struct MatmulPlan {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub batch: usize,
    pub a_batch: Bcast,
    pub b_batch: Bcast,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", a, b));
        }
        let (ab, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
        let batch_shape = broadcast_shape(ab, bb).ok_or_else(|| Error::shape("matmul", a, b))?;
        let batch = batch_shape.iter().product::<usize>();
        let mut out_shape = batch_shape.clone();
        out_shape.extend([m, n]);
        Ok(Self {
            m,
            k,
            n,
            batch,
            a_batch: Bcast::new(ab, &batch_shape),
            b_batch: Bcast::new(bb, &batch_shape),
            out_shape,
        })
    }

    pub fn forward<F: Scalar>(&self, a: &[F], b: &[F]) -> Vec<F> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut c = vec![F::zero(); self.batch * m * n];
        for bi in 0..self.batch {
            let ai = self.a_batch.at(bi);
            let bj = self.b_batch.at(bi);
            F::gemm(
                m,
                k,
                n,
                &a[ai * m * k..(ai + 1) * m * k],
                k as isize,
                1,
                &b[bj * k * n..(bj + 1) * k * n],
                n as isize,
                1,
                F::zero(),
                &mut c[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
            );
        }
        c
    }

    /// dA += dC·Bᵀ
    pub fn grad_a<F: Scalar>(&self, g: &[F], b: &[F], da: &mut [F]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let ai = self.a_batch.at(bi);
            let bj = self.b_batch.at(bi);
            F::gemm(
                m,
                n,
                k,
                &g[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
                &b[bj * k * n..(bj + 1) * k * n],
                1,
                n as isize,
                F::one(),
                &mut da[ai * m * k..(ai + 1) * m * k],
                k as isize,
                1,
            );
        }
    }

    /// dB += Aᵀ·dC
    pub fn grad_b<F: Scalar>(&self, g: &[F], a: &[F], db: &mut [F]) {
        let (m, k, n) = (self.m, self.k, self.n);
        for bi in 0..self.batch {
            let ai = self.a_batch.at(bi);
            let bj = self.b_batch.at(bi);
            F::gemm(
                k,
                m,
                n,
                &a[ai * m * k..(ai + 1) * m * k],
                1,
                k as isize,
                &g[bi * m * n..(bi + 1) * m * n],
                n as isize,
                1,
                F::one(),
                &mut db[bj * k * n..(bj + 1) * k * n],
                n as isize,
                1,
            );
        }
    }
}

/// (outer, len, inner) decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax<F: Scalar>(x: &[F], shape: &[usize], axis: usize) -> Vec<F> {
    let (outer, len, inner) = axis_split(shape, axis);
    let mut y = vec![F::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = F::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[base + j * inner]);
            }
            let mut sum = F::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - mx).exp();
                y[base + j * inner] = e;
                sum += e;
            }
            let inv = F::one() / sum;
            for j in 0..len {
                y[base + j * inner] *= inv;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<F: Scalar>(
    y: &[F],
    g: &[F],
    shape: &[usize],
    axis: usize,
    dx: &mut [F],
) {
    let (outer, len, inner) = axis_split(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = F::zero();
            for j in 0..len {
                let p = base + j * inner;
                dot += g[p] * y[p];
            }
            for j in 0..len {
                let p = base + j * inner;
                dx[p] += y[p] * (g[p] - dot);
            }
        }
    }
}

/// Normalizes the last axis; returns (output, per-row mean, per-row 1/std).
pub(crate) fn layernorm<F: Scalar>(
    x: &[F],
    width: usize,
    gain: &[F],
    bias: &[F],
    eps: F,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let rows = x.len() / width;
    let mut y = vec![F::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_w = F::one() / lit::<F>(width as f64);
    for r in 0..rows {
        let row = &x[r * width..(r + 1) * width];
        let mean = row.iter().copied().sum::<F>() * inv_w;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_w;
        let rstd = F::one() / (var + eps).sqrt();
        for j in 0..width {
            y[r * width + j] = (row[j] - mean) * rstd * gain[j] + bias[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let half = lit::<F>(0.5);
    half * x * (F::one() + (x * lit::<F>(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub(crate) fn gelu_grad<F: Scalar>(x: F) -> F {
    let half = lit::<F>(0.5);
    let cdf = half * (F::one() + (x * lit::<F>(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * lit::<F>(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub(crate) fn smooth_l1<F: Scalar>(d: F, beta: F) -> F {
    let a = d.abs();
    if a < beta {
        lit::<F>(0.5) * d * d / beta
    } else {
        a - lit::<F>(0.5) * beta
    }
}

pub(crate) fn smooth_l1_grad<F: Scalar>(d: F, beta: F) -> F {
    if d.abs() < beta {
        d / beta
    } else {
        d.signum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[4, 3], &[3]), Some(vec![4, 3]));
        assert_eq!(broadcast_shape(&[4, 1], &[1, 5]), Some(vec![4, 5]));
        assert_eq!(broadcast_shape(&[4, 2], &[3]), None);
    }

    #[test]
    fn bcast_map_matches_cycle() {
        let m = Bcast::new(&[3], &[2, 3]);
        assert!(matches!(m, Bcast::Cycle(3)));
        let col = Bcast::new(&[2, 1], &[2, 3]);
        let offs: Vec<usize> = (0..6).map(|i| col.at(i)).collect();
        assert_eq!(offs, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn permute_roundtrip() {
        let data: Vec<u32> = (0..24).collect();
        let (s, p) = permute(&[2, 3, 4], &data, &[2, 0, 1]);
        assert_eq!(s, vec![4, 2, 3]);
        let (s2, back) = permute(&s, &p, &inverse_perm(&[2, 0, 1]));
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(back, data);
    }

    #[test]
    fn smooth_l1_branches() {
        assert_eq!(smooth_l1(0.5f64, 1.0), 0.125);
        assert_eq!(smooth_l1(2.0f64, 1.0), 1.5);
        assert_eq!(smooth_l1(-2.0f64, 1.0), 1.5);
    }
}

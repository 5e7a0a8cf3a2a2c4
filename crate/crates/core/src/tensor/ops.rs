//! Forward primitives and their reverse-mode rules.
//!
//! Every op validates operand shapes up front (no implicit broadcasting; the
//! only scalar special case is `scale`). Results are recorded on the tape
//! whenever an operand is grad-tracked.

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{shape_err, Element, Tape, Tensor};
use crate::error::{CapError, Result};
use rayon::prelude::*;

/// Input clamp floor for `log`, so KL on near-one-hot outputs stays finite.
pub const LOG_CLAMP: f64 = 1e-12;

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

impl<E: Element> Tape<E> {
    /// c = a @ b for a: [m,k], b: [k,n].
    pub fn matmul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (ad, bd) = (a.dims(), b.dims());
        if ad.len() != 2 || bd.len() != 2 || ad[1] != bd[0] {
            return Err(shape_err("matmul", a, b));
        }
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![E::ZERO; m * n];
        matmul_nn(&a.data(), &b.data(), m, k, n, &mut out);
        let out = Tensor::new(vec![m, n], out)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(
            vec![a.clone(), b.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let mut da = vec![E::ZERO; m * k];
                    matmul_nt(g, &bc.data(), m, n, k, &mut da);
                    sink(0, da);
                }
                if needs[1] {
                    let mut db = vec![E::ZERO; k * n];
                    matmul_tn(&ac.data(), g, m, k, n, &mut db);
                    sink(1, db);
                }
            }),
        );
        Ok(out)
    }

    /// Batched matmul: [nb,m,k] @ [nb,k,n] -> [nb,m,n].
    pub fn bmm(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        let (ad, bd) = (a.dims(), b.dims());
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] || ad[2] != bd[1] {
            return Err(shape_err("bmm", a, b));
        }
        let (nb, m, k, n) = (ad[0], ad[1], ad[2], bd[2]);
        let mut out = vec![E::ZERO; nb * m * n];
        {
            let (av, bv) = (a.data(), b.data());
            out.par_chunks_mut(m * n).enumerate().for_each(|(i, co)| {
                matmul_nn(&av[i * m * k..(i + 1) * m * k], &bv[i * k * n..(i + 1) * k * n], m, k, n, co);
            });
        }
        let out = Tensor::new(vec![nb, m, n], out)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(
            vec![a.clone(), b.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let mut da = vec![E::ZERO; nb * m * k];
                    let bv = bc.data();
                    da.par_chunks_mut(m * k).enumerate().for_each(|(i, dai)| {
                        matmul_nt(&g[i * m * n..(i + 1) * m * n], &bv[i * k * n..(i + 1) * k * n], m, n, k, dai);
                    });
                    sink(0, da);
                }
                if needs[1] {
                    let mut db = vec![E::ZERO; nb * k * n];
                    let av = ac.data();
                    db.par_chunks_mut(k * n).enumerate().for_each(|(i, dbi)| {
                        matmul_tn(&av[i * m * k..(i + 1) * m * k], &g[i * m * n..(i + 1) * m * n], m, k, n, dbi);
                    });
                    sink(1, db);
                }
            }),
        );
        Ok(out)
    }

    pub fn add(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.dims() != b.dims() {
            return Err(shape_err("add", a, b));
        }
        let out: Vec<E> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(a.dims().to_vec(), out)?;
        self.record(
            vec![a.clone(), b.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    sink(0, g.to_vec());
                }
                if needs[1] {
                    sink(1, g.to_vec());
                }
            }),
        );
        Ok(out)
    }

    pub fn sub(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.dims() != b.dims() {
            return Err(shape_err("sub", a, b));
        }
        let out: Vec<E> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x - y).collect();
        let out = Tensor::new(a.dims().to_vec(), out)?;
        self.record(
            vec![a.clone(), b.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    sink(0, g.to_vec());
                }
                if needs[1] {
                    sink(1, g.iter().map(|&v| E::ZERO - v).collect());
                }
            }),
        );
        Ok(out)
    }

    /// Elementwise product.
    pub fn mul(&self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        if a.dims() != b.dims() {
            return Err(shape_err("mul", a, b));
        }
        let out: Vec<E> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(a.dims().to_vec(), out)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(
            vec![a.clone(), b.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    sink(0, g.iter().zip(bc.data().iter()).map(|(&gv, &bv)| gv * bv).collect());
                }
                if needs[1] {
                    sink(1, g.iter().zip(ac.data().iter()).map(|(&gv, &av)| gv * av).collect());
                }
            }),
        );
        Ok(out)
    }

    /// Multiply every entry by a scalar constant.
    pub fn scale(&self, a: &Tensor<E>, factor: E) -> Result<Tensor<E>> {
        let out: Vec<E> = a.data().iter().map(|&x| x * factor).collect();
        let out = Tensor::new(a.dims().to_vec(), out)?;
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    sink(0, g.iter().map(|&v| v * factor).collect());
                }
            }),
        );
        Ok(out)
    }

    /// Add a rank-1 bias to every row of a [..., c] tensor.
    pub fn add_bias(&self, a: &Tensor<E>, bias: &Tensor<E>) -> Result<Tensor<E>> {
        let c = *a.dims().last().unwrap_or(&0);
        if bias.dims().len() != 1 || bias.dims()[0] != c {
            return Err(shape_err("add_bias", a, bias));
        }
        let bl = bias.data();
        let out: Vec<E> = a
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(bl.iter()).map(|(&x, &b)| x + b).collect::<Vec<_>>())
            .collect();
        drop(bl);
        let out = Tensor::new(a.dims().to_vec(), out)?;
        self.record(
            vec![a.clone(), bias.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    sink(0, g.to_vec());
                }
                if needs[1] {
                    let mut db = vec![E::ZERO; c];
                    for row in g.chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d = *d + gv;
                        }
                    }
                    sink(1, db);
                }
            }),
        );
        Ok(out)
    }

    /// Repeat a tensor `count` times along a fresh leading axis.
    pub fn tile(&self, a: &Tensor<E>, count: usize) -> Result<Tensor<E>> {
        if count == 0 {
            return Err(CapError::InvalidArgument("tile count must be positive".into()));
        }
        let len = a.len();
        let av = a.data();
        let mut out = Vec::with_capacity(len * count);
        for _ in 0..count {
            out.extend_from_slice(&av);
        }
        drop(av);
        let mut dims = vec![count];
        dims.extend_from_slice(a.dims());
        let out = Tensor::new(dims, out)?;
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let mut da = vec![E::ZERO; len];
                    for rep in g.chunks(len) {
                        for (d, &gv) in da.iter_mut().zip(rep) {
                            *d = *d + gv;
                        }
                    }
                    sink(0, da);
                }
            }),
        );
        Ok(out)
    }

    pub fn reshape(&self, a: &Tensor<E>, dims: Vec<usize>) -> Result<Tensor<E>> {
        if dims.iter().product::<usize>() != a.len() {
            return Err(CapError::InvalidArgument(format!(
                "reshape {:?} -> {:?} changes element count",
                a.dims(),
                dims
            )));
        }
        let out = Tensor::new(dims, a.to_vec())?;
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    sink(0, g.to_vec());
                }
            }),
        );
        Ok(out)
    }

    /// Permute axes: output axis i takes input axis perm[i].
    pub fn transpose(&self, a: &Tensor<E>, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = a.dims().len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(CapError::InvalidArgument(format!(
                "transpose perm {:?} is not a permutation of rank {}",
                perm, rank
            )));
        }
        let out_dims: Vec<usize> = perm.iter().map(|&p| a.dims()[p]).collect();
        let out = permute(&a.data(), a.dims(), perm);
        let out = Tensor::new(out_dims.clone(), out)?;
        let inv: Vec<usize> = {
            let mut inv = vec![0; rank];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            inv
        };
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    sink(0, permute(g, &out_dims, &inv));
                }
            }),
        );
        Ok(out)
    }

    /// Sum of all entries, as a scalar tensor.
    pub fn sum(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let s: E = a.data().iter().copied().sum();
        let out = Tensor::new(vec![1], vec![s])?;
        let len = a.len();
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    sink(0, vec![g[0]; len]);
                }
            }),
        );
        Ok(out)
    }

    /// Mean of all entries, as a scalar tensor.
    pub fn mean(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let len = a.len();
        let s: E = a.data().iter().copied().sum();
        let inv = E::from_f64(1.0 / len as f64);
        let out = Tensor::new(vec![1], vec![s * inv])?;
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    sink(0, vec![g[0] * inv; len]);
                }
            }),
        );
        Ok(out)
    }

    pub fn relu(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let out: Vec<E> = a.data().iter().map(|&x| x.maxv(E::ZERO)).collect();
        let out = Tensor::new(a.dims().to_vec(), out)?;
        let ac = a.clone();
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let av = ac.data();
                    sink(
                        0,
                        g.iter()
                            .zip(av.iter())
                            .map(|(&gv, &x)| if x > E::ZERO { gv } else { E::ZERO })
                            .collect(),
                    );
                }
            }),
        );
        Ok(out)
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let c0 = E::from_f64(0.7978845608028654); // sqrt(2/pi)
        let c1 = E::from_f64(0.044715);
        let half = E::from_f64(0.5);
        let out: Vec<E> = a
            .data()
            .iter()
            .map(|&x| {
                let t = (c0 * (x + c1 * x * x * x)).tanh();
                half * x * (E::ONE + t)
            })
            .collect();
        let out = Tensor::new(a.dims().to_vec(), out)?;
        let ac = a.clone();
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let av = ac.data();
                    sink(
                        0,
                        g.iter()
                            .zip(av.iter())
                            .map(|(&gv, &x)| {
                                let inner = c0 * (x + c1 * x * x * x);
                                let t = inner.tanh();
                                let sech2 = E::ONE - t * t;
                                let dinner = c0 * (E::ONE + E::from_f64(3.0) * c1 * x * x);
                                gv * (half * (E::ONE + t) + half * x * sech2 * dinner)
                            })
                            .collect(),
                    );
                }
            }),
        );
        Ok(out)
    }

    /// Softmax along `axis`, with max-subtraction for stability.
    pub fn softmax(&self, a: &Tensor<E>, axis: usize) -> Result<Tensor<E>> {
        let dims = a.dims().to_vec();
        if axis >= dims.len() {
            return Err(CapError::InvalidArgument(format!(
                "softmax axis {} out of range for dims {:?}",
                axis, dims
            )));
        }
        let alen = dims[axis];
        if alen == 0 {
            return Err(CapError::InvalidArgument("softmax over empty axis".into()));
        }
        let inner: usize = dims[axis + 1..].iter().product();
        let outer: usize = dims[..axis].iter().product();
        let av = a.data();
        let mut out = vec![E::ZERO; av.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * alen * inner + i;
                let mut mx = av[base];
                for j in 1..alen {
                    mx = mx.maxv(av[base + j * inner]);
                }
                let mut z = E::ZERO;
                for j in 0..alen {
                    let e = (av[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    z = z + e;
                }
                let zi = E::ONE / z;
                for j in 0..alen {
                    out[base + j * inner] = out[base + j * inner] * zi;
                }
            }
        }
        drop(av);
        let out = Tensor::new(dims, out)?;
        let sc = out.clone();
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let s = sc.data();
                    let mut da = vec![E::ZERO; g.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * alen * inner + i;
                            let mut dot = E::ZERO;
                            for j in 0..alen {
                                let k = base + j * inner;
                                dot = g[k].mul_add(s[k], dot);
                            }
                            for j in 0..alen {
                                let k = base + j * inner;
                                da[k] = (g[k] - dot) * s[k];
                            }
                        }
                    }
                    sink(0, da);
                }
            }),
        );
        Ok(out)
    }

    /// Natural log with the input clamped at `LOG_CLAMP` (gradient is zero in
    /// the clamped region).
    pub fn log(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let floor = E::from_f64(LOG_CLAMP);
        let out: Vec<E> = a.data().iter().map(|&x| x.maxv(floor).ln()).collect();
        let out = Tensor::new(a.dims().to_vec(), out)?;
        let ac = a.clone();
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let av = ac.data();
                    sink(
                        0,
                        g.iter()
                            .zip(av.iter())
                            .map(|(&gv, &x)| if x >= floor { gv / x } else { E::ZERO })
                            .collect(),
                    );
                }
            }),
        );
        Ok(out)
    }

    pub fn square(&self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let out: Vec<E> = a.data().iter().map(|&x| x * x).collect();
        let out = Tensor::new(a.dims().to_vec(), out)?;
        let ac = a.clone();
        let two = E::from_f64(2.0);
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let av = ac.data();
                    sink(0, g.iter().zip(av.iter()).map(|(&gv, &x)| two * x * gv).collect());
                }
            }),
        );
        Ok(out)
    }

    /// Layer normalization over the last axis with learnable gain and shift.
    pub fn layer_norm(
        &self,
        x: &Tensor<E>,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>> {
        let c = *x.dims().last().unwrap_or(&0);
        if gamma.dims() != [c] {
            return Err(shape_err("layer_norm", x, gamma));
        }
        if beta.dims() != [c] {
            return Err(shape_err("layer_norm", x, beta));
        }
        let rows = x.len() / c;
        let epsv = E::from_f64(eps);
        let invc = E::from_f64(1.0 / c as f64);
        let xv = x.data();
        let gv = gamma.data();
        let bv = beta.data();
        let mut out = vec![E::ZERO; x.len()];
        let mut xhat = vec![E::ZERO; x.len()];
        let mut rstd = vec![E::ZERO; rows];
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mut mu = E::ZERO;
            for &v in row {
                mu = mu + v;
            }
            mu = mu * invc;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mu;
                var = d.mul_add(d, var);
            }
            var = var * invc;
            let rs = E::ONE / (var + epsv).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mu) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh.mul_add(gv[j], bv[j]);
            }
        }
        drop(xv);
        drop(gv);
        drop(bv);
        let out = Tensor::new(x.dims().to_vec(), out)?;
        let gammac = gamma.clone();
        self.record(
            vec![x.clone(), gamma.clone(), beta.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let gw = gammac.data();
                    let mut dx = vec![E::ZERO; g.len()];
                    for r in 0..rows {
                        let gr = &g[r * c..(r + 1) * c];
                        let xh = &xhat[r * c..(r + 1) * c];
                        let mut m1 = E::ZERO; // mean of dxhat
                        let mut m2 = E::ZERO; // mean of dxhat*xhat
                        for j in 0..c {
                            let dxh = gr[j] * gw[j];
                            m1 = m1 + dxh;
                            m2 = dxh.mul_add(xh[j], m2);
                        }
                        m1 = m1 * invc;
                        m2 = m2 * invc;
                        for j in 0..c {
                            let dxh = gr[j] * gw[j];
                            dx[r * c + j] = rstd[r] * (dxh - m1 - xh[j] * m2);
                        }
                    }
                    sink(0, dx);
                }
                if needs[1] {
                    let mut dg = vec![E::ZERO; c];
                    for r in 0..rows {
                        for j in 0..c {
                            dg[j] = g[r * c + j].mul_add(xhat[r * c + j], dg[j]);
                        }
                    }
                    sink(1, dg);
                }
                if needs[2] {
                    let mut db = vec![E::ZERO; c];
                    for row in g.chunks(c) {
                        for (d, &gv) in db.iter_mut().zip(row) {
                            *d = *d + gv;
                        }
                    }
                    sink(2, db);
                }
            }),
        );
        Ok(out)
    }

    /// Gather rows of `table` ([v,d]) at `indices` -> [indices.len(), d].
    pub fn embedding_lookup(&self, table: &Tensor<E>, indices: &[usize]) -> Result<Tensor<E>> {
        let td = table.dims();
        if td.len() != 2 {
            return Err(CapError::InvalidArgument(format!(
                "embedding_lookup table must be rank 2, got {:?}",
                td
            )));
        }
        let (v, d) = (td[0], td[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= v) {
            return Err(CapError::InvalidArgument(format!(
                "embedding index {} out of range for table rows {}",
                bad, v
            )));
        }
        let tv = table.data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        drop(tv);
        let out = Tensor::new(vec![indices.len(), d], out)?;
        let idx: Vec<usize> = indices.to_vec();
        self.record(
            vec![table.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let mut dt = vec![E::ZERO; v * d];
                    for (row, &i) in idx.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dst = &mut dt[i * d..(i + 1) * d];
                        for (a, &b) in dst.iter_mut().zip(src) {
                            *a = *a + b;
                        }
                    }
                    sink(0, dt);
                }
            }),
        );
        Ok(out)
    }

    /// Concatenate along `axis`; all other extents must match.
    pub fn concat(&self, parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        if parts.is_empty() {
            return Err(CapError::InvalidArgument("concat of zero tensors".into()));
        }
        let rank = parts[0].dims().len();
        if axis >= rank {
            return Err(CapError::InvalidArgument(format!(
                "concat axis {} out of range for rank {}",
                axis, rank
            )));
        }
        for p in parts {
            if p.dims().len() != rank
                || p.dims()
                    .iter()
                    .zip(parts[0].dims())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", parts[0], p));
            }
        }
        let mut dims = parts[0].dims().to_vec();
        let axis_total: usize = parts.iter().map(|p| p.dims()[axis]).sum();
        dims[axis] = axis_total;
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let mut out = vec![E::ZERO; outer * axis_total * inner];
        let mut offset = 0usize;
        let part_extents: Vec<usize> = parts.iter().map(|p| p.dims()[axis]).collect();
        for (p, &ext) in parts.iter().zip(&part_extents) {
            let pv = p.data();
            let block = ext * inner;
            for o in 0..outer {
                let dst = o * axis_total * inner + offset * inner;
                out[dst..dst + block].copy_from_slice(&pv[o * block..(o + 1) * block]);
            }
            offset += ext;
        }
        let out = Tensor::new(dims, out)?;
        self.record(
            parts.iter().map(|&p| p.clone()).collect(),
            &out,
            Box::new(move |g, needs, sink| {
                let mut offset = 0usize;
                for (pi, &ext) in part_extents.iter().enumerate() {
                    if needs[pi] {
                        let block = ext * inner;
                        let mut dp = vec![E::ZERO; outer * block];
                        for o in 0..outer {
                            let src = o * axis_total * inner + offset * inner;
                            dp[o * block..(o + 1) * block].copy_from_slice(&g[src..src + block]);
                        }
                        sink(pi, dp);
                    }
                    offset += ext;
                }
            }),
        );
        Ok(out)
    }

    /// Contiguous slice [start, end) along `axis`.
    pub fn slice(&self, a: &Tensor<E>, axis: usize, start: usize, end: usize) -> Result<Tensor<E>> {
        let dims = a.dims().to_vec();
        if axis >= dims.len() || start >= end || end > dims[axis] {
            return Err(CapError::InvalidArgument(format!(
                "slice [{start},{end}) on axis {axis} invalid for dims {dims:?}"
            )));
        }
        let outer: usize = dims[..axis].iter().product();
        let inner: usize = dims[axis + 1..].iter().product();
        let ext = end - start;
        let av = a.data();
        let mut out = vec![E::ZERO; outer * ext * inner];
        for o in 0..outer {
            let src = o * dims[axis] * inner + start * inner;
            out[o * ext * inner..(o + 1) * ext * inner].copy_from_slice(&av[src..src + ext * inner]);
        }
        drop(av);
        let mut out_dims = dims.clone();
        out_dims[axis] = ext;
        let out = Tensor::new(out_dims, out)?;
        let full_axis = dims[axis];
        let full_len = a.len();
        self.record(
            vec![a.clone()],
            &out,
            Box::new(move |g, needs, sink| {
                if needs[0] {
                    let mut da = vec![E::ZERO; full_len];
                    for o in 0..outer {
                        let dst = o * full_axis * inner + start * inner;
                        da[dst..dst + ext * inner].copy_from_slice(&g[o * ext * inner..(o + 1) * ext * inner]);
                    }
                    sink(0, da);
                }
            }),
        );
        Ok(out)
    }
}

/// Materialize an axis permutation of a row-major buffer.
fn permute<E: Element>(src: &[E], in_dims: &[usize], perm: &[usize]) -> Vec<E> {
    let rank = in_dims.len();
    let in_strides = strides(in_dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| in_dims[p]).collect();
    let mut out = vec![E::ZERO; src.len()];
    // Row-major walk of the output with a multi-index counter.
    let mut midx = vec![0usize; rank];
    let mut src_idx = 0usize;
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    for o in out.iter_mut() {
        *o = src[src_idx];
        for d in (0..rank).rev() {
            midx[d] += 1;
            src_idx += src_strides[d];
            if midx[d] < out_dims[d] {
                break;
            }
            src_idx -= src_strides[d] * out_dims[d];
            midx[d] = 0;
        }
    }
    out
}

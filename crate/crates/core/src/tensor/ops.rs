//! Forward operations and their backward rules.
//!
//! Shape conventions are row-major throughout. Binary elementwise ops accept
//! a right-hand side whose shape is a trailing suffix of the left-hand
//! side's shape; the rhs is tiled over the leading dimensions (this covers
//! bias addition and positional-embedding broadcast without a general
//! broadcasting engine).

use super::{acc_grad, BackFn, Scalar, Tape, TensorId};
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Raw kernels on row-major buffers. All accumulate into `c` (`+=`).
// ---------------------------------------------------------------------------

/// C[m,n] += A[m,k] · B[k,n]
pub(crate) fn mm_nn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// C[m,k] += A[m,n] · B[k,n]ᵀ
pub(crate) fn mm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            c[i * k + p] += s;
        }
    }
}

/// C[k,n] += A[m,k]ᵀ · B[m,n]
pub(crate) fn mm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
}

/// Copy with two axes swapped (used for transposes in forward and backward).
fn swapped_copy<T: Copy>(data: &[T], shape: &[usize], a0: usize, a1: usize) -> Vec<T> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    // Input stride to advance when the corresponding *output* axis increments.
    let mut map_strides = in_strides;
    map_strides.swap(a0, a1);
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..data.len() {
        out.push(data[off]);
        for ax in (0..nd).rev() {
            idx[ax] += 1;
            off += map_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= map_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn is_suffix(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && &lhs[lhs.len() - rhs.len()..] == rhs
}

/// Split a shape at `axis` into (outer, dim, inner) block sizes.
fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<T: Scalar> Tape<T> {
    fn binary_suffix_check(&self, a: TensorId, b: TensorId, op: &str) -> Result<()> {
        if !is_suffix(self.shape(a), self.shape(b)) {
            return Err(Error::Shape(format!(
                "{op}: rhs shape {:?} is not a suffix of lhs shape {:?}",
                self.shape(b),
                self.shape(a)
            )));
        }
        Ok(())
    }

    /// Elementwise `a + b`, rhs broadcast over leading dims of lhs.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_suffix_check(a, b, "add")?;
        let xb = self.data(b);
        let nb = xb.len();
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_exact_mut(nb) {
            for (o, v) in chunk.iter_mut().zip(self.data(b)) {
                *o += *v;
            }
        }
        let (na, ai, bi) = (out.len(), a.0, b.0);
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, ai, na, |buf| {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += *s;
                }
            });
            acc_grad(tr, bi, nb, |buf| {
                for chunk in g.chunks_exact(nb) {
                    for (d, s) in buf.iter_mut().zip(chunk) {
                        *d += *s;
                    }
                }
            });
        });
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Some(back)))
    }

    /// Elementwise `a - b`, rhs broadcast over leading dims of lhs.
    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_suffix_check(a, b, "sub")?;
        let nb = self.numel(b);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_exact_mut(nb) {
            for (o, v) in chunk.iter_mut().zip(self.data(b)) {
                *o -= *v;
            }
        }
        let (na, ai, bi) = (out.len(), a.0, b.0);
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, ai, na, |buf| {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += *s;
                }
            });
            acc_grad(tr, bi, nb, |buf| {
                for chunk in g.chunks_exact(nb) {
                    for (d, s) in buf.iter_mut().zip(chunk) {
                        *d -= *s;
                    }
                }
            });
        });
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Some(back)))
    }

    /// Elementwise `a * b`, rhs broadcast over leading dims of lhs.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary_suffix_check(a, b, "mul")?;
        let nb = self.numel(b);
        let mut out = self.data(a).to_vec();
        for chunk in out.chunks_exact_mut(nb) {
            for (o, v) in chunk.iter_mut().zip(self.data(b)) {
                *o *= *v;
            }
        }
        let (na, ai, bi) = (out.len(), a.0, b.0);
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let xb = &s[bi].data;
            acc_grad(tr, ai, na, |buf| {
                for (i, (d, gv)) in buf.iter_mut().zip(g).enumerate() {
                    *d += *gv * xb[i % nb];
                }
            });
            let xa = &s[ai].data;
            acc_grad(tr, bi, nb, |buf| {
                for (ci, chunk) in g.chunks_exact(nb).enumerate() {
                    for (j, gv) in chunk.iter().enumerate() {
                        buf[j] += *gv * xa[ci * nb + j];
                    }
                }
            });
        });
        let shape = self.shape(a).to_vec();
        Ok(self.push(out, shape, Some(back)))
    }

    /// `x * c` for a compile-time constant factor.
    pub fn scale(&mut self, x: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        let out: Vec<T> = self.data(x).iter().map(|&v| v * cv).collect();
        let (n, xi) = (out.len(), x.0);
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, xi, n, |buf| {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += *s * cv;
                }
            });
        });
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Some(back))
    }

    /// `x + c` for a constant offset.
    pub fn add_scalar(&mut self, x: TensorId, c: f64) -> TensorId {
        let cv = T::from_f64(c);
        let out: Vec<T> = self.data(x).iter().map(|&v| v + cv).collect();
        let (n, xi) = (out.len(), x.0);
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, xi, n, |buf| {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += *s;
                }
            });
        });
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Some(back))
    }

    /// Matrix product.
    ///
    /// Accepted shapes:
    /// * `a: [.., m, k]` × `b: [k, n]` — the shared-weight (linear layer)
    ///   case; leading dims of `a` are flattened into rows.
    /// * `a: [L.., m, k]` × `b: [L.., k, n]` — batched product with equal
    ///   leading dims (attention).
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul: need >=2-d operands, got {sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(Error::Shape(format!("matmul: inner dims differ, {sa:?} x {sb:?}")));
        }
        let (ai, bi) = (a.0, b.0);
        if sb.len() == 2 {
            let rows: usize = sa[..sa.len() - 1].iter().product();
            let mut out = vec![T::zero(); rows * n];
            mm_nn(self.data(a), self.data(b), &mut out, rows, k, n);
            let back: BackFn<T> = Box::new(move |s, g, tr| {
                let (xa, xb) = (&s[ai].data, &s[bi].data);
                acc_grad(tr, ai, rows * k, |buf| mm_nt(g, xb, buf, rows, n, k));
                acc_grad(tr, bi, k * n, |buf| mm_tn(xa, g, buf, rows, k, n));
            });
            let mut shape = sa[..sa.len() - 1].to_vec();
            shape.push(n);
            return Ok(self.push(out, shape, Some(back)));
        }
        if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(Error::Shape(format!(
                "matmul: batched leading dims differ, {sa:?} x {sb:?}"
            )));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (xa, xb) = (self.data(a), self.data(b));
            for t in 0..batch {
                mm_nn(&xa[t * m * k..], &xb[t * k * n..], &mut out[t * m * n..(t + 1) * m * n], m, k, n);
            }
        }
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let (xa, xb) = (&s[ai].data, &s[bi].data);
            acc_grad(tr, ai, batch * m * k, |buf| {
                for t in 0..batch {
                    mm_nt(&g[t * m * n..], &xb[t * k * n..], &mut buf[t * m * k..(t + 1) * m * k], m, n, k);
                }
            });
            acc_grad(tr, bi, batch * k * n, |buf| {
                for t in 0..batch {
                    mm_tn(&xa[t * m * k..], &g[t * m * n..], &mut buf[t * k * n..(t + 1) * k * n], m, k, n);
                }
            });
        });
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.push(m);
        shape.push(n);
        Ok(self.push(out, shape, Some(back)))
    }

    /// Swap two axes (realized copy).
    pub fn swap_axes(&mut self, x: TensorId, a0: usize, a1: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if a0 >= shape.len() || a1 >= shape.len() {
            return Err(Error::Shape(format!("swap_axes({a0},{a1}) out of range for {shape:?}")));
        }
        let out = swapped_copy(self.data(x), &shape, a0, a1);
        let mut out_shape = shape.clone();
        out_shape.swap(a0, a1);
        let (xi, n) = (x.0, out.len());
        let os = out_shape.clone();
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            let gin = swapped_copy(g, &os, a0, a1);
            acc_grad(tr, xi, n, |buf| {
                for (d, s) in buf.iter_mut().zip(&gin) {
                    *d += *s;
                }
            });
        });
        Ok(self.push(out, out_shape, Some(back)))
    }

    /// Transpose the last two axes.
    pub fn transpose_last_two(&mut self, x: TensorId) -> Result<TensorId> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::Shape(format!("transpose: need >=2-d, got {:?}", self.shape(x))));
        }
        self.swap_axes(x, nd - 2, nd - 1)
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshape(&mut self, x: TensorId, new_shape: &[usize]) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::Shape(format!(
                "reshape: {:?} ({} elems) -> {:?} ({} elems)",
                self.shape(x),
                self.numel(x),
                new_shape,
                numel
            )));
        }
        let out = self.data(x).to_vec();
        let (xi, n) = (x.0, out.len());
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, xi, n, |buf| {
                for (d, s) in buf.iter_mut().zip(g) {
                    *d += *s;
                }
            });
        });
        Ok(self.push(out, new_shape.to_vec(), Some(back)))
    }

    /// Tile `x` along a new leading axis: shape `S` -> `[lead, S..]`.
    pub fn expand_leading(&mut self, x: TensorId, lead: usize) -> Result<TensorId> {
        if lead == 0 {
            return Err(Error::Shape("expand_leading: lead must be > 0".into()));
        }
        let nx = self.numel(x);
        let mut out = Vec::with_capacity(nx * lead);
        for _ in 0..lead {
            out.extend_from_slice(self.data(x));
        }
        let xi = x.0;
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, xi, nx, |buf| {
                for chunk in g.chunks_exact(nx) {
                    for (d, s) in buf.iter_mut().zip(chunk) {
                        *d += *s;
                    }
                }
            });
        });
        let mut shape = vec![lead];
        shape.extend_from_slice(self.shape(x));
        Ok(self.push(out, shape, Some(back)))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: TensorId, axis: usize, start: usize, len: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::Shape(format!(
                "narrow: axis {axis} range {start}..{} invalid for {shape:?}",
                start + len
            )));
        }
        let (outer, d, inner) = outer_inner(&shape, axis);
        let data = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&data[base..base + len * inner]);
        }
        let (xi, nx) = (x.0, data.len());
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, xi, nx, |buf| {
                for o in 0..outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut buf[o * d * inner + start * inner..];
                    for (d0, s0) in dst[..len * inner].iter_mut().zip(src) {
                        *d0 += *s0;
                    }
                }
            });
        });
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.push(out, out_shape, Some(back)))
    }

    /// Concatenate along `axis`; all parts must agree on every other axis.
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Shape("concat: empty input list".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat: axis {axis} out of range for {first:?}")));
        }
        let mut dims = Vec::with_capacity(parts.len());
        for &p in parts {
            let sp = self.shape(p);
            if sp.len() != first.len()
                || sp.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Shape(format!(
                    "concat: incompatible shapes {:?} vs {:?} on axis {axis}",
                    sp, first
                )));
            }
            dims.push(sp[axis]);
        }
        let total: usize = dims.iter().sum();
        let (outer, _, inner) = outer_inner(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (pi, &p) in parts.iter().enumerate() {
                let d = dims[pi];
                let data = self.data(p);
                out.extend_from_slice(&data[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let idxs: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let sizes: Vec<usize> = parts.iter().map(|p| self.numel(*p)).collect();
        let dims_c = dims.clone();
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            let mut row_off = 0usize;
            for (pi, &xi) in idxs.iter().enumerate() {
                let d = dims_c[pi];
                acc_grad(tr, xi, sizes[pi], |buf| {
                    for o in 0..outer {
                        let src = &g[(o * total + row_off) * inner..(o * total + row_off + d) * inner];
                        let dst = &mut buf[o * d * inner..(o + 1) * d * inner];
                        for (d0, s0) in dst.iter_mut().zip(src) {
                            *d0 += *s0;
                        }
                    }
                });
                row_off += d;
            }
        });
        let mut out_shape = first;
        out_shape[axis] = total;
        Ok(self.push(out, out_shape, Some(back)))
    }

    /// Row lookup `table[ids]`: `table: [V, D]`, output `[ids.len(), D]`.
    /// Gradient scatter-adds into the table rows.
    pub fn embedding(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("embedding: table must be 2-d, got {shape:?}")));
        }
        let (v, d) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Invalid(format!("embedding: id {bad} out of range (vocab {v})")));
        }
        let data = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let (ti, nt) = (table.0, data.len());
        let ids_c = ids.to_vec();
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, ti, nt, |buf| {
                for (r, &i) in ids_c.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    let dst = &mut buf[i * d..(i + 1) * d];
                    for (d0, s0) in dst.iter_mut().zip(src) {
                        *d0 += *s0;
                    }
                }
            });
        });
        Ok(self.push(out, vec![ids.len(), d], Some(back)))
    }

    /// Per-batch row gather: `x: [B, L, ..]`, `idx[b]` selects rows of batch
    /// `b`; output `[B, K, ..]` where `K = idx[b].len()` (equal across `b`).
    pub fn index_select_batched(&mut self, x: TensorId, idx: &[Vec<usize>]) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape(format!("index_select_batched: need >=2-d, got {shape:?}")));
        }
        let (b, l) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if idx.len() != b {
            return Err(Error::Shape(format!(
                "index_select_batched: {} index lists for batch {b}",
                idx.len()
            )));
        }
        let k = idx[0].len();
        for (bi, list) in idx.iter().enumerate() {
            if list.len() != k {
                return Err(Error::Shape("index_select_batched: ragged index lists".into()));
            }
            if let Some(&bad) = list.iter().find(|&&i| i >= l) {
                return Err(Error::Invalid(format!(
                    "index_select_batched: index {bad} out of range (len {l}) in batch {bi}"
                )));
            }
        }
        if k == 0 {
            return Err(Error::Shape("index_select_batched: empty index lists".into()));
        }
        let data = self.data(x);
        let mut out = Vec::with_capacity(b * k * inner);
        for (bi, list) in idx.iter().enumerate() {
            for &r in list {
                let base = (bi * l + r) * inner;
                out.extend_from_slice(&data[base..base + inner]);
            }
        }
        let (xi, nx) = (x.0, data.len());
        let idx_c: Vec<Vec<usize>> = idx.to_vec();
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, xi, nx, |buf| {
                for (bi, list) in idx_c.iter().enumerate() {
                    for (ri, &r) in list.iter().enumerate() {
                        let src = &g[(bi * k + ri) * inner..(bi * k + ri + 1) * inner];
                        let dst = &mut buf[(bi * l + r) * inner..(bi * l + r + 1) * inner];
                        for (d0, s0) in dst.iter_mut().zip(src) {
                            *d0 += *s0;
                        }
                    }
                }
            });
        });
        let mut out_shape = shape;
        out_shape[1] = k;
        Ok(self.push(out, out_shape, Some(back)))
    }

    /// Sum of all elements (scalar output).
    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s = self.data(x).iter().fold(T::zero(), |acc, &v| acc + v);
        let (xi, n) = (x.0, self.numel(x));
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            let gv = g[0];
            acc_grad(tr, xi, n, |buf| {
                for d in buf.iter_mut() {
                    *d += gv;
                }
            });
        });
        self.push(vec![s], vec![1], Some(back))
    }

    /// Mean of all elements (scalar output).
    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.numel(x);
        let inv = T::from_f64(1.0 / n as f64);
        let s = self.data(x).iter().fold(T::zero(), |acc, &v| acc + v) * inv;
        let xi = x.0;
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            let gv = g[0] * inv;
            acc_grad(tr, xi, n, |buf| {
                for d in buf.iter_mut() {
                    *d += gv;
                }
            });
        });
        self.push(vec![s], vec![1], Some(back))
    }

    /// Mean over one axis (the axis is removed from the shape).
    pub fn mean_axis(&mut self, x: TensorId, axis: usize) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("mean_axis: axis {axis} out of range for {shape:?}")));
        }
        let (outer, d, inner) = outer_inner(&shape, axis);
        let inv = T::from_f64(1.0 / d as f64);
        let data = self.data(x);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for r in 0..d {
                let base = (o * d + r) * inner;
                for j in 0..inner {
                    out[o * inner + j] += data[base + j];
                }
            }
        }
        for v in &mut out {
            *v *= inv;
        }
        let (xi, nx) = (x.0, data.len());
        let back: BackFn<T> = Box::new(move |_s, g, tr| {
            acc_grad(tr, xi, nx, |buf| {
                for o in 0..outer {
                    for r in 0..d {
                        let base = (o * d + r) * inner;
                        for j in 0..inner {
                            buf[base + j] += g[o * inner + j] * inv;
                        }
                    }
                }
            });
        });
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self.push(out, out_shape, Some(back)))
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF via `erf`.
    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        let half = T::from_f64(0.5);
        let inv_sqrt2 = T::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let out: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| v * half * (T::one() + (v * inv_sqrt2).erf()))
            .collect();
        let (xi, n) = (x.0, out.len());
        let inv_sqrt_2pi = T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let xv = &s[xi].data;
            acc_grad(tr, xi, n, |buf| {
                for i in 0..n {
                    let v = xv[i];
                    let phi_cdf = half * (T::one() + (v * inv_sqrt2).erf());
                    let pdf = inv_sqrt_2pi * (-v * v * half).exp();
                    buf[i] += g[i] * (phi_cdf + v * pdf);
                }
            });
        });
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Some(back))
    }

    /// Numerically stable logistic sigmoid.
    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        fn sig<T: Scalar>(v: T) -> T {
            if v >= T::zero() {
                T::one() / (T::one() + (-v).exp())
            } else {
                let e = v.exp();
                e / (T::one() + e)
            }
        }
        let out: Vec<T> = self.data(x).iter().map(|&v| sig(v)).collect();
        let (xi, n) = (x.0, out.len());
        let oi = self.len(); // index the output slot will occupy
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let y = &s[oi].data;
            acc_grad(tr, xi, n, |buf| {
                for i in 0..n {
                    buf[i] += g[i] * y[i] * (T::one() - y[i]);
                }
            });
        });
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Some(back))
    }

    /// Softmax over the last axis (max-subtracted for stability).
    pub fn softmax_last(&mut self, x: TensorId) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("softmax: 0-d input".into()))?;
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(d) {
            let mx = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                sum += *v;
            }
            let inv = T::one() / sum;
            for v in row.iter_mut() {
                *v *= inv;
            }
        }
        let (xi, n) = (x.0, out.len());
        let oi = self.len();
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let y = &s[oi].data;
            acc_grad(tr, xi, n, |buf| {
                for r in 0..n / d {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut dot = T::zero();
                    for j in 0..d {
                        dot += gr[j] * yr[j];
                    }
                    let br = &mut buf[r * d..(r + 1) * d];
                    for j in 0..d {
                        br[j] += yr[j] * (gr[j] - dot);
                    }
                }
            });
        });
        Ok(self.push(out, shape, Some(back)))
    }

    /// Layer normalization over the last axis with affine parameters.
    ///
    /// Uses the population variance (divide by `D`) and a fused backward
    /// rule for `x`, `gamma` and `beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("layer_norm: 0-d input".into()))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::Shape(format!(
                "layer_norm: gamma {:?} / beta {:?} must both be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let epsv = T::from_f64(eps);
        let invd = T::from_f64(1.0 / d as f64);
        let n = self.numel(x);
        let rows = n / d;
        let mut out = vec![T::zero(); n];
        {
            let (xd, gd, bd) = (self.data(x), self.data(gamma), self.data(beta));
            for r in 0..rows {
                let xr = &xd[r * d..(r + 1) * d];
                let mut mu = T::zero();
                for &v in xr {
                    mu += v;
                }
                mu *= invd;
                let mut var = T::zero();
                for &v in xr {
                    let c = v - mu;
                    var += c * c;
                }
                var *= invd;
                let inv_s = T::one() / (var + epsv).sqrt();
                let orow = &mut out[r * d..(r + 1) * d];
                for j in 0..d {
                    orow[j] = (xr[j] - mu) * inv_s * gd[j] + bd[j];
                }
            }
        }
        let (xi, gi, bi) = (x.0, gamma.0, beta.0);
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let (xd, gd) = (&s[xi].data, &s[gi].data);
            // Recompute per-row statistics; cheaper than caching at this scale.
            let mut xhat = vec![T::zero(); d];
            let mut dgamma = vec![T::zero(); d];
            let mut dbeta = vec![T::zero(); d];
            let mut dx = vec![T::zero(); n];
            for r in 0..rows {
                let xr = &xd[r * d..(r + 1) * d];
                let gr = &g[r * d..(r + 1) * d];
                let mut mu = T::zero();
                for &v in xr {
                    mu += v;
                }
                mu *= invd;
                let mut var = T::zero();
                for &v in xr {
                    let c = v - mu;
                    var += c * c;
                }
                var *= invd;
                let inv_s = T::one() / (var + epsv).sqrt();
                let mut m1 = T::zero();
                let mut m2 = T::zero();
                for j in 0..d {
                    xhat[j] = (xr[j] - mu) * inv_s;
                    let h = gr[j] * gd[j];
                    m1 += h;
                    m2 += h * xhat[j];
                    dgamma[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                }
                m1 *= invd;
                m2 *= invd;
                let dxr = &mut dx[r * d..(r + 1) * d];
                for j in 0..d {
                    let h = gr[j] * gd[j];
                    dxr[j] = (h - m1 - xhat[j] * m2) * inv_s;
                }
            }
            acc_grad(tr, xi, n, |buf| {
                for (d0, s0) in buf.iter_mut().zip(&dx) {
                    *d0 += *s0;
                }
            });
            acc_grad(tr, gi, d, |buf| {
                for (d0, s0) in buf.iter_mut().zip(&dgamma) {
                    *d0 += *s0;
                }
            });
            acc_grad(tr, bi, d, |buf| {
                for (d0, s0) in buf.iter_mut().zip(&dbeta) {
                    *d0 += *s0;
                }
            });
        });
        Ok(self.push(out, shape, Some(back)))
    }

    /// Reconstruction objective over selected rows.
    ///
    /// `pred` and `target` share shape `[.., P]`; `mask` has one entry per
    /// row (leading dims flattened), nonzero meaning "count this row". The
    /// loss is the per-row mean squared error averaged over counted rows.
    /// Rows with zero mask receive exactly zero gradient. Returns loss 0 if
    /// the mask counts no rows.
    pub fn masked_mse(&mut self, pred: TensorId, target: TensorId, mask: TensorId) -> Result<TensorId> {
        let shape = self.shape(pred).to_vec();
        if self.shape(target) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "masked_mse: pred {:?} vs target {:?}",
                shape,
                self.shape(target)
            )));
        }
        let p = *shape.last().ok_or_else(|| Error::Shape("masked_mse: 0-d input".into()))?;
        let rows = self.numel(pred) / p;
        if self.numel(mask) != rows {
            return Err(Error::Shape(format!(
                "masked_mse: mask numel {} != rows {rows}",
                self.numel(mask)
            )));
        }
        let (pd, td, md) = (self.data(pred), self.data(target), self.data(mask));
        let mut msum = T::zero();
        for &m in md {
            msum += m;
        }
        let invp = T::from_f64(1.0 / p as f64);
        let loss = if msum == T::zero() {
            T::zero()
        } else {
            let mut acc = T::zero();
            for r in 0..rows {
                if md[r] == T::zero() {
                    continue;
                }
                let mut rowerr = T::zero();
                for j in 0..p {
                    let e = pd[r * p + j] - td[r * p + j];
                    rowerr += e * e;
                }
                acc += md[r] * rowerr * invp;
            }
            acc / msum
        };
        let (pi, ti, mi) = (pred.0, target.0, mask.0);
        let n = rows * p;
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let (pd, td, md) = (&s[pi].data, &s[ti].data, &s[mi].data);
            let mut msum = T::zero();
            for &m in md {
                msum += m;
            }
            if msum == T::zero() {
                return;
            }
            let two = T::from_f64(2.0);
            let coef = g[0] * invp / msum;
            acc_grad(tr, pi, n, |buf| {
                for r in 0..rows {
                    if md[r] == T::zero() {
                        continue;
                    }
                    let c = coef * md[r] * two;
                    for j in 0..p {
                        buf[r * p + j] += c * (pd[r * p + j] - td[r * p + j]);
                    }
                }
            });
        });
        Ok(self.push(vec![loss], vec![1], Some(back)))
    }

    /// Cross-entropy between logit rows and target probability rows
    /// (each target row must sum to 1, e.g. one-hot or label-smoothed).
    /// Mean over rows.
    pub fn cross_entropy_rows(&mut self, logits: TensorId, targets: TensorId) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || self.shape(targets) != shape.as_slice() {
            return Err(Error::Shape(format!(
                "cross_entropy_rows: logits {:?} vs targets {:?} (want matching [B, K])",
                shape,
                self.shape(targets)
            )));
        }
        let (b, k) = (shape[0], shape[1]);
        let (xd, td) = (self.data(logits), self.data(targets));
        let mut loss = T::zero();
        for r in 0..b {
            let row = &xd[r * k..(r + 1) * k];
            let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut lse = T::zero();
            for &v in row {
                lse += (v - mx).exp();
            }
            let lse = lse.ln() + mx;
            let mut dot = T::zero();
            for j in 0..k {
                dot += td[r * k + j] * row[j];
            }
            loss += lse - dot;
        }
        let invb = T::from_f64(1.0 / b as f64);
        loss *= invb;
        let (li, ti) = (logits.0, targets.0);
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let (xd, td) = (&s[li].data, &s[ti].data);
            let coef = g[0] * invb;
            acc_grad(tr, li, b * k, |buf| {
                for r in 0..b {
                    let row = &xd[r * k..(r + 1) * k];
                    let mx = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
                    let mut sum = T::zero();
                    for &v in row {
                        sum += (v - mx).exp();
                    }
                    let inv = T::one() / sum;
                    for j in 0..k {
                        let sm = (row[j] - mx).exp() * inv;
                        buf[r * k + j] += coef * (sm - td[r * k + j]);
                    }
                }
            });
        });
        Ok(self.push(vec![loss], vec![1], Some(back)))
    }

    /// Binary cross-entropy on logits against {0,1} (or soft) targets of the
    /// same shape, averaged over every element. Stable formulation
    /// `max(x,0) - x*t + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: TensorId, targets: TensorId) -> Result<TensorId> {
        if self.shape(logits) != self.shape(targets) {
            return Err(Error::Shape(format!(
                "bce_with_logits: logits {:?} vs targets {:?}",
                self.shape(logits),
                self.shape(targets)
            )));
        }
        let (xd, td) = (self.data(logits), self.data(targets));
        let n = xd.len();
        let invn = T::from_f64(1.0 / n as f64);
        let mut loss = T::zero();
        for i in 0..n {
            let x = xd[i];
            let t = td[i];
            loss += x.max(T::zero()) - x * t + (-x.abs()).exp().ln_1p();
        }
        loss *= invn;
        let (li, ti) = (logits.0, targets.0);
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let (xd, td) = (&s[li].data, &s[ti].data);
            let coef = g[0] * invn;
            acc_grad(tr, li, n, |buf| {
                for i in 0..n {
                    let x = xd[i];
                    let sig = if x >= T::zero() {
                        T::one() / (T::one() + (-x).exp())
                    } else {
                        let e = x.exp();
                        e / (T::one() + e)
                    };
                    buf[i] += coef * (sig - td[i]);
                }
            });
        });
        Ok(self.push(vec![loss], vec![1], Some(back)))
    }

    /// Token-level cross-entropy over selected rows: `logits [N, V]`,
    /// hard targets and an inclusion mask of length `N`. Mean over included
    /// rows; excluded rows get exactly zero gradient.
    pub fn masked_token_ce(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("masked_token_ce: logits must be 2-d, got {shape:?}")));
        }
        let (nrows, v) = (shape[0], shape[1]);
        if targets.len() != nrows || mask.len() != nrows {
            return Err(Error::Shape(format!(
                "masked_token_ce: targets {} / mask {} vs rows {nrows}",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Invalid(format!("masked_token_ce: target {bad} out of range {v}")));
        }
        let m = mask.iter().filter(|&&b| b).count();
        if m == 0 {
            return Err(Error::Invalid("masked_token_ce: mask selects no rows".into()));
        }
        let invm = T::from_f64(1.0 / m as f64);
        let xd = self.data(logits);
        let mut loss = T::zero();
        for r in 0..nrows {
            if !mask[r] {
                continue;
            }
            let row = &xd[r * v..(r + 1) * v];
            let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
            let mut sum = T::zero();
            for &x in row {
                sum += (x - mx).exp();
            }
            loss += sum.ln() + mx - row[targets[r]];
        }
        loss *= invm;
        let li = logits.0;
        let (tg, mk) = (targets.to_vec(), mask.to_vec());
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let xd = &s[li].data;
            let coef = g[0] * invm;
            acc_grad(tr, li, nrows * v, |buf| {
                for r in 0..nrows {
                    if !mk[r] {
                        continue;
                    }
                    let row = &xd[r * v..(r + 1) * v];
                    let mx = row.iter().fold(T::neg_infinity(), |a, &x| a.max(x));
                    let mut sum = T::zero();
                    for &x in row {
                        sum += (x - mx).exp();
                    }
                    let inv = T::one() / sum;
                    for j in 0..v {
                        let sm = (row[j] - mx).exp() * inv;
                        let t = if j == tg[r] { T::one() } else { T::zero() };
                        buf[r * v + j] += coef * (sm - t);
                    }
                }
            });
        });
        Ok(self.push(vec![loss], vec![1], Some(back)))
    }

    /// Elementwise map with caller-provided value and derivative functions.
    /// Exists so tests can wire a deliberately wrong derivative and confirm
    /// the gradient checker catches it.
    pub fn custom_unary(&mut self, x: TensorId, f: fn(f64) -> f64, df: fn(f64) -> f64) -> TensorId {
        let out: Vec<T> = self.data(x).iter().map(|&v| T::from_f64(f(v.to_f64()))).collect();
        let (xi, n) = (x.0, out.len());
        let back: BackFn<T> = Box::new(move |s, g, tr| {
            let xv = &s[xi].data;
            acc_grad(tr, xi, n, |buf| {
                for i in 0..n {
                    buf[i] += g[i] * T::from_f64(df(xv[i].to_f64()));
                }
            });
        });
        let shape = self.shape(x).to_vec();
        self.push(out, shape, Some(back))
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: TensorId) -> TensorId {
        let data = self.data(x).to_vec();
        let shape = self.shape(x).to_vec();
        self.push(data, shape, None)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Tape, TensorId};
    use crate::error::Result;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn add_broadcast_and_backward() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
        let b = t.leaf(vec![10.0, 20.0], vec![2], true).unwrap();
        let c = t.add(a, b).unwrap();
        assert_eq!(t.data(c), &[11.0, 22.0, 13.0, 24.0]);
        let l = t.sum_all(c);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(t.grad(b).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn mul_broadcast_backward() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2], true).unwrap();
        let b = t.leaf(vec![5.0, 7.0], vec![2], true).unwrap();
        let c = t.mul(a, b).unwrap();
        assert_eq!(t.data(c), &[5.0, 14.0, 15.0, 28.0]);
        let l = t.sum_all(c);
        t.backward(l).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[5.0, 7.0, 5.0, 7.0]);
        assert_eq!(t.grad(b).unwrap(), &[4.0, 6.0]); // 1+3, 2+4
    }

    #[test]
    fn matmul_2d_known_values() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3], true).unwrap();
        let b = t.leaf(vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0], vec![3, 2], true).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 2]);
        assert_eq!(t.data(c), &[58.0, 64.0, 139.0, 154.0]);
        let l = t.sum_all(c);
        t.backward(l).unwrap();
        // dA = 1s[2,2] x B^T -> row sums of B rows
        assert_eq!(t.grad(a).unwrap(), &[15.0, 19.0, 23.0, 15.0, 19.0, 23.0]);
        // dB = A^T x 1s[2,2] -> column sums of A
        assert_eq!(t.grad(b).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn matmul_batched_matches_per_sample() {
        let mut t: Tape<f64> = Tape::new();
        let a = t
            .leaf((0..12).map(|i| i as f64 * 0.5 - 2.0).collect(), vec![2, 2, 3], true)
            .unwrap();
        let b = t
            .leaf((0..12).map(|i| (i as f64).sin()).collect(), vec![2, 3, 2], true)
            .unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.shape(c), &[2, 2, 2]);
        // Batch 1, entry (1,0): sum_k a[1,1,k]*b[1,k,0]
        let ad = t.data(a).to_vec();
        let bd = t.data(b).to_vec();
        let mut want = 0.0;
        for k in 0..3 {
            want += ad[6 + 3 + k] * bd[6 + 2 * k];
        }
        assert!(approx(t.data(c)[6], want, 1e-12));
    }

    #[test]
    fn matmul_rejects_bad_inner_dim() {
        let mut t: Tape<f64> = Tape::new();
        let a = t.leaf(vec![0.0; 6], vec![2, 3], false).unwrap();
        let b = t.leaf(vec![0.0; 8], vec![4, 2], false).unwrap();
        assert!(t.matmul(a, b).is_err());
    }

    #[test]
    fn swap_axes_roundtrip_and_known_layout() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf((0..24).map(|v| v as f64).collect(), vec![2, 3, 4], true).unwrap();
        let y = t.swap_axes(x, 0, 1).unwrap();
        assert_eq!(t.shape(y), &[3, 2, 4]);
        // y[i,j,k] == x[j,i,k]
        assert_eq!(t.data(y)[(1 * 2 + 1) * 4 + 2], t.data(x)[(1 * 3 + 1) * 4 + 2]);
        let z = t.swap_axes(y, 0, 1).unwrap();
        assert_eq!(t.data(z), t.data(x));
        let l = t.sum_all(y);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn transpose_last_two_2d() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![2, 3], false).unwrap();
        let y = t.transpose_last_two(x).unwrap();
        assert_eq!(t.shape(y), &[3, 2]);
        assert_eq!(t.data(y), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn narrow_and_concat_are_inverses() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf((0..24).map(|v| v as f64).collect(), vec![2, 4, 3], true).unwrap();
        let a = t.narrow(x, 1, 0, 1).unwrap();
        let b = t.narrow(x, 1, 1, 3).unwrap();
        assert_eq!(t.shape(a), &[2, 1, 3]);
        assert_eq!(t.shape(b), &[2, 3, 3]);
        let y = t.concat(&[a, b], 1).unwrap();
        assert_eq!(t.data(y), t.data(x));
        let l = t.sum_all(y);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn embedding_gathers_and_scatters() {
        let mut t: Tape<f64> = Tape::new();
        let table = t.leaf(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], vec![3, 2], true).unwrap();
        let y = t.embedding(table, &[2, 0, 2]).unwrap();
        assert_eq!(t.data(y), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let l = t.sum_all(y);
        t.backward(l).unwrap();
        // Row 2 selected twice, row 0 once, row 1 never.
        assert_eq!(t.grad(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn index_select_batched_gather_and_grad() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf((0..12).map(|v| v as f64).collect(), vec![2, 3, 2], true).unwrap();
        let y = t.index_select_batched(x, &[vec![2, 0], vec![1, 1]]).unwrap();
        assert_eq!(t.shape(y), &[2, 2, 2]);
        assert_eq!(t.data(y), &[4.0, 5.0, 0.0, 1.0, 8.0, 9.0, 8.0, 9.0]);
        let l = t.sum_all(y);
        t.backward(l).unwrap();
        assert_eq!(
            t.grad(x).unwrap(),
            &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 2.0, 2.0, 0.0, 0.0]
        );
    }

    #[test]
    fn mean_axis_center() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf((0..12).map(|v| v as f64).collect(), vec![2, 3, 2], true).unwrap();
        let y = t.mean_axis(x, 1).unwrap();
        assert_eq!(t.shape(y), &[2, 2]);
        assert_eq!(t.data(y), &[2.0, 3.0, 8.0, 9.0]);
        let l = t.sum_all(y);
        t.backward(l).unwrap();
        assert!(t.grad(x).unwrap().iter().all(|&g| approx(g, 1.0 / 3.0, 1e-15)));
    }

    #[test]
    fn gelu_matches_independent_series_oracle() {
        // erf via its Maclaurin series, implemented independently of the
        // statrs-backed forward path.
        fn erf_series(x: f64) -> f64 {
            let mut term = x;
            let mut sum = x;
            for n in 1..200 {
                let nf = n as f64;
                term *= -x * x / nf;
                sum += term / (2.0 * nf + 1.0);
            }
            sum * 2.0 / std::f64::consts::PI.sqrt()
        }
        let mut t: Tape<f64> = Tape::new();
        let xs = [-2.0, -0.5, 0.0, 0.3, 1.0, 2.5];
        let x = t.leaf(xs.to_vec(), vec![6], false).unwrap();
        let y = t.gelu(x);
        // 1e-9 tolerance: the library erf and the series differ at ~1e-12,
        // while a tanh-approximation GELU would differ at ~1e-4.
        for (i, &v) in xs.iter().enumerate() {
            let want = v * 0.5 * (1.0 + erf_series(v / std::f64::consts::SQRT_2));
            assert!(
                approx(t.data(y)[i], want, 1e-9),
                "gelu({v}) = {} want {want}",
                t.data(y)[i]
            );
        }
        // Frozen spot value.
        assert!(approx(t.data(y)[4], 0.8413447460685429, 1e-9));
    }

    #[test]
    fn sigmoid_stable_at_extremes() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![-1000.0, 0.0, 1000.0], vec![3], false).unwrap();
        let y = t.sigmoid(x);
        assert_eq!(t.data(y)[0], 0.0);
        assert_eq!(t.data(y)[1], 0.5);
        assert_eq!(t.data(y)[2], 1.0);
        assert!(t.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_known_row() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0, 3.0], vec![1, 3], false).unwrap();
        let y = t.softmax_last(x).unwrap();
        let want = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (got, w) in t.data(y).iter().zip(want) {
            assert!(approx(*got, w, 1e-12));
        }
        let sum: f64 = t.data(y).iter().sum();
        assert!(approx(sum, 1.0, 1e-12));
    }

    #[test]
    fn layer_norm_unit_row() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 3.0], vec![1, 2], true).unwrap();
        let g = t.leaf(vec![1.0, 1.0], vec![2], true).unwrap();
        let b = t.leaf(vec![0.0, 0.0], vec![2], true).unwrap();
        let y = t.layer_norm(x, g, b, 0.0).unwrap();
        // mean 2, population var 1 -> normalized to [-1, 1]
        assert!(approx(t.data(y)[0], -1.0, 1e-12));
        assert!(approx(t.data(y)[1], 1.0, 1e-12));
    }

    #[test]
    fn masked_mse_zero_grad_on_visible_rows() {
        let mut t: Tape<f64> = Tape::new();
        let pred = t.leaf(vec![1.0, 2.0, 5.0, 5.0], vec![2, 2], true).unwrap();
        let target = t.constant(vec![0.0, 0.0, 1.0, 1.0], vec![2, 2]).unwrap();
        let mask = t.constant(vec![0.0, 1.0], vec![2]).unwrap();
        let loss = t.masked_mse(pred, target, mask).unwrap();
        // Only row 1 counts: mean((5-1)^2, (5-1)^2) = 16
        assert!(approx(t.data(loss)[0], 16.0, 1e-12));
        t.backward(loss).unwrap();
        let g = t.grad(pred).unwrap();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0);
        assert!(approx(g[2], 4.0, 1e-12)); // 2*(5-1)/2 per element
        assert!(approx(g[3], 4.0, 1e-12));
    }

    #[test]
    fn cross_entropy_rows_matches_manual() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.leaf(vec![1.0, 2.0, 3.0], vec![1, 3], true).unwrap();
        let targets = t.constant(vec![0.0, 0.0, 1.0], vec![1, 3]).unwrap();
        let loss = t.cross_entropy_rows(logits, targets).unwrap();
        let want = -(0.6652409557748219f64).ln();
        assert!(approx(t.data(loss)[0], want, 1e-12));
        t.backward(loss).unwrap();
        let g = t.grad(logits).unwrap();
        assert!(approx(g[0], 0.09003057317038046, 1e-12));
        assert!(approx(g[2], 0.6652409557748219 - 1.0, 1e-12));
    }

    #[test]
    fn bce_with_logits_matches_naive_formula() {
        let mut t: Tape<f64> = Tape::new();
        let x = vec![-3.0, -0.2, 0.0, 2.5];
        let tt = vec![0.0, 1.0, 1.0, 0.0];
        let logits = t.leaf(x.clone(), vec![4], true).unwrap();
        let targets = t.constant(tt.clone(), vec![4]).unwrap();
        let loss = t.bce_with_logits(logits, targets).unwrap();
        let naive: f64 = x
            .iter()
            .zip(&tt)
            .map(|(&xi, &ti)| {
                let p = 1.0 / (1.0 + (-xi).exp());
                -(ti * p.ln() + (1.0 - ti) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 4.0;
        assert!(approx(t.data(loss)[0], naive, 1e-12));
    }

    #[test]
    fn bce_with_logits_finite_at_large_magnitude() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t.leaf(vec![-500.0, 500.0], vec![2], true).unwrap();
        let targets = t.constant(vec![1.0, 0.0], vec![2]).unwrap();
        let loss = t.bce_with_logits(logits, targets).unwrap();
        assert!(t.data(loss)[0].is_finite());
        assert!(approx(t.data(loss)[0], 500.0, 1e-9));
    }

    #[test]
    fn masked_token_ce_ignores_unmasked_rows() {
        let mut t: Tape<f64> = Tape::new();
        let logits = t
            .leaf(vec![0.0, 0.0, 10.0, -10.0, 1.0, 1.0], vec![3, 2], true)
            .unwrap();
        let loss = t
            .masked_token_ce(logits, &[0, 0, 1], &[true, false, true])
            .unwrap();
        // Row 0: ln 2. Row 2: uniform -> ln 2. Mean = ln 2.
        assert!(approx(t.data(loss)[0], (2.0f64).ln(), 1e-12));
        t.backward(loss).unwrap();
        let g = t.grad(logits).unwrap();
        assert_eq!(&g[2..4], &[0.0, 0.0]);
        assert!(g[0] < 0.0 && g[1] > 0.0);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![1.0, 2.0], vec![2], true).unwrap();
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn unreachable_param_gets_zero_grad() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![3.0], vec![1], true).unwrap();
        let unused = t.leaf(vec![7.0, 7.0], vec![2], true).unwrap();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[6.0]);
        assert_eq!(t.grad(unused).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grads_accumulate_across_backward_calls() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![2.0], vec![1], true).unwrap();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[8.0]);
        t.zero_grads();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[4.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t: Tape<f64> = Tape::new();
        let x = t.leaf(vec![3.0], vec![1], true).unwrap();
        let d = t.detach(x);
        let y = t.mul(d, d).unwrap();
        let l = t.sum_all(y);
        t.backward(l).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0]);
    }

    // Shared builder used by the proptest below.
    fn softmax_rows(t: &mut Tape<f64>, vals: &[f64]) -> Result<TensorId> {
        let x = t.leaf(vals.to_vec(), vec![1, vals.len()], false)?;
        t.softmax_last(x)
    }

    proptest::proptest! {
        #[test]
        fn softmax_shift_invariance(vals in proptest::collection::vec(-20.0f64..20.0, 2..8), shift in -30.0f64..30.0) {
            let mut t: Tape<f64> = Tape::new();
            let a = softmax_rows(&mut t, &vals).unwrap();
            let shifted: Vec<f64> = vals.iter().map(|v| v + shift).collect();
            let b = softmax_rows(&mut t, &shifted).unwrap();
            for (x, y) in t.data(a).iter().zip(t.data(b)) {
                proptest::prop_assert!((x - y).abs() < 1e-9);
            }
            let s: f64 = t.data(a).iter().sum();
            proptest::prop_assert!((s - 1.0).abs() < 1e-9);
        }

        #[test]
        fn swap_axes_is_involution(
            b in 1usize..3, l in 1usize..5, d in 1usize..4,
            seed in 0u64..1000
        ) {
            let n = b * l * d;
            let vals: Vec<f64> = (0..n).map(|i| ((i as u64 + seed) as f64).sin()).collect();
            let mut t: Tape<f64> = Tape::new();
            let x = t.leaf(vals.clone(), vec![b, l, d], false).unwrap();
            let y = t.swap_axes(x, 0, 1).unwrap();
            let z = t.swap_axes(y, 0, 1).unwrap();
            proptest::prop_assert_eq!(t.data(z), &vals[..]);
        }
    }
}

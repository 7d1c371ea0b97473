//! Tensor operators: contractions, normalizations, sampling and window
//! rearrangements, with hand-derived backward passes.

use super::{macs, Real, Result, Rng, Tensor, TensorError};

// ---------------------------------------------------------------------------
// Reductions and shape ops
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    pub fn sum(&self) -> Result<Tensor<T>> {
        let s = self.data().iter().fold(T::zero(), |acc, &v| acc + v);
        let n = self.numel();
        Ok(Tensor::from_op(
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |g: &[T]| vec![Some(vec![g[0]; n])]),
        ))
    }

    pub fn mean(&self) -> Result<Tensor<T>> {
        let n = self.numel();
        if n == 0 {
            return Err(TensorError::Dimension("mean of empty tensor".into()));
        }
        Ok(self.sum()?.scale(1.0 / n as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if shape.iter().product::<usize>() != self.numel() {
            return Err(TensorError::Dimension(format!(
                "cannot reshape {:?} to {:?}",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(move |g: &[T]| vec![Some(g.to_vec())]),
        ))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if perm.len() != rank || {
            let mut seen = vec![false; rank];
            perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        } {
            return Err(TensorError::Dimension(format!("invalid permutation {perm:?} for rank {rank}")));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(&self.data(), &in_shape, perm);
        let perm_owned = perm.to_vec();
        Ok(Tensor::from_op(
            out_shape.clone(),
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let mut inv = vec![0usize; perm_owned.len()];
                for (i, &p) in perm_owned.iter().enumerate() {
                    inv[p] = i;
                }
                vec![Some(permute_data(g, &out_shape, &inv))]
            }),
        ))
    }

    /// Slice along the last axis.
    pub fn slice_last(&self, start: usize, len: usize) -> Result<Tensor<T>> {
        let rank = self.shape().len();
        if rank == 0 {
            return Err(TensorError::Dimension("slice_last on scalar".into()));
        }
        let last = self.shape()[rank - 1];
        if start + len > last {
            return Err(TensorError::Index(format!("slice [{start}, {}) out of last dim {last}", start + len)));
        }
        let rows = self.numel() / last;
        let src = self.data();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&src[r * last + start..r * last + start + len]);
        }
        drop(src);
        let mut out_shape = self.shape().to_vec();
        out_shape[rank - 1] = len;
        let in_numel = self.numel();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let mut gx = vec![T::zero(); in_numel];
                for r in 0..rows {
                    gx[r * last + start..r * last + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(TensorError::Dimension("concat of no tensors".into()));
        }
        let rank = parts[0].shape().len();
        if axis >= rank {
            return Err(TensorError::Dimension(format!("concat axis {axis} out of rank {rank}")));
        }
        for p in parts {
            if p.shape().len() != rank
                || p.shape()
                    .iter()
                    .enumerate()
                    .any(|(d, &s)| d != axis && s != parts[0].shape()[d])
            {
                return Err(TensorError::ShapeMismatch {
                    context: "concat".into(),
                    lhs: parts[0].shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_ax = out_shape[axis];
        let mut data = vec![T::zero(); outer * total_ax * inner];
        let mut offset_ax = 0usize;
        for p in parts {
            let ax = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst_base = (o * total_ax + offset_ax) * inner;
                let src_base = o * ax * inner;
                data[dst_base..dst_base + ax * inner].copy_from_slice(&src[src_base..src_base + ax * inner]);
            }
            offset_ax += ax;
        }
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            parts.to_vec(),
            Box::new(move |g: &[T]| {
                let mut grads = Vec::with_capacity(sizes.len());
                let mut offset_ax = 0usize;
                for &ax in &sizes {
                    let mut gp = vec![T::zero(); outer * ax * inner];
                    for o in 0..outer {
                        let src_base = (o * total_ax + offset_ax) * inner;
                        let dst_base = o * ax * inner;
                        gp[dst_base..dst_base + ax * inner].copy_from_slice(&g[src_base..src_base + ax * inner]);
                    }
                    grads.push(Some(gp));
                    offset_ax += ax;
                }
                grads
            }),
        ))
    }
}

fn permute_data<T: Real>(src: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let numel: usize = in_shape.iter().product();
    let mut out = vec![T::zero(); numel];
    let mut idx = vec![0usize; rank];
    for item in out.iter_mut() {
        let mut src_off = 0usize;
        for d in 0..rank {
            src_off += idx[d] * in_strides[perm[d]];
        }
        *item = src[src_off];
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

/// out[n,p] += a[n,k] * b[k,p]
fn mm_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            for j in 0..p {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

/// out[n,k] += a[n,p] * b[k,p]  (a @ b^T)
fn mm_nt_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * p..(i + 1) * p];
        let orow = &mut out[i * k..(i + 1) * k];
        for (kk, o) in orow.iter_mut().enumerate() {
            let brow = &b[kk * p..(kk + 1) * p];
            let mut acc = T::zero();
            for j in 0..p {
                acc = acc + arow[j] * brow[j];
            }
            *o = *o + acc;
        }
    }
}

/// out[k,p] += a[n,k] * b[n,p]  (a^T @ b)
fn mm_tn_acc<T: Real>(a: &[T], b: &[T], out: &mut [T], n: usize, k: usize, p: usize) {
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * p..(kk + 1) * p];
            for j in 0..p {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
}

impl<T: Real> Tensor<T> {
    /// Batched matrix product `[B,N,K] x [B,K,P] -> [B,N,P]`; a batch of 1
    /// broadcasts against the other operand.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), rhs.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[2] != sb[1] || (sa[0] != sb[0] && sa[0] != 1 && sb[0] != 1) {
            return Err(TensorError::ShapeMismatch {
                context: "matmul".into(),
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (ba, n, k) = (sa[0], sa[1], sa[2]);
        let (bb, p) = (sb[0], sb[2]);
        let batch = ba.max(bb);
        let mut data = vec![T::zero(); batch * n * p];
        {
            let a = self.data();
            let b = rhs.data();
            for bi in 0..batch {
                let av = &a[if ba == 1 { 0 } else { bi } * n * k..][..n * k];
                let bv = &b[if bb == 1 { 0 } else { bi } * k * p..][..k * p];
                mm_acc(av, bv, &mut data[bi * n * p..(bi + 1) * n * p], n, k, p);
            }
        }
        macs::add((batch * n * k * p) as u64);
        let lhs_t = self.clone();
        let rhs_t = rhs.clone();
        Ok(Tensor::from_op(
            vec![batch, n, p],
            data,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g: &[T]| {
                let a = lhs_t.data();
                let b = rhs_t.data();
                let mut ga = vec![T::zero(); ba * n * k];
                let mut gb = vec![T::zero(); bb * k * p];
                for bi in 0..batch {
                    let ia = if ba == 1 { 0 } else { bi };
                    let ib = if bb == 1 { 0 } else { bi };
                    let gv = &g[bi * n * p..(bi + 1) * n * p];
                    // dA = g @ B^T, dB = A^T @ g
                    mm_nt_acc(gv, &b[ib * k * p..][..k * p], &mut ga[ia * n * k..][..n * k], n, k, p);
                    mm_tn_acc(&a[ia * n * k..][..n * k], gv, &mut gb[ib * k * p..][..k * p], n, k, p);
                }
                vec![Some(ga), Some(gb)]
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    /// Cross-correlation with zero padding. `x: [B,Cin,H,W]`,
    /// `w: [Cout,Cin/groups,k,k]`.
    pub fn conv2d(
        &self,
        weight: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(TensorError::Dimension(format!("conv2d expects 4-D x and w, got {xs:?} and {ws:?}")));
        }
        let (b, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw || kh % 2 == 0 {
            return Err(TensorError::Dimension(format!("conv2d requires odd square kernels, got {kh}x{kw}")));
        }
        if cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(TensorError::Dimension(format!(
                "conv2d channel/group mismatch: cin={cin}, cout={cout}, groups={groups}, w per-group cin={cin_g}"
            )));
        }
        if let Some(bi) = bias {
            if bi.shape() != [cout] {
                return Err(TensorError::ShapeMismatch {
                    context: "conv2d bias".into(),
                    lhs: vec![cout],
                    rhs: bi.shape().to_vec(),
                });
            }
        }
        if stride == 0 {
            return Err(TensorError::Dimension("conv2d stride must be >= 1".into()));
        }
        let k = kh;
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let mut out = vec![T::zero(); b * cout * oh * ow];
        {
            let x = self.data();
            let wv = weight.data();
            if let Some(bi) = bias {
                let bv = bi.data();
                for bb in 0..b {
                    for oc in 0..cout {
                        out[(bb * cout + oc) * oh * ow..][..oh * ow].fill(bv[oc]);
                    }
                }
            }
            conv_forward(&x, &wv, &mut out, b, cin, h, w, cout, k, stride, padding, groups);
        }
        macs::add((b * oh * ow * cout * cin_g * k * k) as u64);
        let x_t = self.clone();
        let w_t = weight.clone();
        let has_bias = bias.is_some();
        let mut inputs = vec![self.clone(), weight.clone()];
        if let Some(bi) = bias {
            inputs.push(bi.clone());
        }
        Ok(Tensor::from_op(
            vec![b, cout, oh, ow],
            out,
            inputs,
            Box::new(move |g: &[T]| {
                let x = x_t.data();
                let wv = w_t.data();
                let mut gx = vec![T::zero(); b * cin * h * w];
                let mut gw = vec![T::zero(); cout * (cin / groups) * k * k];
                conv_backward(&x, &wv, g, &mut gx, &mut gw, b, cin, h, w, cout, k, stride, padding, groups);
                let mut grads = vec![Some(gx), Some(gw)];
                if has_bias {
                    let mut gb = vec![T::zero(); cout];
                    for bb in 0..b {
                        for oc in 0..cout {
                            let plane = &g[(bb * cout + oc) * oh * ow..][..oh * ow];
                            gb[oc] = plane.iter().fold(gb[oc], |acc, &v| acc + v);
                        }
                    }
                    grads.push(Some(gb));
                }
                grads
            }),
        ))
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_forward<T: Real>(
    x: &[T],
    w: &[T],
    out: &mut [T],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) {
    let cin_g = cin / groups;
    let cog = cout / groups;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    for bb in 0..b {
        for oc in 0..cout {
            let grp = oc / cog;
            let oplane = &mut out[(bb * cout + oc) * oh * ow..][..oh * ow];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xplane = &x[(bb * cin + ic) * h * wd..][..h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[((oc * cin_g + icg) * k + ky) * k + kx];
                        if stride == 1 {
                            let oy0 = padding.saturating_sub(ky);
                            let oy1 = (h + padding - ky).min(oh);
                            let ox0 = padding.saturating_sub(kx);
                            let ox1 = (wd + padding - kx).min(ow);
                            for oy in oy0..oy1 {
                                let iy = oy + ky - padding;
                                let xrow = &xplane[iy * wd..];
                                let orow = &mut oplane[oy * ow..];
                                for ox in ox0..ox1 {
                                    orow[ox] = orow[ox] + wv * xrow[ox + kx - padding];
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    oplane[oy * ow + ox] =
                                        oplane[oy * ow + ox] + wv * xplane[iy as usize * wd + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    gx: &mut [T],
    gw: &mut [T],
    b: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
) {
    let cin_g = cin / groups;
    let cog = cout / groups;
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (wd + 2 * padding - k) / stride + 1;
    for bb in 0..b {
        for oc in 0..cout {
            let grp = oc / cog;
            let gplane = &g[(bb * cout + oc) * oh * ow..][..oh * ow];
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xplane = &x[(bb * cin + ic) * h * wd..][..h * wd];
                let gxplane = &mut gx[(bb * cin + ic) * h * wd..][..h * wd];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((oc * cin_g + icg) * k + ky) * k + kx;
                        let wv = w[widx];
                        let mut wacc = T::zero();
                        if stride == 1 {
                            let oy0 = padding.saturating_sub(ky);
                            let oy1 = (h + padding - ky).min(oh);
                            let ox0 = padding.saturating_sub(kx);
                            let ox1 = (wd + padding - kx).min(ow);
                            for oy in oy0..oy1 {
                                let iy = oy + ky - padding;
                                let grow = &gplane[oy * ow..];
                                let xrow = &xplane[iy * wd..];
                                let gxrow = &mut gxplane[iy * wd..];
                                for ox in ox0..ox1 {
                                    let ix = ox + kx - padding;
                                    let gv = grow[ox];
                                    wacc = wacc + gv * xrow[ix];
                                    gxrow[ix] = gxrow[ix] + gv * wv;
                                }
                            }
                        } else {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    let gv = gplane[oy * ow + ox];
                                    wacc = wacc + gv * xplane[iy as usize * wd + ix as usize];
                                    gxplane[iy as usize * wd + ix as usize] =
                                        gxplane[iy as usize * wd + ix as usize] + gv * wv;
                                }
                            }
                        }
                        gw[widx] = gw[widx] + wacc;
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Softmax and layer norm
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Dimension(format!("softmax axis {axis} out of rank {}", shape.len())));
        }
        let ax = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let src = self.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * ax * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..ax {
                    mx = mx.max(src[base + j * inner]);
                }
                let mut sum = T::zero();
                for j in 0..ax {
                    let e = (src[base + j * inner] - mx).exp();
                    out[base + j * inner] = e;
                    sum = sum + e;
                }
                for j in 0..ax {
                    out[base + j * inner] = out[base + j * inner] / sum;
                }
            }
        }
        drop(src);
        let saved = out.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * ax * inner + i;
                        let mut dot = T::zero();
                        for j in 0..ax {
                            dot = dot + g[base + j * inner] * saved[base + j * inner];
                        }
                        for j in 0..ax {
                            let y = saved[base + j * inner];
                            gx[base + j * inner] = y * (g[base + j * inner] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalize along `axis` to zero mean / unit variance, then scale and
    /// shift with per-slot `gain`/`shift` of length `shape[axis]`.
    pub fn layer_norm(&self, gain: &Tensor<T>, shift: &Tensor<T>, eps: f64, axis: usize) -> Result<Tensor<T>> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Dimension(format!("layer_norm axis {axis} out of rank {}", shape.len())));
        }
        let c = shape[axis];
        if gain.shape() != [c] || shift.shape() != [c] {
            return Err(TensorError::ShapeMismatch {
                context: "layer_norm gain/shift".into(),
                lhs: vec![c],
                rhs: gain.shape().to_vec(),
            });
        }
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let nrows = outer * inner;
        let src = self.data();
        let gv = gain.data();
        let sv = shift.data();
        let mut out = vec![T::zero(); src.len()];
        let mut xhat = vec![T::zero(); src.len()];
        let mut invstd = vec![T::zero(); nrows];
        let epst = T::from_f64(eps);
        let cn = T::from_f64(c as f64);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * c * inner + i;
                let mut mean = T::zero();
                for j in 0..c {
                    mean = mean + src[base + j * inner];
                }
                mean = mean / cn;
                let mut var = T::zero();
                for j in 0..c {
                    let d = src[base + j * inner] - mean;
                    var = var + d * d;
                }
                var = var / cn;
                let istd = T::one() / (var + epst).sqrt();
                invstd[o * inner + i] = istd;
                for j in 0..c {
                    let xh = (src[base + j * inner] - mean) * istd;
                    xhat[base + j * inner] = xh;
                    out[base + j * inner] = xh * gv[j] + sv[j];
                }
            }
        }
        drop(src);
        drop(gv);
        drop(sv);
        let gain_t = gain.clone();
        Ok(Tensor::from_op(
            shape,
            out,
            vec![self.clone(), gain.clone(), shift.clone()],
            Box::new(move |g: &[T]| {
                let gv = gain_t.data();
                let mut gx = vec![T::zero(); g.len()];
                let mut ggain = vec![T::zero(); c];
                let mut gshift = vec![T::zero(); c];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * c * inner + i;
                        let istd = invstd[o * inner + i];
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for j in 0..c {
                            let dy = g[base + j * inner] * gv[j];
                            let xh = xhat[base + j * inner];
                            sum_dy = sum_dy + dy;
                            sum_dy_xhat = sum_dy_xhat + dy * xh;
                            ggain[j] = ggain[j] + g[base + j * inner] * xh;
                            gshift[j] = gshift[j] + g[base + j * inner];
                        }
                        for j in 0..c {
                            let dy = g[base + j * inner] * gv[j];
                            let xh = xhat[base + j * inner];
                            gx[base + j * inner] = istd * (dy - sum_dy / cn - xh * sum_dy_xhat / cn);
                        }
                    }
                }
                vec![Some(gx), Some(ggain), Some(gshift)]
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Bilinear grid sampling (deformable warp)
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    /// Sample `x` at `(i + dy, j + dx)` per pixel with bilinear interpolation
    /// and clamp-to-border handling. `offsets: [B,2,H,W]` (channel 0 = dy,
    /// channel 1 = dx, pixel units).
    pub fn grid_sample_bilinear(&self, offsets: &Tensor<T>) -> Result<Tensor<T>> {
        let xs = self.shape();
        let os = offsets.shape();
        if xs.len() != 4 || os.len() != 4 || os[1] != 2 || os[0] != xs[0] || os[2] != xs[2] || os[3] != xs[3] {
            return Err(TensorError::ShapeMismatch {
                context: "grid_sample_bilinear".into(),
                lhs: xs.to_vec(),
                rhs: os.to_vec(),
            });
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        // Per pixel: y0/x0 corner, fractional weights, and clamp flags for the
        // offset gradient.
        struct Samp {
            y0: usize,
            x0: usize,
            y1: usize,
            x1: usize,
            fy: f64,
            fx: f64,
            dy_live: bool,
            dx_live: bool,
        }
        let mut samples = Vec::with_capacity(b * h * w);
        {
            let off = offsets.data();
            for bb in 0..b {
                for i in 0..h {
                    for j in 0..w {
                        let dy = off[((bb * 2) * h + i) * w + j].to_f64();
                        let dx = off[((bb * 2 + 1) * h + i) * w + j].to_f64();
                        let sy_raw = i as f64 + dy;
                        let sx_raw = j as f64 + dx;
                        let sy = sy_raw.clamp(0.0, (h - 1) as f64);
                        let sx = sx_raw.clamp(0.0, (w - 1) as f64);
                        let y0 = sy.floor() as usize;
                        let x0 = sx.floor() as usize;
                        let y1 = (y0 + 1).min(h - 1);
                        let x1 = (x0 + 1).min(w - 1);
                        samples.push(Samp {
                            y0,
                            x0,
                            y1,
                            x1,
                            fy: sy - y0 as f64,
                            fx: sx - x0 as f64,
                            dy_live: (0.0..=(h - 1) as f64).contains(&sy_raw),
                            dx_live: (0.0..=(w - 1) as f64).contains(&sx_raw),
                        });
                    }
                }
            }
        }
        let mut out = vec![T::zero(); b * c * h * w];
        {
            let x = self.data();
            for bb in 0..b {
                for cc in 0..c {
                    let plane = &x[(bb * c + cc) * h * w..][..h * w];
                    let oplane = &mut out[(bb * c + cc) * h * w..][..h * w];
                    for (pix, s) in samples[bb * h * w..(bb + 1) * h * w].iter().enumerate() {
                        let (fy, fx) = (T::from_f64(s.fy), T::from_f64(s.fx));
                        let one = T::one();
                        let v00 = plane[s.y0 * w + s.x0];
                        let v01 = plane[s.y0 * w + s.x1];
                        let v10 = plane[s.y1 * w + s.x0];
                        let v11 = plane[s.y1 * w + s.x1];
                        oplane[pix] = (one - fy) * ((one - fx) * v00 + fx * v01) + fy * ((one - fx) * v10 + fx * v11);
                    }
                }
            }
        }
        let samples = std::rc::Rc::new(samples);
        let x_t = self.clone();
        let samples_b = samples.clone();
        Ok(Tensor::from_op(
            vec![b, c, h, w],
            out,
            vec![self.clone(), offsets.clone()],
            Box::new(move |g: &[T]| {
                let x = x_t.data();
                let mut gx = vec![T::zero(); b * c * h * w];
                let mut goff = vec![T::zero(); b * 2 * h * w];
                for bb in 0..b {
                    for cc in 0..c {
                        let plane = &x[(bb * c + cc) * h * w..][..h * w];
                        let gxplane = &mut gx[(bb * c + cc) * h * w..][..h * w];
                        let gplane = &g[(bb * c + cc) * h * w..][..h * w];
                        for (pix, s) in samples_b[bb * h * w..(bb + 1) * h * w].iter().enumerate() {
                            let gv = gplane[pix];
                            let (fy, fx) = (T::from_f64(s.fy), T::from_f64(s.fx));
                            let one = T::one();
                            gxplane[s.y0 * w + s.x0] = gxplane[s.y0 * w + s.x0] + gv * (one - fy) * (one - fx);
                            gxplane[s.y0 * w + s.x1] = gxplane[s.y0 * w + s.x1] + gv * (one - fy) * fx;
                            gxplane[s.y1 * w + s.x0] = gxplane[s.y1 * w + s.x0] + gv * fy * (one - fx);
                            gxplane[s.y1 * w + s.x1] = gxplane[s.y1 * w + s.x1] + gv * fy * fx;
                            let v00 = plane[s.y0 * w + s.x0];
                            let v01 = plane[s.y0 * w + s.x1];
                            let v10 = plane[s.y1 * w + s.x0];
                            let v11 = plane[s.y1 * w + s.x1];
                            if s.dy_live {
                                let dady = (v10 - v00) * (one - fx) + (v11 - v01) * fx;
                                let idx = ((bb * 2) * h * w) + pix;
                                goff[idx] = goff[idx] + gv * dady;
                            }
                            if s.dx_live {
                                let dadx = (v01 - v00) * (one - fy) + (v11 - v10) * fy;
                                let idx = ((bb * 2 + 1) * h * w) + pix;
                                goff[idx] = goff[idx] + gv * dadx;
                            }
                        }
                    }
                }
                vec![Some(gx), Some(goff)]
            }),
        ))
    }
}

// ---------------------------------------------------------------------------
// Depth-to-space and windowing
// ---------------------------------------------------------------------------

impl<T: Real> Tensor<T> {
    /// Depth-to-space: `[B, C*s^2, H, W] -> [B, C, sH, sW]`.
    pub fn pixel_shuffle(&self, s: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::Dimension(format!("pixel_shuffle expects 4-D, got {xs:?}")));
        }
        let (b, c_in, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if s == 0 || c_in % (s * s) != 0 {
            return Err(TensorError::Dimension(format!(
                "pixel_shuffle: {c_in} channels not divisible by s^2 = {}",
                s * s
            )));
        }
        let c = c_in / (s * s);
        let src = self.data();
        let mut out = vec![T::zero(); b * c * h * s * w * s];
        for bb in 0..b {
            for cc in 0..c {
                for dy in 0..s {
                    for dx in 0..s {
                        let ic = cc * s * s + dy * s + dx;
                        let iplane = &src[(bb * c_in + ic) * h * w..][..h * w];
                        for y in 0..h {
                            for x in 0..w {
                                out[((bb * c + cc) * h * s + (y * s + dy)) * w * s + (x * s + dx)] =
                                    iplane[y * w + x];
                            }
                        }
                    }
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![b, c, h * s, w * s],
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let mut gx = vec![T::zero(); b * c_in * h * w];
                for bb in 0..b {
                    for cc in 0..c {
                        for dy in 0..s {
                            for dx in 0..s {
                                let ic = cc * s * s + dy * s + dx;
                                for y in 0..h {
                                    for x in 0..w {
                                        gx[(bb * c_in + ic) * h * w + y * w + x] =
                                            g[((bb * c + cc) * h * s + (y * s + dy)) * w * s + (x * s + dx)];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Space-to-depth inverse of [`Tensor::pixel_shuffle`].
    pub fn pixel_unshuffle(&self, s: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::Dimension(format!("pixel_unshuffle expects 4-D, got {xs:?}")));
        }
        let (b, c, hs, ws) = (xs[0], xs[1], xs[2], xs[3]);
        if s == 0 || hs % s != 0 || ws % s != 0 {
            return Err(TensorError::Dimension(format!(
                "pixel_unshuffle: spatial dims {hs}x{ws} not divisible by {s}"
            )));
        }
        let (h, w) = (hs / s, ws / s);
        let c_out = c * s * s;
        let src = self.data();
        let mut out = vec![T::zero(); b * c_out * h * w];
        for bb in 0..b {
            for cc in 0..c {
                let iplane = &src[(bb * c + cc) * hs * ws..][..hs * ws];
                for dy in 0..s {
                    for dx in 0..s {
                        let oc = cc * s * s + dy * s + dx;
                        for y in 0..h {
                            for x in 0..w {
                                out[(bb * c_out + oc) * h * w + y * w + x] = iplane[(y * s + dy) * ws + x * s + dx];
                            }
                        }
                    }
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![b, c_out, h, w],
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let mut gx = vec![T::zero(); b * c * hs * ws];
                for bb in 0..b {
                    for cc in 0..c {
                        for dy in 0..s {
                            for dx in 0..s {
                                let oc = cc * s * s + dy * s + dx;
                                for y in 0..h {
                                    for x in 0..w {
                                        gx[(bb * c + cc) * hs * ws + (y * s + dy) * ws + x * s + dx] =
                                            g[(bb * c_out + oc) * h * w + y * w + x];
                                    }
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[B,C,H,W] -> [B*(H/M)*(W/M), M*M, C]`, windows row-major over the
    /// window grid, tokens row-major inside each window.
    pub fn window_partition(&self, m: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::Dimension(format!("window_partition expects 4-D, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if m == 0 || h % m != 0 || w % m != 0 {
            return Err(TensorError::Dimension(format!(
                "window_partition: spatial dims {h}x{w} not divisible by window {m}; pad the input first"
            )));
        }
        let data = window_partition_data(&self.data(), b, c, h, w, m);
        let n = b * (h / m) * (w / m);
        Ok(Tensor::from_op(
            vec![n, m * m, c],
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| vec![Some(window_merge_data(g, b, c, h, w, m))]),
        ))
    }

    /// Inverse of [`Tensor::window_partition`].
    pub fn window_merge(&self, m: usize, b: usize, c: usize, h: usize, w: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        let n = b * (h / m) * (w / m);
        if xs.len() != 3 || xs[0] != n || xs[1] != m * m || xs[2] != c {
            return Err(TensorError::ShapeMismatch {
                context: "window_merge".into(),
                lhs: vec![n, m * m, c],
                rhs: xs.to_vec(),
            });
        }
        let data = window_merge_data(&self.data(), b, c, h, w, m);
        Ok(Tensor::from_op(
            vec![b, c, h, w],
            data,
            vec![self.clone()],
            Box::new(move |g: &[T]| vec![Some(window_partition_data(g, b, c, h, w, m))]),
        ))
    }

    /// Mean over each MxM window: `[B,C,H,W] -> [B,C,H/M,W/M]`.
    pub fn window_mean(&self, m: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::Dimension(format!("window_mean expects 4-D, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if m == 0 || h % m != 0 || w % m != 0 {
            return Err(TensorError::Dimension(format!("window_mean: {h}x{w} not divisible by {m}")));
        }
        let (nh, nw) = (h / m, w / m);
        let src = self.data();
        let inv = T::from_f64(1.0 / (m * m) as f64);
        let mut out = vec![T::zero(); b * c * nh * nw];
        for bc in 0..b * c {
            let plane = &src[bc * h * w..][..h * w];
            let oplane = &mut out[bc * nh * nw..][..nh * nw];
            for wy in 0..nh {
                for wx in 0..nw {
                    let mut acc = T::zero();
                    for iy in 0..m {
                        let row = &plane[(wy * m + iy) * w + wx * m..][..m];
                        for &v in row {
                            acc = acc + v;
                        }
                    }
                    oplane[wy * nw + wx] = acc * inv;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![b, c, nh, nw],
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let inv = T::from_f64(1.0 / (m * m) as f64);
                let mut gx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let gplane = &g[bc * nh * nw..][..nh * nw];
                    let gxplane = &mut gx[bc * h * w..][..h * w];
                    for wy in 0..nh {
                        for wx in 0..nw {
                            let gv = gplane[wy * nw + wx] * inv;
                            for iy in 0..m {
                                let row = &mut gxplane[(wy * m + iy) * w + wx * m..][..m];
                                row.iter_mut().for_each(|v| *v = *v + gv);
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `[B,C,H,W] -> [B,C,1,1]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::Dimension(format!("global_avg_pool expects 4-D, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let inv = T::from_f64(1.0 / (h * w) as f64);
        let src = self.data();
        let mut out = vec![T::zero(); b * c];
        for bc in 0..b * c {
            let plane = &src[bc * h * w..][..h * w];
            out[bc] = plane.iter().fold(T::zero(), |a, &v| a + v) * inv;
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![b, c, 1, 1],
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let inv = T::from_f64(1.0 / (h * w) as f64);
                let mut gx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let gv = g[bc] * inv;
                    gx[bc * h * w..(bc + 1) * h * w].fill(gv);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Select window rows of `[N, P, C]` by index; indices must be unique and
    /// in range.
    pub fn gather_windows(&self, idx: &[usize]) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 3 {
            return Err(TensorError::Dimension(format!("gather_windows expects 3-D, got {xs:?}")));
        }
        let (n, p, c) = (xs[0], xs[1], xs[2]);
        validate_indices(idx, n)?;
        let row = p * c;
        let src = self.data();
        let mut out = Vec::with_capacity(idx.len() * row);
        for &i in idx {
            out.extend_from_slice(&src[i * row..(i + 1) * row]);
        }
        drop(src);
        let idx_owned = idx.to_vec();
        Ok(Tensor::from_op(
            vec![idx.len(), p, c],
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let mut gx = vec![T::zero(); n * row];
                for (k, &i) in idx_owned.iter().enumerate() {
                    gx[i * row..(i + 1) * row].copy_from_slice(&g[k * row..(k + 1) * row]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Place window groups back into an `[N, P, C]` tensor. The index sets of
    /// all parts must partition `0..n` exactly.
    pub fn scatter_windows(parts: &[(Tensor<T>, Vec<usize>)], n: usize) -> Result<Tensor<T>> {
        let nonempty: Vec<&(Tensor<T>, Vec<usize>)> = parts.iter().filter(|(t, _)| t.shape()[0] > 0).collect();
        let first = nonempty
            .first()
            .ok_or_else(|| TensorError::Dimension("scatter_windows: all parts empty".into()))?;
        let (p, c) = (first.0.shape()[1], first.0.shape()[2]);
        let mut all_idx: Vec<usize> = Vec::new();
        for (t, idx) in parts {
            if t.shape()[0] != idx.len() {
                return Err(TensorError::Index(format!(
                    "scatter_windows: part of {} rows given {} indices",
                    t.shape()[0],
                    idx.len()
                )));
            }
            all_idx.extend_from_slice(idx);
        }
        validate_indices(&all_idx, n)?;
        if all_idx.len() != n {
            return Err(TensorError::Index(format!(
                "scatter_windows: {} indices do not cover all {n} windows",
                all_idx.len()
            )));
        }
        let row = p * c;
        let mut out = vec![T::zero(); n * row];
        for (t, idx) in parts {
            let src = t.data();
            for (k, &i) in idx.iter().enumerate() {
                out[i * row..(i + 1) * row].copy_from_slice(&src[k * row..(k + 1) * row]);
            }
        }
        let inputs: Vec<Tensor<T>> = parts.iter().map(|(t, _)| t.clone()).collect();
        let index_sets: Vec<Vec<usize>> = parts.iter().map(|(_, idx)| idx.clone()).collect();
        Ok(Tensor::from_op(
            vec![n, p, c],
            out,
            inputs,
            Box::new(move |g: &[T]| {
                index_sets
                    .iter()
                    .map(|idx| {
                        let mut gp = vec![T::zero(); idx.len() * row];
                        for (k, &i) in idx.iter().enumerate() {
                            gp[k * row..(k + 1) * row].copy_from_slice(&g[i * row..(i + 1) * row]);
                        }
                        Some(gp)
                    })
                    .collect()
            }),
        ))
    }

    /// Gumbel-softmax over the last axis of `[N, K]` logits. Soft mode
    /// returns `softmax((logits + g)/tau)`; hard mode returns the one-hot
    /// argmax with the soft sample's gradient (straight-through).
    pub fn gumbel_softmax(&self, temperature: f64, rng: &mut Rng, hard: bool) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 2 {
            return Err(TensorError::Dimension(format!("gumbel_softmax expects 2-D logits, got {xs:?}")));
        }
        if temperature <= 0.0 {
            return Err(TensorError::Dimension("gumbel_softmax temperature must be > 0".into()));
        }
        let (n, k) = (xs[0], xs[1]);
        let src = self.data();
        let mut soft = vec![T::zero(); n * k];
        // Draw order is fixed: window-major, then class.
        for i in 0..n {
            let mut mx = f64::NEG_INFINITY;
            let mut vals = vec![0.0f64; k];
            for j in 0..k {
                let u = rng.uniform_open();
                let gumbel = -(-u.ln()).ln();
                let v = (src[i * k + j].to_f64() + gumbel) / temperature;
                vals[j] = v;
                mx = mx.max(v);
            }
            let mut sum = 0.0;
            for j in 0..k {
                let e = (vals[j] - mx).exp();
                soft[i * k + j] = T::from_f64(e);
                sum += e;
            }
            for j in 0..k {
                soft[i * k + j] = soft[i * k + j] / T::from_f64(sum);
            }
        }
        drop(src);
        let out = if hard {
            let mut hard_out = vec![T::zero(); n * k];
            for i in 0..n {
                let row = &soft[i * k..(i + 1) * k];
                let mut best = 0usize;
                for j in 1..k {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                hard_out[i * k + best] = T::one();
            }
            hard_out
        } else {
            soft.clone()
        };
        let tau = temperature;
        Ok(Tensor::from_op(
            vec![n, k],
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                // Jacobian of the soft sample in both modes.
                let mut gx = vec![T::zero(); n * k];
                let inv_tau = T::from_f64(1.0 / tau);
                for i in 0..n {
                    let mut dot = T::zero();
                    for j in 0..k {
                        dot = dot + g[i * k + j] * soft[i * k + j];
                    }
                    for j in 0..k {
                        let y = soft[i * k + j];
                        gx[i * k + j] = y * (g[i * k + j] - dot) * inv_tau;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Reflect-pad the two trailing spatial dims of `[B,C,H,W]`.
    pub fn pad_reflect(&self, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::Dimension(format!("pad_reflect expects 4-D, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if top.max(bottom) >= h || left.max(right) >= w {
            return Err(TensorError::Dimension(format!(
                "reflect pad ({top},{bottom},{left},{right}) too large for {h}x{w}"
            )));
        }
        let (oh, ow) = (h + top + bottom, w + left + right);
        let reflect = |i: isize, n: usize| -> usize {
            let n = n as isize;
            let mut i = i;
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
            i as usize
        };
        let src = self.data();
        let mut out = vec![T::zero(); b * c * oh * ow];
        let mut srcmap = vec![0usize; oh * ow];
        for oy in 0..oh {
            let iy = reflect(oy as isize - top as isize, h);
            for ox in 0..ow {
                let ix = reflect(ox as isize - left as isize, w);
                srcmap[oy * ow + ox] = iy * w + ix;
            }
        }
        for bc in 0..b * c {
            let plane = &src[bc * h * w..][..h * w];
            let oplane = &mut out[bc * oh * ow..][..oh * ow];
            for (o, &s) in oplane.iter_mut().zip(srcmap.iter()) {
                *o = plane[s];
            }
        }
        drop(src);
        let srcmap = std::rc::Rc::new(srcmap);
        Ok(Tensor::from_op(
            vec![b, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let mut gx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    let gplane = &g[bc * oh * ow..][..oh * ow];
                    let gxplane = &mut gx[bc * h * w..][..h * w];
                    for (gv, &s) in gplane.iter().zip(srcmap.iter()) {
                        gxplane[s] = gxplane[s] + *gv;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Crop the trailing spatial dims of `[B,C,H,W]` to a `height x width`
    /// region anchored at `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(TensorError::Dimension(format!("crop expects 4-D, got {xs:?}")));
        }
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if top + height > h || left + width > w {
            return Err(TensorError::Index(format!(
                "crop region ({top},{left})+{height}x{width} exceeds {h}x{w}"
            )));
        }
        let src = self.data();
        let mut out = vec![T::zero(); b * c * height * width];
        for bc in 0..b * c {
            for y in 0..height {
                let srow = &src[bc * h * w + (top + y) * w + left..][..width];
                out[bc * height * width + y * width..][..width].copy_from_slice(srow);
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            vec![b, c, height, width],
            out,
            vec![self.clone()],
            Box::new(move |g: &[T]| {
                let mut gx = vec![T::zero(); b * c * h * w];
                for bc in 0..b * c {
                    for y in 0..height {
                        gx[bc * h * w + (top + y) * w + left..][..width]
                            .copy_from_slice(&g[bc * height * width + y * width..][..width]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

fn validate_indices(idx: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    for &i in idx {
        if i >= n {
            return Err(TensorError::Index(format!("index {i} out of range 0..{n}")));
        }
        if std::mem::replace(&mut seen[i], true) {
            return Err(TensorError::Index(format!("duplicate index {i}")));
        }
    }
    Ok(())
}

fn window_partition_data<T: Real>(src: &[T], b: usize, c: usize, h: usize, w: usize, m: usize) -> Vec<T> {
    let (nh, nw) = (h / m, w / m);
    let mut out = vec![T::zero(); b * nh * nw * m * m * c];
    for bb in 0..b {
        for cc in 0..c {
            let plane = &src[(bb * c + cc) * h * w..][..h * w];
            for wy in 0..nh {
                for wx in 0..nw {
                    let win = bb * nh * nw + wy * nw + wx;
                    for iy in 0..m {
                        let srow = &plane[(wy * m + iy) * w + wx * m..][..m];
                        for (ix, &v) in srow.iter().enumerate() {
                            out[(win * m * m + iy * m + ix) * c + cc] = v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn window_merge_data<T: Real>(src: &[T], b: usize, c: usize, h: usize, w: usize, m: usize) -> Vec<T> {
    let (nh, nw) = (h / m, w / m);
    let mut out = vec![T::zero(); b * c * h * w];
    for bb in 0..b {
        for cc in 0..c {
            let plane = &mut out[(bb * c + cc) * h * w..][..h * w];
            for wy in 0..nh {
                for wx in 0..nw {
                    let win = bb * nh * nw + wy * nw + wx;
                    for iy in 0..m {
                        for ix in 0..m {
                            plane[(wy * m + iy) * w + wx * m + ix] = src[(win * m * m + iy * m + ix) * c + cc];
                        }
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::check::check_grads;
    use super::super::{macs, Rng, Tensor, TensorError};

    fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let data = (0..shape.iter().product()).map(|_| rng.normal()).collect();
        Tensor::new(shape, data).unwrap()
    }

    fn randn_param(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = Rng::new(seed);
        let data = (0..shape.iter().product()).map(|_| rng.normal()).collect();
        Tensor::param(shape, data).unwrap()
    }

    // ---- matmul ----

    #[test]
    fn matmul_identity() {
        let x = randn(&[1, 4, 4], 1);
        let eye = Tensor::<f64>::new(
            &[1, 4, 4],
            (0..16).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let y = x.matmul(&eye).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn matmul_hand_example() {
        let a = Tensor::<f64>::new(&[1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let b = Tensor::<f64>::new(&[1, 2, 1], vec![1., 1.]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().to_f64_vec(), vec![3., 7.]);
    }

    #[test]
    fn matmul_triple_loop_oracle() {
        let a = randn(&[1, 3, 4], 2);
        let b = randn(&[1, 4, 2], 3);
        let got = a.matmul(&b).unwrap();
        let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
        let mut want = vec![0.0; 3 * 2];
        for i in 0..3 {
            for k in 0..4 {
                for j in 0..2 {
                    want[i * 2 + j] += av[i * 4 + k] * bv[k * 2 + j];
                }
            }
        }
        assert_eq!(got.to_f64_vec(), want);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f64>::zeros(&[1, 2, 3]);
        let b = Tensor::<f64>::zeros(&[1, 4, 2]);
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[1, 2, 3]") && msg.contains("[1, 4, 2]"));
    }

    #[test]
    fn matmul_batch_broadcast_and_grads() {
        let a = randn_param(&[2, 3, 4], 4);
        let b = randn_param(&[1, 4, 2], 5);
        check_grads(&[a, b], |p| p[0].matmul(&p[1])?.sum());
    }

    #[test]
    fn matmul_counts_macs() {
        macs::reset();
        let a = randn(&[2, 3, 4], 6);
        let b = randn(&[2, 4, 5], 7);
        a.matmul(&b).unwrap();
        assert_eq!(macs::total(), 2 * 3 * 4 * 5);
        macs::reset();
    }

    // ---- conv2d ----

    #[test]
    fn conv_identity_pointwise() {
        let x = randn(&[1, 3, 4, 4], 8);
        let mut w = vec![0.0; 9];
        for i in 0..3 {
            w[i * 3 + i] = 1.0;
        }
        let w = Tensor::<f64>::new(&[3, 3, 1, 1], w).unwrap();
        let y = x.conv2d(&w, None, 1, 0, 1).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn conv_depthwise_ones_constant_interior() {
        let c = 2.5;
        let x = Tensor::<f64>::full(&[1, 2, 5, 5], c);
        let w = Tensor::<f64>::ones(&[2, 1, 3, 3]);
        let y = x.conv2d(&w, None, 1, 1, 2).unwrap();
        let v = y.to_f64_vec();
        // interior pixels see all nine taps
        for ch in 0..2 {
            for i in 1..4 {
                for j in 1..4 {
                    assert!((v[ch * 25 + i * 5 + j] - 9.0 * c).abs() < 1e-12);
                }
            }
        }
        // corner sees four taps
        assert!((v[0] - 4.0 * c).abs() < 1e-12);
    }

    #[test]
    fn conv_nested_loop_oracle() {
        let x = randn(&[1, 2, 5, 5], 9);
        let w = randn(&[3, 2, 3, 3], 10);
        let bias = randn(&[3], 11);
        let y = x.conv2d(&w, Some(&bias), 1, 1, 1).unwrap();
        let (xv, wv, bv) = (x.to_f64_vec(), w.to_f64_vec(), bias.to_f64_vec());
        let mut want = vec![0.0; 3 * 25];
        for oc in 0..3 {
            for oy in 0..5i64 {
                for ox in 0..5i64 {
                    let mut acc = bv[oc];
                    for ic in 0..2 {
                        for ky in 0..3i64 {
                            for kx in 0..3i64 {
                                let (iy, ix) = (oy + ky - 1, ox + kx - 1);
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += xv[(ic * 5 + iy as usize) * 5 + ix as usize]
                                        * wv[((oc * 2 + ic) * 3 + ky as usize) * 3 + kx as usize];
                                }
                            }
                        }
                    }
                    want[(oc * 5 + oy as usize) * 5 + ox as usize] = acc;
                }
            }
        }
        let got = y.to_f64_vec();
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12, "{g} vs {w}");
        }
    }

    #[test]
    fn conv_group_mismatch_is_error() {
        let x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        let w = Tensor::<f64>::zeros(&[4, 2, 3, 3]);
        assert!(matches!(x.conv2d(&w, None, 1, 1, 2), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn conv_grads() {
        let x = randn_param(&[1, 2, 4, 4], 12);
        let w = randn_param(&[2, 2, 3, 3], 13);
        let b = randn_param(&[2], 14);
        check_grads(&[x, w, b], |p| p[0].conv2d(&p[1], Some(&p[2]), 1, 1, 1)?.sum());
    }

    #[test]
    fn conv_depthwise_grads() {
        let x = randn_param(&[1, 4, 3, 3], 15);
        let w = randn_param(&[4, 1, 3, 3], 16);
        check_grads(&[x, w], |p| p[0].conv2d(&p[1], None, 1, 1, 4)?.sum());
    }

    // ---- softmax ----

    #[test]
    fn softmax_uniform_logits() {
        let x = Tensor::<f64>::full(&[1, 5], 3.7);
        let y = x.softmax(1).unwrap();
        for v in y.to_f64_vec() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let x = Tensor::<f64>::new(&[2], vec![0.0, 3.0f64.ln()]).unwrap();
        let y = x.softmax(0).unwrap().to_f64_vec();
        assert!((y[0] - 0.25).abs() < 1e-12 && (y[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let x = randn(&[3, 4], 17);
        let shifted = x.add_scalar(123.456);
        let (a, b) = (x.softmax(1).unwrap().to_f64_vec(), shifted.softmax(1).unwrap().to_f64_vec());
        for (u, v) in a.iter().zip(&b) {
            assert!((u - v).abs() < 1e-12);
        }
        for row in a.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_grads() {
        let x = randn_param(&[2, 3, 2], 18);
        let w = randn(&[2, 3, 2], 19);
        check_grads(&[x], |p| p[0].softmax(1)?.mul(&w)?.sum());
    }

    // ---- layer norm ----

    #[test]
    fn layer_norm_constant_input_is_zero() {
        let x = Tensor::<f64>::full(&[2, 3, 2, 2], 4.2);
        let y = x
            .layer_norm(&Tensor::ones(&[3]), &Tensor::zeros(&[3]), 1e-6, 1)
            .unwrap();
        for v in y.to_f64_vec() {
            assert!(v.abs() < 1e-6);
        }
    }

    #[test]
    fn layer_norm_two_point_closed_form() {
        let x = Tensor::<f64>::new(&[2], vec![1.0, 3.0]).unwrap();
        let y = x
            .layer_norm(&Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-6, 0)
            .unwrap()
            .to_f64_vec();
        assert!((y[0] + 1.0).abs() < 1e-5 && (y[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn layer_norm_matches_gain_shift_statistics() {
        let x = randn(&[1, 8, 3, 3], 20);
        let y = x
            .layer_norm(&Tensor::full(&[8], 2.0), &Tensor::full(&[8], 0.5), 1e-6, 1)
            .unwrap()
            .to_f64_vec();
        // statistics along the channel axis at each spatial position
        for pos in 0..9 {
            let col: Vec<f64> = (0..8).map(|c| y[c * 9 + pos]).collect();
            let mean = col.iter().sum::<f64>() / 8.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!((mean - 0.5).abs() < 1e-5);
            assert!((var.sqrt() - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_grads() {
        let x = randn_param(&[2, 4, 2, 2], 21);
        let gain = randn_param(&[4], 22);
        let shift = randn_param(&[4], 23);
        let w = randn(&[2, 4, 2, 2], 24);
        check_grads(&[x, gain, shift], |p| p[0].layer_norm(&p[1], &p[2], 1e-6, 1)?.mul(&w)?.sum());
    }

    // ---- grid sample ----

    #[test]
    fn grid_sample_zero_offsets_identity() {
        let x = randn(&[1, 3, 4, 5], 25);
        let off = Tensor::<f64>::zeros(&[1, 2, 4, 5]);
        assert_eq!(x.grid_sample_bilinear(&off).unwrap().to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn grid_sample_half_pixel_midpoint() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 2], vec![2.0, 6.0]).unwrap();
        // dx = +0.5 at the left pixel: midpoint of the two row neighbors
        let off = Tensor::<f64>::new(&[1, 2, 1, 2], vec![0.0, 0.0, 0.5, 0.0]).unwrap();
        let y = x.grid_sample_bilinear(&off).unwrap().to_f64_vec();
        assert!((y[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn grid_sample_integer_offset_is_clamped_shift() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 4], vec![1., 2., 3., 4.]).unwrap();
        let off_data = [vec![0.0; 4], vec![1.0; 4]].concat();
        let off = Tensor::<f64>::new(&[1, 2, 1, 4], off_data).unwrap();
        assert_eq!(
            x.grid_sample_bilinear(&off).unwrap().to_f64_vec(),
            vec![2., 3., 4., 4.]
        );
    }

    #[test]
    fn grid_sample_matches_scalar_oracle() {
        let x = randn(&[1, 2, 5, 6], 26);
        let off = Tensor::<f64>::rand_uniform(&[1, 2, 5, 6], -2.0, 2.0, &mut Rng::new(27));
        let y = x.grid_sample_bilinear(&off).unwrap().to_f64_vec();
        let (xv, ov) = (x.to_f64_vec(), off.to_f64_vec());
        let (h, w) = (5usize, 6usize);
        for c in 0..2 {
            for i in 0..h {
                for j in 0..w {
                    let sy = (i as f64 + ov[i * w + j]).clamp(0.0, (h - 1) as f64);
                    let sx = (j as f64 + ov[h * w + i * w + j]).clamp(0.0, (w - 1) as f64);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let at = |yy: usize, xx: usize| xv[(c * h + yy) * w + xx];
                    let want = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1))
                        + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1));
                    assert!((y[(c * h + i) * w + j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn grid_sample_grads() {
        let x = randn_param(&[1, 2, 4, 4], 28);
        // offsets away from the integer lattice so the interpolant is smooth
        let off_data: Vec<f64> = (0..32).map(|i| 0.3 + 0.1 * ((i % 5) as f64) - 0.25).collect();
        let off = Tensor::param(&[1, 2, 4, 4], off_data).unwrap();
        let w = randn(&[1, 2, 4, 4], 29);
        check_grads(&[x, off], |p| p[0].grid_sample_bilinear(&p[1])?.mul(&w)?.sum());
    }

    // ---- pixel shuffle ----

    #[test]
    fn pixel_shuffle_definition() {
        let x = Tensor::<f64>::new(&[1, 4, 1, 1], vec![1., 2., 3., 4.]).unwrap();
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.to_f64_vec(), vec![1., 2., 3., 4.]);
    }

    #[test]
    fn pixel_shuffle_roundtrip() {
        let x = randn(&[2, 12, 3, 5], 30);
        let y = x.pixel_shuffle(2).unwrap();
        assert_eq!(y.shape(), &[2, 3, 6, 10]);
        assert_eq!(y.pixel_unshuffle(2).unwrap().to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn pixel_shuffle_indivisible_is_error() {
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        assert!(matches!(x.pixel_shuffle(2), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn pixel_shuffle_grads() {
        let x = randn_param(&[1, 8, 2, 3], 31);
        let w = randn(&[1, 2, 4, 6], 32);
        check_grads(&[x], |p| p[0].pixel_shuffle(2)?.mul(&w)?.sum());
    }

    // ---- windowing ----

    #[test]
    fn window_partition_degenerate_single_window() {
        let x = randn(&[1, 3, 4, 4], 33);
        let y = x.window_partition(4).unwrap();
        assert_eq!(y.shape(), &[1, 16, 3]);
    }

    #[test]
    fn window_partition_merge_roundtrip() {
        let x = randn(&[1, 3, 8, 8], 34);
        let y = x.window_partition(4).unwrap();
        assert_eq!(y.shape(), &[4, 16, 3]);
        let z = y.window_merge(4, 1, 3, 8, 8).unwrap();
        assert_eq!(z.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn window_three_is_bottom_right_quadrant() {
        let data: Vec<f64> = (0..64).map(|i| i as f64).collect();
        let x = Tensor::<f64>::new(&[1, 1, 8, 8], data).unwrap();
        let y = x.window_partition(4).unwrap();
        let v = y.to_f64_vec();
        // window 3, token 0 is pixel (4,4) = 36
        assert_eq!(v[3 * 16], 36.0);
        // window 3, last token is pixel (7,7) = 63
        assert_eq!(v[3 * 16 + 15], 63.0);
    }

    #[test]
    fn window_partition_indivisible_mentions_padding() {
        let x = Tensor::<f64>::zeros(&[1, 1, 6, 6]);
        let msg = x.window_partition(4).unwrap_err().to_string();
        assert!(msg.contains("pad"));
    }

    #[test]
    fn window_partition_grads() {
        let x = randn_param(&[1, 2, 4, 4], 35);
        let w = randn(&[4, 4, 2], 36);
        check_grads(&[x], |p| p[0].window_partition(2)?.mul(&w)?.sum());
    }

    #[test]
    fn window_mean_and_pool_grads() {
        let x = randn_param(&[1, 2, 4, 4], 37);
        let w = randn(&[1, 2, 2, 2], 38);
        check_grads(&[x.clone()], |p| p[0].window_mean(2)?.mul(&w)?.sum());
        let w2 = randn(&[1, 2, 1, 1], 39);
        check_grads(&[x], |p| p[0].global_avg_pool()?.mul(&w2)?.sum());
    }

    // ---- gather / scatter ----

    #[test]
    fn gather_identity_permutation() {
        let x = randn(&[4, 2, 3], 40);
        let y = x.gather_windows(&[0, 1, 2, 3]).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn gather_selects_rows_in_order() {
        let x = randn(&[4, 2, 3], 41);
        let y = x.gather_windows(&[2, 0]).unwrap();
        let xv = x.to_f64_vec();
        let want: Vec<f64> = [&xv[2 * 6..3 * 6], &xv[0..6]].concat();
        assert_eq!(y.to_f64_vec(), want);
    }

    #[test]
    fn gather_scatter_complementary_roundtrip() {
        let x = randn(&[6, 4, 2], 42);
        let hard = x.gather_windows(&[1, 4, 5]).unwrap();
        let simple = x.gather_windows(&[0, 2, 3]).unwrap();
        let z = Tensor::scatter_windows(&[(hard, vec![1, 4, 5]), (simple, vec![0, 2, 3])], 6).unwrap();
        assert_eq!(z.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn gather_rejects_bad_indices() {
        let x = Tensor::<f64>::zeros(&[4, 2, 2]);
        assert!(matches!(x.gather_windows(&[0, 0]), Err(TensorError::Index(_))));
        assert!(matches!(x.gather_windows(&[4]), Err(TensorError::Index(_))));
    }

    #[test]
    fn gather_scatter_grads() {
        let x = randn_param(&[4, 2, 2], 43);
        let w = randn(&[4, 2, 2], 44);
        check_grads(&[x], |p| {
            let hard = p[0].gather_windows(&[3, 1])?;
            let simple = p[0].gather_windows(&[0, 2])?;
            let z = Tensor::scatter_windows(&[(hard.scale(2.0), vec![3, 1]), (simple, vec![0, 2])], 4)?;
            z.mul(&w)?.sum()
        });
    }

    // ---- gumbel softmax ----

    #[test]
    fn gumbel_dominant_logit() {
        let logits = Tensor::<f64>::new(&[1, 2], vec![20.0, -20.0]).unwrap();
        let mut rng = Rng::new(45);
        for _ in 0..100 {
            let y = logits.gumbel_softmax(1.0, &mut rng, false).unwrap().to_f64_vec();
            assert!(y[0] > 0.999);
        }
    }

    #[test]
    fn gumbel_hard_is_one_hot() {
        let logits = randn(&[8, 2], 46);
        let mut rng = Rng::new(47);
        let y = logits.gumbel_softmax(1.0, &mut rng, true).unwrap().to_f64_vec();
        for row in y.chunks(2) {
            assert!(row.iter().filter(|&&v| v == 1.0).count() == 1);
            assert!(row.iter().filter(|&&v| v == 0.0).count() == 1);
        }
    }

    #[test]
    fn gumbel_monte_carlo_mean() {
        let logits = Tensor::<f64>::new(&[1, 2], vec![0.0, 0.0]).unwrap();
        let mut rng = Rng::new(48);
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            acc += logits.gumbel_softmax(1.0, &mut rng, false).unwrap().to_f64_vec()[0];
        }
        let mean = acc / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn gumbel_grads_deterministic_noise() {
        let logits = randn_param(&[3, 2], 49);
        let w = randn(&[3, 2], 50);
        check_grads(&[logits], |p| {
            let mut rng = Rng::new(51);
            p[0].gumbel_softmax(1.3, &mut rng, false)?.mul(&w)?.sum()
        });
    }

    // ---- pad / crop / shape ops ----

    #[test]
    fn pad_reflect_values() {
        let x = Tensor::<f64>::new(&[1, 1, 2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = x.pad_reflect(1, 0, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 4]);
        assert_eq!(
            y.to_f64_vec(),
            vec![5., 4., 5., 6., 2., 1., 2., 3., 5., 4., 5., 6.]
        );
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x = randn(&[1, 2, 5, 6], 52);
        let y = x.pad_reflect(2, 1, 3, 2).unwrap().crop(2, 3, 5, 6).unwrap();
        assert_eq!(y.to_f64_vec(), x.to_f64_vec());
    }

    #[test]
    fn pad_crop_slice_concat_permute_grads() {
        let x = randn_param(&[1, 2, 3, 4], 53);
        let w = randn(&[1, 2, 5, 6], 54);
        check_grads(&[x.clone()], |p| p[0].pad_reflect(1, 1, 1, 1)?.mul(&w)?.sum());
        let w2 = randn(&[1, 2, 2, 2], 55);
        check_grads(&[x.clone()], |p| p[0].crop(1, 1, 2, 2)?.mul(&w2)?.sum());
        let w3 = randn(&[1, 2, 3, 2], 56);
        check_grads(&[x.clone()], |p| p[0].slice_last(1, 2)?.mul(&w3)?.sum());
        let w4 = randn(&[1, 4, 3, 4], 57);
        check_grads(&[x.clone()], |p| Tensor::concat(&[p[0].clone(), p[0].scale(2.0)], 1)?.mul(&w4)?.sum());
        let w5 = randn(&[4, 3, 2, 1], 58);
        check_grads(&[x], |p| p[0].permute(&[3, 2, 1, 0])?.mul(&w5)?.sum());
    }

    #[test]
    fn permute_matches_manual_transpose() {
        let x = Tensor::<f64>::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let y = x.permute(&[1, 0]).unwrap();
        assert_eq!(y.shape(), &[3, 2]);
        assert_eq!(y.to_f64_vec(), vec![1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn elementwise_and_activation_grads() {
        let x = randn_param(&[2, 3], 59);
        let y = randn_param(&[2, 3], 60);
        check_grads(&[x.clone(), y.clone()], |p| p[0].mul(&p[1])?.sum());
        check_grads(&[x.clone(), y.clone()], |p| p[0].div(&p[1].mul(&p[1])?.add_scalar(1.0))?.sum());
        check_grads(&[x.clone()], |p| p[0].tanh_act().sum());
        check_grads(&[x.clone()], |p| p[0].sigmoid().sum());
        check_grads(&[x.clone()], |p| p[0].gelu().sum());
        check_grads(&[x], |p| p[0].add_scalar(0.05).abs().sum());
    }
}

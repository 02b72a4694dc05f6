//! CPU kernels for the convolutional backbone: 3×3 same-padded convolution,
//! training-mode batch normalization and 2×2 max pooling.
//!
//! Each kernel is a candle custom op with a hand-derived backward pass. The
//! convolution lowers to im2col + GEMM in both directions. All kernels are
//! single-threaded and sequential, so results are bit-reproducible.

use std::sync::{Arc, Mutex};

use candle_core::{
    bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Tensor, WithDType,
};

pub const BN_EPS: f64 = 1e-5;

pub(crate) trait Elem: WithDType {
    /// `c = a·b + beta·c` with explicit strides (all non-negative).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!(
            (rows - 1) * rs + (cols - 1) * cs < len,
            "gemm operand out of bounds"
        );
    }
}

macro_rules! impl_elem {
    ($ty:ty, $gemm:path) => {
        impl Elem for $ty {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                check_extent(a.len(), m, k, rsa, csa);
                check_extent(b.len(), k, n, rsb, csb);
                check_extent(c.len(), m, n, rsc, csc);
                // SAFETY: extents checked above; strides are non-negative.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_elem!(f32, matrixmultiply::sgemm);
impl_elem!(f64, matrixmultiply::dgemm);

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => bail!("custom op expects contiguous input"),
    }
}

fn values<T: WithDType>(t: &Tensor) -> candle_core::Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn dims4(l: &Layout) -> candle_core::Result<(usize, usize, usize, usize)> {
    match l.dims() {
        &[b, c, h, w] => Ok((b, c, h, w)),
        d => bail!("expected a 4d tensor, got shape {d:?}"),
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

/// Unfolds one `(c, h, w)` image into a `(c·9, h·w)` patch matrix.
fn im2col<T: Elem>(src: &[T], c: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    let zero = T::from_f64(0.0);
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let dst = &mut cols[row + y * w..row + (y + 1) * w];
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        dst.fill(zero);
                        continue;
                    }
                    let start = ci * hw + sy as usize * w;
                    let srow = &src[start..start + w];
                    match kx {
                        0 => {
                            dst[0] = zero;
                            dst[1..].copy_from_slice(&srow[..w - 1]);
                        }
                        1 => dst.copy_from_slice(srow),
                        _ => {
                            dst[..w - 1].copy_from_slice(&srow[1..]);
                            dst[w - 1] = zero;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates patch gradients back into the image.
fn col2im<T: Elem>(cols: &[T], c: usize, h: usize, w: usize, dst: &mut [T]) {
    let hw = h * w;
    for ci in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ci * 9 + ky * 3 + kx) * hw;
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + y * w..row + (y + 1) * w];
                    let start = ci * hw + sy as usize * w;
                    let drow = &mut dst[start..start + w];
                    match kx {
                        0 => {
                            for (d, s) in drow[..w - 1].iter_mut().zip(&src[1..]) {
                                *d += *s;
                            }
                        }
                        1 => {
                            for (d, s) in drow.iter_mut().zip(src) {
                                *d += *s;
                            }
                        }
                        _ => {
                            for (d, s) in drow[1..].iter_mut().zip(&src[..w - 1]) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Conv3x3;

impl Conv3x3 {
    fn forward<T: Elem>(
        x: &[T],
        w: &[T],
        b: usize,
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
    ) -> Vec<T> {
        let hw = h * wd;
        let k = cin * 9;
        let mut cols = vec![T::from_f64(0.0); k * hw];
        let mut out = vec![T::from_f64(0.0); b * cout * hw];
        for bi in 0..b {
            im2col(
                &x[bi * cin * hw..(bi + 1) * cin * hw],
                cin,
                h,
                wd,
                &mut cols,
            );
            let o = &mut out[bi * cout * hw..(bi + 1) * cout * hw];
            T::gemm(
                cout,
                k,
                hw,
                w,
                k,
                1,
                &cols,
                hw,
                1,
                T::from_f64(0.0),
                o,
                hw,
                1,
            );
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn backward<T: Elem>(
        x: &[T],
        w: &[T],
        dy: &[T],
        b: usize,
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
    ) -> (Vec<T>, Vec<T>) {
        let hw = h * wd;
        let k = cin * 9;
        let zero = T::from_f64(0.0);
        let mut cols = vec![zero; k * hw];
        let mut dcols = vec![zero; k * hw];
        let mut dx = vec![zero; b * cin * hw];
        let mut dw = vec![zero; cout * k];
        for bi in 0..b {
            let xb = &x[bi * cin * hw..(bi + 1) * cin * hw];
            let dyb = &dy[bi * cout * hw..(bi + 1) * cout * hw];
            im2col(xb, cin, h, wd, &mut cols);
            // dW += dY · colsᵀ
            T::gemm(
                cout,
                hw,
                k,
                dyb,
                hw,
                1,
                &cols,
                1,
                hw,
                T::from_f64(1.0),
                &mut dw,
                k,
                1,
            );
            // dcols = Wᵀ · dY
            T::gemm(k, cout, hw, w, 1, k, dyb, hw, 1, zero, &mut dcols, hw, 1);
            col2im(
                &dcols,
                cin,
                h,
                wd,
                &mut dx[bi * cin * hw..(bi + 1) * cin * hw],
            );
        }
        (dx, dw)
    }
}

impl CustomOp2 for Conv3x3 {
    fn name(&self) -> &'static str {
        "conv3x3-same"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, cin, h, w) = dims4(l1)?;
        let (cout, wcin, kh, kw) = dims4(l2)?;
        if wcin != cin || kh != 3 || kw != 3 {
            bail!(
                "conv3x3: kernel {:?} incompatible with input {:?}",
                l2.dims(),
                l1.dims()
            );
        }
        let shape = Shape::from((b, cout, h, w));
        match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let out = Self::forward(
                    contiguous::<f32>(s1, l1)?,
                    contiguous::<f32>(s2, l2)?,
                    b,
                    cin,
                    h,
                    w,
                    cout,
                );
                Ok((CpuStorage::F32(out), shape))
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let out = Self::forward(
                    contiguous::<f64>(s1, l1)?,
                    contiguous::<f64>(s2, l2)?,
                    b,
                    cin,
                    h,
                    w,
                    cout,
                );
                Ok((CpuStorage::F64(out), shape))
            }
            _ => bail!("conv3x3: unsupported dtype combination"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (b, cin, h, wd) = x.dims4()?;
        let cout = w.dim(0)?;
        let dev = x.device();
        match x.dtype() {
            candle_core::DType::F32 => {
                let (dx, dw) = Self::backward(
                    &values::<f32>(x)?,
                    &values::<f32>(w)?,
                    &values::<f32>(grad)?,
                    b,
                    cin,
                    h,
                    wd,
                    cout,
                );
                Ok((
                    Some(Tensor::from_vec(dx, x.shape(), dev)?),
                    Some(Tensor::from_vec(dw, w.shape(), dev)?),
                ))
            }
            candle_core::DType::F64 => {
                let (dx, dw) = Self::backward(
                    &values::<f64>(x)?,
                    &values::<f64>(w)?,
                    &values::<f64>(grad)?,
                    b,
                    cin,
                    h,
                    wd,
                    cout,
                );
                Ok((
                    Some(Tensor::from_vec(dx, x.shape(), dev)?),
                    Some(Tensor::from_vec(dw, w.shape(), dev)?),
                ))
            }
            dt => bail!("conv3x3: unsupported dtype {dt:?}"),
        }
    }
}

/// Stride-1, zero-padded 3×3 convolution without bias. `x: (B, Cin, H, W)`,
/// `kernel: (Cout, Cin, 3, 3)`.
pub fn conv3x3(x: &Tensor, kernel: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op2(&kernel.contiguous()?, Conv3x3)
}

// ---------------------------------------------------------------------------
// Batch normalization (training mode)
// ---------------------------------------------------------------------------

/// Per-channel batch statistics recorded by the forward pass.
#[derive(Debug, Clone, Default)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<f64>,
    pub count: usize,
}

struct BatchNormTrain {
    stats: Arc<Mutex<BatchStats>>,
}

impl BatchNormTrain {
    fn forward<T: Elem>(
        &self,
        x: &[T],
        gamma: &[T],
        beta: &[T],
        b: usize,
        c: usize,
        hw: usize,
    ) -> Vec<T> {
        let m = (b * hw) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for bi in 0..b {
                for v in &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    s += v.to_f64();
                }
            }
            let mu = s / m;
            let mut ss = 0.0;
            for bi in 0..b {
                for v in &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    let d = v.to_f64() - mu;
                    ss += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = ss / m;
        }
        let mut out = Vec::with_capacity(x.len());
        for bi in 0..b {
            for ci in 0..c {
                let inv = 1.0 / (var[ci] + BN_EPS).sqrt();
                let g = gamma[ci].to_f64();
                let bt = beta[ci].to_f64();
                for v in &x[(bi * c + ci) * hw..(bi * c + ci + 1) * hw] {
                    out.push(T::from_f64((v.to_f64() - mean[ci]) * inv * g + bt));
                }
            }
        }
        *self.stats.lock().expect("stats poisoned") = BatchStats {
            mean,
            var,
            count: b * hw,
        };
        out
    }

    #[allow(clippy::type_complexity)]
    fn backward<T: Elem>(
        &self,
        x: &[T],
        gamma: &[T],
        dy: &[T],
        b: usize,
        c: usize,
        hw: usize,
    ) -> (Vec<T>, Vec<T>, Vec<T>) {
        let stats = self.stats.lock().expect("stats poisoned").clone();
        let m = (b * hw) as f64;
        let mut dgamma = vec![T::from_f64(0.0); c];
        let mut dbeta = vec![T::from_f64(0.0); c];
        let mut dx = vec![T::from_f64(0.0); x.len()];
        for ci in 0..c {
            let inv = 1.0 / (stats.var[ci] + BN_EPS).sqrt();
            let mu = stats.mean[ci];
            let (mut sum_dy, mut sum_dy_xhat) = (0.0, 0.0);
            for bi in 0..b {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                for (xv, g) in x[r.clone()].iter().zip(&dy[r]) {
                    let g = g.to_f64();
                    sum_dy += g;
                    sum_dy_xhat += g * (xv.to_f64() - mu) * inv;
                }
            }
            dgamma[ci] = T::from_f64(sum_dy_xhat);
            dbeta[ci] = T::from_f64(sum_dy);
            let scale = gamma[ci].to_f64() * inv / m;
            for bi in 0..b {
                let r = (bi * c + ci) * hw..(bi * c + ci + 1) * hw;
                for ((d, xv), g) in dx[r.clone()].iter_mut().zip(&x[r.clone()]).zip(&dy[r]) {
                    let xhat = (xv.to_f64() - mu) * inv;
                    *d = T::from_f64(scale * (m * g.to_f64() - sum_dy - xhat * sum_dy_xhat));
                }
            }
        }
        (dx, dgamma, dbeta)
    }
}

impl CustomOp3 for BatchNormTrain {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l1)?;
        if l2.dims() != [c] || l3.dims() != [c] {
            bail!("batch norm: affine parameters must have shape [{c}]");
        }
        let shape = Shape::from((b, c, h, w));
        match s1 {
            CpuStorage::F32(_) => {
                let out = self.forward(
                    contiguous::<f32>(s1, l1)?,
                    contiguous::<f32>(s2, l2)?,
                    contiguous::<f32>(s3, l3)?,
                    b,
                    c,
                    h * w,
                );
                Ok((CpuStorage::F32(out), shape))
            }
            CpuStorage::F64(_) => {
                let out = self.forward(
                    contiguous::<f64>(s1, l1)?,
                    contiguous::<f64>(s2, l2)?,
                    contiguous::<f64>(s3, l3)?,
                    b,
                    c,
                    h * w,
                );
                Ok((CpuStorage::F64(out), shape))
            }
            _ => bail!("batch norm: unsupported dtype"),
        }
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x.dims4()?;
        let dev = x.device();
        macro_rules! run {
            ($ty:ty) => {{
                let (dx, dg, db) = self.backward(
                    &values::<$ty>(x)?,
                    &values::<$ty>(gamma)?,
                    &values::<$ty>(grad)?,
                    b,
                    c,
                    h * w,
                );
                Ok((
                    Some(Tensor::from_vec(dx, x.shape(), dev)?),
                    Some(Tensor::from_vec(dg, gamma.shape(), dev)?),
                    Some(Tensor::from_vec(db, beta.shape(), dev)?),
                ))
            }};
        }
        match x.dtype() {
            candle_core::DType::F32 => run!(f32),
            candle_core::DType::F64 => run!(f64),
            dt => bail!("batch norm: unsupported dtype {dt:?}"),
        }
    }
}

/// Normalizes `x: (B, C, H, W)` with batch statistics, returning the output
/// and the statistics used (for running-average updates).
pub fn batch_norm_train(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
) -> candle_core::Result<(Tensor, BatchStats)> {
    let stats = Arc::new(Mutex::new(BatchStats::default()));
    let out = x.contiguous()?.apply_op3(
        &gamma.contiguous()?,
        &beta.contiguous()?,
        BatchNormTrain {
            stats: stats.clone(),
        },
    )?;
    let recorded = stats.lock().expect("stats poisoned").clone();
    Ok((out, recorded))
}

// ---------------------------------------------------------------------------
// Max pooling
// ---------------------------------------------------------------------------

struct MaxPool2;

impl MaxPool2 {
    /// Flat input index of the first maximum in each output window.
    fn argmax<T: Elem>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<usize> {
        let (oh, ow) = (h / 2, w / 2);
        let mut idx = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                    idx.push(best);
                }
            }
        }
        idx
    }
}

impl CustomOp1 for MaxPool2 {
    fn name(&self) -> &'static str {
        "max-pool-2x2"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = dims4(l)?;
        if h < 2 || w < 2 {
            bail!("max pool: spatial size {h}x{w} is below the 2x2 window");
        }
        let shape = Shape::from((b, c, h / 2, w / 2));
        macro_rules! run {
            ($ty:ty, $variant:ident) => {{
                let x = contiguous::<$ty>(s, l)?;
                let out = Self::argmax(x, b * c, h, w)
                    .into_iter()
                    .map(|i| x[i])
                    .collect();
                Ok((CpuStorage::$variant(out), shape))
            }};
        }
        match s {
            CpuStorage::F32(_) => run!(f32, F32),
            CpuStorage::F64(_) => run!(f64, F64),
            _ => bail!("max pool: unsupported dtype"),
        }
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, c, h, w) = x.dims4()?;
        macro_rules! run {
            ($ty:ty) => {{
                let xv = values::<$ty>(x)?;
                let g = values::<$ty>(grad)?;
                let mut dx = vec![<$ty>::from_f64(0.0); xv.len()];
                for (i, gv) in Self::argmax(&xv, b * c, h, w).into_iter().zip(g) {
                    dx[i] += gv;
                }
                Ok(Some(Tensor::from_vec(dx, x.shape(), x.device())?))
            }};
        }
        match x.dtype() {
            candle_core::DType::F32 => run!(f32),
            candle_core::DType::F64 => run!(f64),
            dt => bail!("max pool: unsupported dtype {dt:?}"),
        }
    }
}

/// Non-overlapping 2×2 max pooling; odd trailing rows/columns are dropped.
pub fn max_pool2(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(MaxPool2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Direct-loop reference convolution.
    fn conv_reference(
        x: &[f64],
        w: &[f64],
        b: usize,
        cin: usize,
        h: usize,
        wd: usize,
        cout: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; b * cout * h * wd];
        for bi in 0..b {
            for co in 0..cout {
                for y in 0..h {
                    for xx in 0..wd {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let sy = y as isize + ky as isize - 1;
                                    let sx = xx as isize + kx as isize - 1;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                                        continue;
                                    }
                                    acc += x
                                        [((bi * cin + ci) * h + sy as usize) * wd + sx as usize]
                                        * w[((co * cin + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * h + y) * wd + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (b, cin, h, w, cout) = (2, 3, 5, 4, 4);
        let x = random(&[b, cin, h, w], 1);
        let k = random(&[cout, cin, 3, 3], 2);
        let got = values::<f64>(&conv3x3(&x, &k).unwrap()).unwrap();
        let want = conv_reference(
            &values(&x).unwrap(),
            &values(&k).unwrap(),
            b,
            cin,
            h,
            w,
            cout,
        );
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_on_single_column_images() {
        let x = random(&[1, 2, 3, 1], 3);
        let k = random(&[2, 2, 3, 3], 4);
        let got = values::<f64>(&conv3x3(&x, &k).unwrap()).unwrap();
        let want = conv_reference(&values(&x).unwrap(), &values(&k).unwrap(), 1, 2, 3, 1, 2);
        for (g, e) in got.iter().zip(&want) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    /// Central finite differences of `loss(x)` against autograd, for every input element.
    fn check_grad(f: impl Fn(&Tensor) -> Tensor, x0: &Tensor) {
        let var = Var::from_tensor(x0).unwrap();
        let loss = f(var.as_tensor());
        let grads = loss.backward().unwrap();
        let analytic = values::<f64>(grads.get(var.as_tensor()).unwrap()).unwrap();
        let base = values::<f64>(x0).unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            let fp = f(&Tensor::from_vec(plus, x0.shape(), &Device::Cpu).unwrap())
                .to_scalar::<f64>()
                .unwrap();
            let fm = f(&Tensor::from_vec(minus, x0.shape(), &Device::Cpu).unwrap())
                .to_scalar::<f64>()
                .unwrap();
            let numeric = (fp - fm) / (2.0 * h);
            let err =
                (numeric - analytic[i]).abs() / numeric.abs().max(analytic[i].abs()).max(1e-3);
            assert!(
                err < 1e-5,
                "element {i}: numeric {numeric} analytic {}",
                analytic[i]
            );
        }
    }

    fn weighted_sum(t: &Tensor, seed: u64) -> Tensor {
        let w = random(t.dims(), seed);
        (t * w).unwrap().sum_all().unwrap()
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let x = random(&[2, 2, 4, 3], 5);
        let k = random(&[3, 2, 3, 3], 6);
        check_grad(|x| weighted_sum(&conv3x3(x, &k).unwrap(), 9), &x);
        check_grad(|k| weighted_sum(&conv3x3(&x, k).unwrap(), 9), &k);
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        let x = random(&[3, 2, 2, 2], 7);
        let g = random(&[2], 8);
        let b = random(&[2], 10);
        check_grad(
            |x| weighted_sum(&batch_norm_train(x, &g, &b).unwrap().0, 11),
            &x,
        );
        check_grad(
            |g| weighted_sum(&batch_norm_train(&x, g, &b).unwrap().0, 11),
            &g,
        );
        check_grad(
            |b| weighted_sum(&batch_norm_train(&x, &g, b).unwrap().0, 11),
            &b,
        );
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let x = random(&[4, 3, 5, 5], 12);
        let ones = Tensor::ones(3, DType::F64, &Device::Cpu).unwrap();
        let zeros = Tensor::zeros(3, DType::F64, &Device::Cpu).unwrap();
        let (y, stats) = batch_norm_train(&x, &ones, &zeros).unwrap();
        assert_eq!(stats.count, 100);
        let y = y.transpose(0, 1).unwrap().flatten_from(1).unwrap();
        let mean = y.mean(1).unwrap().to_vec1::<f64>().unwrap();
        let var = y.sqr().unwrap().mean(1).unwrap().to_vec1::<f64>().unwrap();
        for c in 0..3 {
            assert!(mean[c].abs() < 1e-12);
            assert!((var[c] * (stats.var[c] + BN_EPS) / stats.var[c] - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn max_pool_forward_and_gradient() {
        let x = Tensor::from_vec(
            vec![
                1.0f64, 5.0, 2.0, 0.0, 3.0, 4.0, 7.0, 1.0, 0.5, 0.1, 9.0, 9.5, 0.2, 0.3, 9.9, 2.0,
                -1.0, -2.0, -3.0, -4.0,
            ],
            (1, 1, 5, 4),
            &Device::Cpu,
        )
        .unwrap();
        let y = max_pool2(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(values::<f64>(&y).unwrap(), vec![5.0, 7.0, 0.5, 9.9]);
        let x = random(&[2, 3, 4, 6], 13);
        check_grad(|x| weighted_sum(&max_pool2(x).unwrap(), 14), &x);
    }

    #[test]
    fn f32_and_f64_paths_agree() {
        let x = random(&[2, 3, 6, 6], 15);
        let k = random(&[4, 3, 3, 3], 16);
        let y64 = values::<f64>(&conv3x3(&x, &k).unwrap()).unwrap();
        let y32 = values::<f32>(
            &conv3x3(
                &x.to_dtype(DType::F32).unwrap(),
                &k.to_dtype(DType::F32).unwrap(),
            )
            .unwrap(),
        )
        .unwrap();
        for (a, b) in y64.iter().zip(y32) {
            assert!((a - b as f64).abs() < 1e-5);
        }
    }
}

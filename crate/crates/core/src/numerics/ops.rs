//! Forward and backward kernels for the differentiable operators.
//!
//! These are plain functions over [`Tensor`]s; [`super::Tape`] records them.
//! Layout conventions: images are `[N, C, H, W]`, sequences `[T, N, F]`.

use super::gemm::gemm;
use super::{NumericsError, Result, Tensor};

// ---------------------------------------------------------------------------
// conv2d

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl Conv2dGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        let [n, c, h, w] = *input else {
            return Err(NumericsError::shape("conv2d", format!("input must be [N,C,H,W], got {input:?}")));
        };
        let [o, kc, kh, kw] = *kernel else {
            return Err(NumericsError::shape("conv2d", format!("kernel must be [O,C,kh,kw], got {kernel:?}")));
        };
        if kc != c {
            return Err(NumericsError::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c}"),
            ));
        }
        let (sh, sw) = stride;
        if sh == 0 || sw == 0 {
            return Err(NumericsError::InvalidArgument("conv2d stride must be >= 1".into()));
        }
        let (ph, pw) = padding;
        if kh > h + 2 * ph || kw > w + 2 * pw {
            return Err(NumericsError::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {}x{}", h + 2 * ph, w + 2 * pw),
            ));
        }
        let ho = (h + 2 * ph - kh) / sh + 1;
        let wo = (w + 2 * pw - kw) / sw + 1;
        Ok(Conv2dGeometry { n, c, h, w, o, kh, kw, sh, sw, ph, pw, ho, wo })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

fn im2col(g: &Conv2dGeometry, image: &[f64], cols: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.ho {
                    let y = (oy * g.sh + i) as isize - g.ph as isize;
                    let dst = &mut cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    if y < 0 || y >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let x = (ox * g.sw + j) as isize - g.pw as isize;
                        *d = if x < 0 || x >= g.w as isize { 0.0 } else { src[x as usize] };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &Conv2dGeometry, cols: &[f64], image: &mut [f64]) {
    let p = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * p;
                for oy in 0..g.ho {
                    let y = (oy * g.sh + i) as isize - g.ph as isize;
                    if y < 0 || y >= g.h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * g.wo..row + (oy + 1) * g.wo];
                    let dst = &mut plane[y as usize * g.w..(y as usize + 1) * g.w];
                    for (ox, v) in src.iter().enumerate() {
                        let x = (ox * g.sw + j) as isize - g.pw as isize;
                        if x >= 0 && x < g.w as isize {
                            dst[x as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `[N,C,H,W]` input with `[O,C,kh,kw]` kernel.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let g = Conv2dGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let mut cols = vec![0.0; pl * p];
    let mut out = vec![0.0; g.n * g.o * p];
    let in_stride = g.c * g.h * g.w;
    for s in 0..g.n {
        im2col(&g, &input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        gemm(g.o, pl, p, kernel.data(), false, &cols, false, &mut out[s * g.o * p..(s + 1) * g.o * p], false);
    }
    Ok(Tensor::from_parts(vec![g.n, g.o, g.ho, g.wo], out))
}

/// Gradients of [`conv2d_forward`] with respect to input and kernel.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
    grad_out: &Tensor,
    need_input: bool,
) -> (Option<Tensor>, Tensor) {
    let g = Conv2dGeometry::new(input.shape(), kernel.shape(), stride, padding)
        .expect("geometry validated in forward");
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let in_stride = g.c * g.h * g.w;
    let mut cols = vec![0.0; pl * p];
    let mut dcols = vec![0.0; pl * p];
    let mut dkernel = vec![0.0; kernel.len()];
    let mut dinput = need_input.then(|| vec![0.0; input.len()]);
    for s in 0..g.n {
        let gout = &grad_out.data()[s * g.o * p..(s + 1) * g.o * p];
        im2col(&g, &input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        // dK[O, PL] += dOut[O, P] * cols[PL, P]^T
        gemm(g.o, p, pl, gout, false, &cols, true, &mut dkernel, true);
        if let Some(dinput) = dinput.as_mut() {
            // dcols[PL, P] = K[O, PL]^T * dOut[O, P]
            gemm(pl, g.o, p, kernel.data(), true, gout, false, &mut dcols, false);
            col2im_add(&g, &dcols, &mut dinput[s * in_stride..(s + 1) * in_stride]);
        }
    }
    (
        dinput.map(|d| Tensor::from_parts(input.shape().to_vec(), d)),
        Tensor::from_parts(kernel.shape().to_vec(), dkernel),
    )
}

// ---------------------------------------------------------------------------
// maxpool2d

/// Max pooling without padding. Returns the output and, for every output
/// element, the flat input index of its maximum (ties resolve to the lowest
/// flat index).
pub fn maxpool2d_forward(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = *input.shape() else {
        return Err(NumericsError::shape("maxpool2d", format!("input must be [N,C,H,W], got {:?}", input.shape())));
    };
    let (kh, kw) = window;
    let (sh, sw) = stride;
    if kh == 0 || kw == 0 || sh == 0 || sw == 0 {
        return Err(NumericsError::InvalidArgument("maxpool2d window and stride must be >= 1".into()));
    }
    if kh > h || kw > w {
        return Err(NumericsError::shape(
            "maxpool2d",
            format!("window {kh}x{kw} larger than input {h}x{w}"),
        ));
    }
    let ho = (h - kh) / sh + 1;
    let wo = (w - kw) / sw + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let data = input.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for i in 0..kh {
                    let row = base + (oy * sh + i) * w + ox * sw;
                    for j in 0..kw {
                        let v = data[row + j];
                        // Row-major scan: strict comparison keeps the lowest index on ties.
                        if v > best || best_idx == usize::MAX {
                            best = v;
                            best_idx = row + j;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_idx);
            }
        }
    }
    Ok((Tensor::from_parts(vec![n, c, ho, wo], out), argmax))
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut d = Tensor::zeros(input_shape);
    let dd = d.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dd[idx] += g;
    }
    d
}

// ---------------------------------------------------------------------------
// bidirectional LSTM

/// Parameters of one bidirectional recurrent layer. Index 0 is the
/// left-to-right direction, index 1 right-to-left. Gate order in the `4H`
/// axis is input, forget, candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct BiLstmParams<'a> {
    /// `[4H, F]` per direction.
    pub w_ih: [&'a Tensor; 2],
    /// `[4H, H]` per direction.
    pub w_hh: [&'a Tensor; 2],
    /// `[4H]` per direction.
    pub bias: [&'a Tensor; 2],
}

impl BiLstmParams<'_> {
    fn hidden(&self) -> usize {
        self.w_hh[0].shape()[1]
    }

    fn validate(&self, features: usize) -> Result<usize> {
        let h = self.hidden();
        for d in 0..2 {
            let ok = self.w_ih[d].shape() == [4 * h, features]
                && self.w_hh[d].shape() == [4 * h, h]
                && self.bias[d].shape() == [4 * h];
            if !ok {
                return Err(NumericsError::shape(
                    "bilstm",
                    format!(
                        "direction {d}: w_ih {:?}, w_hh {:?}, bias {:?} inconsistent with F={features}, H={h}",
                        self.w_ih[d].shape(),
                        self.w_hh[d].shape(),
                        self.bias[d].shape()
                    ),
                ));
            }
        }
        Ok(h)
    }
}

#[derive(Clone, Debug)]
struct DirectionCache {
    /// Post-activation gates `[T, N, 4H]`.
    gates: Vec<f64>,
    /// Cell states `[T, N, H]`.
    cells: Vec<f64>,
    /// Hidden outputs `[T, N, H]`.
    hidden: Vec<f64>,
}

/// Saved forward state of [`bilstm_forward`].
#[derive(Clone, Debug)]
pub struct BiLstmCache {
    dirs: [DirectionCache; 2],
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

struct Dims {
    t: usize,
    n: usize,
    f: usize,
    h: usize,
}

#[inline]
fn step_index(step: usize, t: usize, reverse: bool) -> usize {
    if reverse {
        t - 1 - step
    } else {
        step
    }
}

fn direction_forward(x: &[f64], d: &Dims, w_ih: &[f64], w_hh: &[f64], bias: &[f64], reverse: bool) -> DirectionCache {
    let g4 = 4 * d.h;
    let mut gates = vec![0.0; d.t * d.n * g4];
    gemm(d.t * d.n, d.f, g4, x, false, w_ih, true, &mut gates, false);
    for row in gates.chunks_exact_mut(g4) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    let mut cells = vec![0.0; d.t * d.n * d.h];
    let mut hidden = vec![0.0; d.t * d.n * d.h];
    let block = d.n * d.h;
    for step in 0..d.t {
        let t = step_index(step, d.t, reverse);
        let prev = (step > 0).then(|| step_index(step - 1, d.t, reverse));
        let gt = &mut gates[t * d.n * g4..(t + 1) * d.n * g4];
        if let Some(tp) = prev {
            gemm(d.n, d.h, g4, &hidden[tp * block..(tp + 1) * block], false, w_hh, true, gt, true);
        }
        for s in 0..d.n {
            let g = &mut gt[s * g4..(s + 1) * g4];
            for j in 0..d.h {
                let i = sigmoid(g[j]);
                let f = sigmoid(g[d.h + j]);
                let c_hat = g[2 * d.h + j].tanh();
                let o = sigmoid(g[3 * d.h + j]);
                g[j] = i;
                g[d.h + j] = f;
                g[2 * d.h + j] = c_hat;
                g[3 * d.h + j] = o;
                let c_prev = prev.map_or(0.0, |tp| cells[tp * block + s * d.h + j]);
                let c = f * c_prev + i * c_hat;
                cells[t * block + s * d.h + j] = c;
                hidden[t * block + s * d.h + j] = o * c.tanh();
            }
        }
    }
    DirectionCache { gates, cells, hidden }
}

struct DirectionGrads {
    w_ih: Vec<f64>,
    w_hh: Vec<f64>,
    bias: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
fn direction_backward(
    x: &[f64],
    d: &Dims,
    w_ih: &[f64],
    w_hh: &[f64],
    cache: &DirectionCache,
    grad_out: &[f64],
    out_offset: usize,
    reverse: bool,
    dx: Option<&mut [f64]>,
) -> DirectionGrads {
    let g4 = 4 * d.h;
    let block = d.n * d.h;
    let mut dgates = vec![0.0; d.t * d.n * g4];
    let mut dh_next = vec![0.0; block];
    let mut dc_next = vec![0.0; block];
    let mut dw_hh = vec![0.0; g4 * d.h];
    for step in (0..d.t).rev() {
        let t = step_index(step, d.t, reverse);
        let prev = (step > 0).then(|| step_index(step - 1, d.t, reverse));
        for s in 0..d.n {
            let g = &cache.gates[(t * d.n + s) * g4..(t * d.n + s + 1) * g4];
            let dg = &mut dgates[(t * d.n + s) * g4..(t * d.n + s + 1) * g4];
            for j in 0..d.h {
                let k = s * d.h + j;
                let dh = grad_out[(t * d.n + s) * 2 * d.h + out_offset + j] + dh_next[k];
                let (i, f, c_hat, o) = (g[j], g[d.h + j], g[2 * d.h + j], g[3 * d.h + j]);
                let tc = cache.cells[t * block + k].tanh();
                let c_prev = prev.map_or(0.0, |tp| cache.cells[tp * block + k]);
                let d_o = dh * tc;
                let dc = dh * o * (1.0 - tc * tc) + dc_next[k];
                dc_next[k] = dc * f;
                dg[j] = dc * c_hat * i * (1.0 - i);
                dg[d.h + j] = dc * c_prev * f * (1.0 - f);
                dg[2 * d.h + j] = dc * i * (1.0 - c_hat * c_hat);
                dg[3 * d.h + j] = d_o * o * (1.0 - o);
            }
        }
        let dgt = &dgates[t * d.n * g4..(t + 1) * d.n * g4];
        if let Some(tp) = prev {
            let h_prev = &cache.hidden[tp * block..(tp + 1) * block];
            gemm(d.n, g4, d.h, dgt, false, w_hh, false, &mut dh_next, false);
            gemm(g4, d.n, d.h, dgt, true, h_prev, false, &mut dw_hh, true);
        }
    }
    let mut dw_ih = vec![0.0; g4 * d.f];
    gemm(g4, d.t * d.n, d.f, &dgates, true, x, false, &mut dw_ih, false);
    let mut dbias = vec![0.0; g4];
    for row in dgates.chunks_exact(g4) {
        for (b, v) in dbias.iter_mut().zip(row) {
            *b += v;
        }
    }
    if let Some(dx) = dx {
        gemm(d.t * d.n, g4, d.f, &dgates, false, w_ih, false, dx, true);
    }
    DirectionGrads { w_ih: dw_ih, w_hh: dw_hh, bias: dbias }
}

/// Bidirectional gated recurrent layer: `[T, N, F]` to `[T, N, 2H]`, the
/// left-to-right outputs in `[..H]` and right-to-left outputs in `[H..]`.
pub fn bilstm_forward(input: &Tensor, params: &BiLstmParams) -> Result<(Tensor, BiLstmCache)> {
    let [t, n, f] = *input.shape() else {
        return Err(NumericsError::shape("bilstm", format!("input must be [T,N,F], got {:?}", input.shape())));
    };
    let h = params.validate(f)?;
    let dims = Dims { t, n, f, h };
    let run = |d: usize| {
        direction_forward(
            input.data(),
            &dims,
            params.w_ih[d].data(),
            params.w_hh[d].data(),
            params.bias[d].data(),
            d == 1,
        )
    };
    let dirs = [run(0), run(1)];
    let mut out = vec![0.0; t * n * 2 * h];
    for (d, cache) in dirs.iter().enumerate() {
        for (row, src) in cache.hidden.chunks_exact(h).enumerate() {
            out[row * 2 * h + d * h..row * 2 * h + (d + 1) * h].copy_from_slice(src);
        }
    }
    Ok((Tensor::from_parts(vec![t, n, 2 * h], out), BiLstmCache { dirs }))
}

/// Gradients of a bidirectional layer.
pub struct BiLstmGrads {
    pub input: Option<Tensor>,
    pub w_ih: [Tensor; 2],
    pub w_hh: [Tensor; 2],
    pub bias: [Tensor; 2],
}

pub fn bilstm_backward(
    input: &Tensor,
    params: &BiLstmParams,
    cache: &BiLstmCache,
    grad_out: &Tensor,
    need_input: bool,
) -> BiLstmGrads {
    let [t, n, f] = *input.shape() else { unreachable!("validated in forward") };
    let h = params.hidden();
    let dims = Dims { t, n, f, h };
    let mut dx = need_input.then(|| vec![0.0; input.len()]);
    let mut grads = Vec::with_capacity(2);
    for d in 0..2 {
        grads.push(direction_backward(
            input.data(),
            &dims,
            params.w_ih[d].data(),
            params.w_hh[d].data(),
            &cache.dirs[d],
            grad_out.data(),
            d * h,
            d == 1,
            dx.as_deref_mut(),
        ));
    }
    let bwd = grads.pop().unwrap();
    let fwd = grads.pop().unwrap();
    let t2 = |v: Vec<f64>, like: &Tensor| Tensor::from_parts(like.shape().to_vec(), v);
    BiLstmGrads {
        input: dx.map(|v| Tensor::from_parts(input.shape().to_vec(), v)),
        w_ih: [t2(fwd.w_ih, params.w_ih[0]), t2(bwd.w_ih, params.w_ih[1])],
        w_hh: [t2(fwd.w_hh, params.w_hh[0]), t2(bwd.w_hh, params.w_hh[1])],
        bias: [t2(fwd.bias, params.bias[0]), t2(bwd.bias, params.bias[1])],
    }
}

// ---------------------------------------------------------------------------
// temporal resampling

/// Supported temporal scaling factors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ResampleFactor {
    Quarter,
    Half,
    One,
    Two,
    Four,
}

impl ResampleFactor {
    pub fn from_f64(factor: f64) -> Result<Self> {
        Ok(match factor {
            x if x == 0.25 => ResampleFactor::Quarter,
            x if x == 0.5 => ResampleFactor::Half,
            x if x == 1.0 => ResampleFactor::One,
            x if x == 2.0 => ResampleFactor::Two,
            x if x == 4.0 => ResampleFactor::Four,
            _ => {
                return Err(NumericsError::InvalidArgument(format!(
                    "unsupported resample factor {factor}; expected one of 0.25, 0.5, 1, 2, 4"
                )))
            }
        })
    }

    pub fn value(self) -> f64 {
        match self {
            ResampleFactor::Quarter => 0.25,
            ResampleFactor::Half => 0.5,
            ResampleFactor::One => 1.0,
            ResampleFactor::Two => 2.0,
            ResampleFactor::Four => 4.0,
        }
    }

    pub fn inverse(self) -> Self {
        match self {
            ResampleFactor::Quarter => ResampleFactor::Four,
            ResampleFactor::Half => ResampleFactor::Two,
            ResampleFactor::One => ResampleFactor::One,
            ResampleFactor::Two => ResampleFactor::Half,
            ResampleFactor::Four => ResampleFactor::Quarter,
        }
    }

    /// `round(len * factor)`, at least 1.
    pub fn output_len(self, len: usize) -> usize {
        ((len as f64 * self.value()).round() as usize).max(1)
    }
}

/// Source frame range `[start, end)` feeding output frame `j` when shrinking
/// `t` frames to `l`; the ranges partition the input.
#[inline]
fn shrink_range(j: usize, t: usize, l: usize) -> (usize, usize) {
    (j * t / l, (j + 1) * t / l)
}

/// Resamples `[T, N, F]` along time to `out_len` frames: shrinking averages
/// consecutive frames, growing repeats frames.
pub fn resample_forward(input: &Tensor, out_len: usize) -> Result<Tensor> {
    let [t, n, f] = *input.shape() else {
        return Err(NumericsError::shape("resample", format!("input must be [T,N,F], got {:?}", input.shape())));
    };
    if out_len == 0 {
        return Err(NumericsError::InvalidArgument("resample to zero frames".into()));
    }
    let frame = n * f;
    let src = input.data();
    let mut out = vec![0.0; out_len * frame];
    if out_len == t {
        out.copy_from_slice(src);
    } else if out_len < t {
        for j in 0..out_len {
            let (a, b) = shrink_range(j, t, out_len);
            let scale = 1.0 / (b - a) as f64;
            let dst = &mut out[j * frame..(j + 1) * frame];
            for i in a..b {
                for (d, s) in dst.iter_mut().zip(&src[i * frame..(i + 1) * frame]) {
                    *d += s;
                }
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
    } else {
        for j in 0..out_len {
            let i = j * t / out_len;
            out[j * frame..(j + 1) * frame].copy_from_slice(&src[i * frame..(i + 1) * frame]);
        }
    }
    Ok(Tensor::from_parts(vec![out_len, n, f], out))
}

pub fn resample_backward(input_shape: &[usize], grad_out: &Tensor) -> Tensor {
    let (t, frame) = (input_shape[0], input_shape[1] * input_shape[2]);
    let out_len = grad_out.shape()[0];
    let g = grad_out.data();
    let mut d = vec![0.0; t * frame];
    if out_len == t {
        d.copy_from_slice(g);
    } else if out_len < t {
        for j in 0..out_len {
            let (a, b) = shrink_range(j, t, out_len);
            let scale = 1.0 / (b - a) as f64;
            for i in a..b {
                for (dv, gv) in d[i * frame..(i + 1) * frame].iter_mut().zip(&g[j * frame..(j + 1) * frame]) {
                    *dv += gv * scale;
                }
            }
        }
    } else {
        for j in 0..out_len {
            let i = j * t / out_len;
            for (dv, gv) in d[i * frame..(i + 1) * frame].iter_mut().zip(&g[j * frame..(j + 1) * frame]) {
                *dv += gv;
            }
        }
    }
    Tensor::from_parts(input_shape.to_vec(), d)
}

// ---------------------------------------------------------------------------
// log_softmax

/// Log-softmax over the last axis, max-subtracted.
pub fn log_softmax_forward(input: &Tensor) -> Tensor {
    let k = *input.shape().last().unwrap();
    let mut out = input.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.iter_mut().for_each(|v| *v -= lse);
    }
    Tensor::from_parts(input.shape().to_vec(), out)
}

pub fn log_softmax_backward(output: &Tensor, grad_out: &Tensor) -> Tensor {
    let k = *output.shape().last().unwrap();
    let mut d = grad_out.data().to_vec();
    for (drow, orow) in d.chunks_exact_mut(k).zip(output.data().chunks_exact(k)) {
        let gsum: f64 = drow.iter().sum();
        for (dv, ov) in drow.iter_mut().zip(orow) {
            *dv -= ov.exp() * gsum;
        }
    }
    Tensor::from_parts(output.shape().to_vec(), d)
}

// ---------------------------------------------------------------------------
// permute

pub(crate) fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let rank = shape.len();
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            offset -= strides[ax] * new_shape[ax];
            idx[ax] = 0;
        }
    }
    (new_shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_scalar_product() {
        let out = conv2d_forward(&t(&[1, 1, 1, 1], &[3.0]), &t(&[1, 1, 1, 1], &[2.0]), (1, 1), (0, 0)).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn conv_identity_kernel_with_padding() {
        let input = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let out = conv2d_forward(&input, &t(&[1, 1, 3, 3], &k), (1, 1), (1, 1)).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_sum_of_four_products() {
        let out = conv2d_forward(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.]), &t(&[1, 1, 2, 2], &[1.; 4]), (1, 1), (0, 0))
            .unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let g = Conv2dGeometry::new(&[2, 3, 40, 17], &[4, 3, 5, 3], (1, 2), (0, 1)).unwrap();
        assert_eq!((g.ho, g.wo), (36, 9));
        assert!(Conv2dGeometry::new(&[1, 2, 4, 4], &[1, 3, 3, 3], (1, 1), (0, 0)).is_err());
        assert!(Conv2dGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], (1, 1), (0, 0)).is_err());
        assert!(Conv2dGeometry::new(&[1, 1, 4, 4], &[1, 1, 3, 3], (0, 1), (0, 0)).is_err());
    }

    #[test]
    fn maxpool_examples() {
        let (out, _) = maxpool2d_forward(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.]), (2, 2), (2, 2)).unwrap();
        assert_eq!(out.data(), &[4.0]);
        let (out, _) = maxpool2d_forward(&t(&[1, 1, 1, 4], &[1., 3., 2., 5.]), (1, 2), (1, 2)).unwrap();
        assert_eq!(out.data(), &[3.0, 5.0]);
        let (out, _) = maxpool2d_forward(&t(&[1, 2, 4, 4], &[0.7; 32]), (2, 2), (2, 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.7));
        assert!(maxpool2d_forward(&t(&[1, 1, 1, 4], &[0.; 4]), (2, 2), (2, 2)).is_err());
    }

    #[test]
    fn maxpool_ties_route_to_lowest_index() {
        let input = t(&[1, 1, 2, 2], &[5., 5., 5., 5.]);
        let (_, argmax) = maxpool2d_forward(&input, (2, 2), (2, 2)).unwrap();
        assert_eq!(argmax, vec![0]);
        let d = maxpool2d_backward(input.shape(), &argmax, &Tensor::full(&[1, 1, 1, 1], 1.0));
        assert_eq!(d.data(), &[1., 0., 0., 0.]);
    }

    fn lstm_params(h: usize, f: usize, fill: impl Fn(usize) -> f64) -> [Tensor; 6] {
        let mk = |shape: Vec<usize>, off: usize| {
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|i| fill(i + off)).collect()).unwrap()
        };
        [
            mk(vec![4 * h, f], 0),
            mk(vec![4 * h, h], 100),
            mk(vec![4 * h], 200),
            mk(vec![4 * h, f], 0),
            mk(vec![4 * h, h], 100),
            mk(vec![4 * h], 200),
        ]
    }

    fn as_params(p: &[Tensor; 6]) -> BiLstmParams<'_> {
        BiLstmParams { w_ih: [&p[0], &p[3]], w_hh: [&p[1], &p[4]], bias: [&p[2], &p[5]] }
    }

    #[test]
    fn lstm_single_step_directions_agree() {
        let p = lstm_params(3, 2, |i| ((i as f64) * 0.37).sin() * 0.5);
        let x = t(&[1, 2, 2], &[0.3, -0.8, 1.1, 0.4]);
        let (out, _) = bilstm_forward(&x, &as_params(&p)).unwrap();
        for row in out.data().chunks_exact(6) {
            assert_eq!(row[..3], row[3..]);
        }
    }

    #[test]
    fn lstm_zero_parameters_give_zero_output() {
        let p = lstm_params(4, 3, |_| 0.0);
        let x = t(&[5, 2, 3], &(0..30).map(|i| i as f64 * 0.1).collect::<Vec<_>>());
        let (out, _) = bilstm_forward(&x, &as_params(&p)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    /// Hand-unrolled scalar recurrence, H = F = 1, T = 2.
    #[test]
    fn lstm_two_steps_match_manual_unroll() {
        // Gate weights (i, f, g, o) for input, recurrent and bias.
        let wi = [0.5, -0.3, 0.8, 0.2];
        let wh = [0.1, 0.4, -0.6, 0.3];
        let b = [0.0, 1.0, 0.1, -0.2];
        let mk = |v: &[f64], shape: Vec<usize>| Tensor::new(shape, v.to_vec()).unwrap();
        let p = [
            mk(&wi, vec![4, 1]),
            mk(&wh, vec![4, 1]),
            mk(&b, vec![4]),
            mk(&wi, vec![4, 1]),
            mk(&wh, vec![4, 1]),
            mk(&b, vec![4]),
        ];
        let xs = [0.7, -1.2];
        let cell = |x: f64, h: f64, c: f64| {
            let pre: Vec<f64> = (0..4).map(|g| wi[g] * x + wh[g] * h + b[g]).collect();
            let s = |v: f64| 1.0 / (1.0 + (-v).exp());
            let c = s(pre[1]) * c + s(pre[0]) * pre[2].tanh();
            (s(pre[3]) * c.tanh(), c)
        };
        let (h1, c1) = cell(xs[0], 0.0, 0.0);
        let (h2, _) = cell(xs[1], h1, c1);
        let (r1, rc1) = cell(xs[1], 0.0, 0.0);
        let (r0, _) = cell(xs[0], r1, rc1);
        let (out, _) = bilstm_forward(&t(&[2, 1, 1], &xs), &as_params(&p)).unwrap();
        let want = [h1, r0, h2, r1];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn resample_examples() {
        let x = t(&[2, 1, 1], &[2.0, 4.0]);
        assert_eq!(resample_forward(&x, 2).unwrap(), x);
        assert_eq!(resample_forward(&x, 1).unwrap().data(), &[3.0]);
        assert_eq!(resample_forward(&t(&[1, 1, 1], &[3.0]), 2).unwrap().data(), &[3.0, 3.0]);
        assert_eq!(ResampleFactor::Half.output_len(5), 3);
        assert_eq!(ResampleFactor::Quarter.output_len(2), 1);
        assert!(ResampleFactor::from_f64(0.3).is_err());
    }

    #[test]
    fn log_softmax_examples() {
        let out = log_softmax_forward(&t(&[2], &[0.0, 0.0]));
        for v in out.data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
        let a = log_softmax_forward(&t(&[3], &[0.3, -1.0, 2.0]));
        let b = log_softmax_forward(&t(&[3], &[100.3, 99.0, 102.0]));
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let big = log_softmax_forward(&t(&[2], &[1000.0, 0.0]));
        assert!(big.data()[0].abs() < 1e-300 && (big.data()[1] + 1000.0).abs() < 1e-12);
    }

    #[test]
    fn permute_transposes() {
        let (shape, data) = permute_data(&[1., 2., 3., 4., 5., 6.], &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(data, vec![1., 4., 2., 5., 3., 6.]);
        let src: Vec<f64> = (0..24).map(f64::from).collect();
        let (s1, d1) = permute_data(&src, &[2, 3, 4], &[2, 0, 1]);
        let (s2, d2) = permute_data(&d1, &s1, &[1, 2, 0]);
        assert_eq!(s2, vec![2, 3, 4]);
        assert_eq!(d2, src);
        // [a, b, c] -> [c, a, b]: out[k][i][j] = in[i][j][k]
        assert_eq!(d1[(1 * 2 + 1) * 3 + 2], src[(1 * 3 + 2) * 4 + 1]);
    }
}

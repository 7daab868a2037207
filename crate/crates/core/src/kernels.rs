//! Raw NCHW kernels used by the graph. All loops run in a fixed order so
//! results are bitwise reproducible.

use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, pad: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            pad,
            dilation,
            groups,
        }
    }

    pub fn out_size(&self, input: usize, k: usize) -> usize {
        let span = self.dilation * (k - 1) + 1;
        assert!(
            input + 2 * self.pad >= span,
            "kernel span {span} exceeds padded input {}",
            input + 2 * self.pad
        );
        (input + 2 * self.pad - span) / self.stride + 1
    }
}

/// Range of output columns whose input column `o*stride + off` is in bounds.
#[inline]
fn valid_range(out_len: usize, in_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    // o*s + off >= 0  =>  o >= ceil(-off / s)
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    // o*s + off <= in_len - 1
    let hi_incl = (in_len as isize - 1 - off).div_euclid(s);
    let hi = (hi_incl + 1).clamp(0, out_len as isize);
    let lo = lo.clamp(0, hi);
    (lo as usize, hi as usize)
}

pub struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], wshape: &[usize], spec: &ConvSpec) -> Self {
        assert_eq!(x.len(), 4, "conv input must be NCHW, got {x:?}");
        assert_eq!(wshape.len(), 4, "conv weight must be 4-d, got {wshape:?}");
        let (n, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, cin_g, kh, kw) = (wshape[0], wshape[1], wshape[2], wshape[3]);
        assert!(
            cin % spec.groups == 0 && cout % spec.groups == 0,
            "channels {cin}->{cout} not divisible by groups {}",
            spec.groups
        );
        assert_eq!(
            cin / spec.groups,
            cin_g,
            "conv weight expects {cin_g} input channels per group, input has {cin} over {} groups",
            spec.groups
        );
        let oh = spec.out_size(h, kh);
        let ow = spec.out_size(w, kw);
        Self {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh,
            ow,
        }
    }
}

/// One weight tap applied to one (sample, output channel, input channel)
/// pair: the in-bounds output rectangle and the input offset it reads from.
struct Tap {
    widx: usize,
    x_plane: usize,
    o_plane: usize,
    rows: (usize, usize),
    cols: (usize, usize),
    off_y: isize,
    off_x: isize,
}

/// Row geometry used by the inner loops. A 1x1 stride-1 unpadded
/// convolution is treated as a single long row per plane.
#[derive(Clone, Copy)]
struct Rows {
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    stride: usize,
}

impl Rows {
    fn new(g: &ConvGeom, spec: &ConvSpec) -> Self {
        if g.kh == 1 && g.kw == 1 && spec.stride == 1 && spec.pad == 0 {
            let hw = g.h * g.w;
            Self {
                h: 1,
                w: hw,
                oh: 1,
                ow: hw,
                stride: 1,
            }
        } else {
            Self {
                h: g.h,
                w: g.w,
                oh: g.oh,
                ow: g.ow,
                stride: spec.stride,
            }
        }
    }

    /// Yields `(input row start, output row start)` for each in-bounds row.
    #[inline]
    fn each(&self, t: &Tap, mut f: impl FnMut(usize, usize)) {
        for oy in t.rows.0..t.rows.1 {
            let iy = ((oy * self.stride) as isize + t.off_y) as usize;
            let xs = t.x_plane + iy * self.w;
            let xs = (xs as isize + (t.cols.0 * self.stride) as isize + t.off_x) as usize;
            f(xs, t.o_plane + oy * self.ow + t.cols.0);
        }
    }
}

/// Visits every weight tap of a convolution in a fixed order. Shared by the
/// forward and backward kernels so they agree on indexing.
#[inline]
fn for_each_tap(g: &ConvGeom, spec: &ConvSpec, r: &Rows, mut f: impl FnMut(&Tap)) {
    let cin_g = g.cin / spec.groups;
    let cout_g = g.cout / spec.groups;
    let (in_plane, out_plane) = (r.h * r.w, r.oh * r.ow);
    for n in 0..g.n {
        for grp in 0..spec.groups {
            for oc in 0..cout_g {
                let co = grp * cout_g + oc;
                for ic in 0..cin_g {
                    let ci = grp * cin_g + ic;
                    for ky in 0..g.kh {
                        let off_y = (ky * spec.dilation) as isize - spec.pad as isize;
                        let rows = valid_range(r.oh, r.h, r.stride, off_y);
                        if rows.0 >= rows.1 {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let off_x = (kx * spec.dilation) as isize - spec.pad as isize;
                            let cols = valid_range(r.ow, r.w, r.stride, off_x);
                            if cols.0 >= cols.1 {
                                continue;
                            }
                            f(&Tap {
                                widx: ((co * cin_g + ic) * g.kh + ky) * g.kw + kx,
                                x_plane: (n * g.cin + ci) * in_plane,
                                o_plane: (n * g.cout + co) * out_plane,
                                rows,
                                cols,
                                off_y,
                                off_x,
                            });
                        }
                    }
                }
            }
        }
    }
}

fn is_pointwise(g: &ConvGeom, spec: &ConvSpec) -> bool {
    g.kh == 1 && g.kw == 1 && spec.stride == 1 && spec.pad == 0
}

/// Unfolds one sample into a `(cin * kh * kw) x (oh * ow)` matrix.
fn im2col<F: Real>(x: &[F], g: &ConvGeom, spec: &ConvSpec, col: &mut [F]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &mut col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    let dst = &mut row[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(F::zero());
                        continue;
                    }
                    let src = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            F::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adds a column matrix back onto one sample's input gradient.
fn col2im<F: Real>(col: &[F], g: &ConvGeom, spec: &ConvSpec, gx: &mut [F]) {
    let p = g.oh * g.ow;
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = &col[((ci * g.kh + ky) * g.kw + kx) * p..][..p];
                for oy in 0..g.oh {
                    let iy = (oy * spec.stride + ky * spec.dilation) as isize - spec.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut gx[(ci * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, &v) in row[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * spec.stride + kx * spec.dilation) as isize - spec.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward_gemm<F: Real>(x: &[F], wt: &[F], g: &ConvGeom, spec: &ConvSpec, out: &mut [F], accumulate: bool) {
    let (k, p) = (g.cin * g.kh * g.kw, g.oh * g.ow);
    let pointwise = is_pointwise(g, spec);
    let mut col = if pointwise { Vec::new() } else { vec![F::zero(); k * p] };
    for n in 0..g.n {
        let xn = &x[n * g.cin * g.h * g.w..(n + 1) * g.cin * g.h * g.w];
        let b: &[F] = if pointwise {
            xn
        } else {
            im2col(xn, g, spec, &mut col);
            &col
        };
        F::gemm(
            g.cout,
            k,
            p,
            wt,
            false,
            b,
            false,
            &mut out[n * g.cout * p..(n + 1) * g.cout * p],
            accumulate,
        );
    }
}

#[allow(clippy::type_complexity)]
fn conv2d_backward_gemm<F: Real>(
    x: &[F],
    wt: &[F],
    gy: &[F],
    g: &ConvGeom,
    spec: &ConvSpec,
    need_x: bool,
    need_w: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let (k, p) = (g.cin * g.kh * g.kw, g.oh * g.ow);
    let in_len = g.cin * g.h * g.w;
    let pointwise = is_pointwise(g, spec);
    let mut gx = need_x.then(|| vec![F::zero(); x.len()]);
    let mut gw = need_w.then(|| vec![F::zero(); wt.len()]);
    let mut col = if pointwise { Vec::new() } else { vec![F::zero(); k * p] };
    let mut gcol = if pointwise || !need_x {
        Vec::new()
    } else {
        vec![F::zero(); k * p]
    };
    for n in 0..g.n {
        let gyn = &gy[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(gw) = gw.as_mut() {
            let xn = &x[n * in_len..(n + 1) * in_len];
            let b: &[F] = if pointwise {
                xn
            } else {
                im2col(xn, g, spec, &mut col);
                &col
            };
            F::gemm(g.cout, p, k, gyn, false, b, true, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            let gxn = &mut gx[n * in_len..(n + 1) * in_len];
            if pointwise {
                F::gemm(k, g.cout, p, wt, true, gyn, false, gxn, false);
            } else {
                F::gemm(k, g.cout, p, wt, true, gyn, false, &mut gcol, false);
                col2im(&gcol, g, spec, gxn);
            }
        }
    }
    (gx, gw)
}

pub fn conv2d_forward<F: Real>(x: &[F], wt: &[F], bias: Option<&[F]>, g: &ConvGeom, spec: &ConvSpec) -> Vec<F> {
    let mut out = vec![F::zero(); g.n * g.cout * g.oh * g.ow];
    if let Some(b) = bias {
        for (i, plane) in out.chunks_mut(g.oh * g.ow).enumerate() {
            plane.fill(b[i % g.cout]);
        }
    }
    if spec.groups == 1 {
        conv2d_forward_gemm(x, wt, g, spec, &mut out, bias.is_some());
        return out;
    }
    let r = Rows::new(g, spec);
    let s = r.stride;
    for_each_tap(g, spec, &r, |t| {
        let wv = wt[t.widx];
        let len = t.cols.1 - t.cols.0;
        r.each(t, |xs, os| {
            let o = &mut out[os..os + len];
            if s == 1 {
                for (ov, &xv) in o.iter_mut().zip(&x[xs..xs + len]) {
                    *ov += wv * xv;
                }
            } else {
                for (ov, &xv) in o.iter_mut().zip(x[xs..].iter().step_by(s)) {
                    *ov += wv * xv;
                }
            }
        });
    });
    out
}

/// Returns (grad wrt input, grad wrt weight, grad wrt bias).
/// Input, weight and bias gradients, each present only when requested.
pub type ConvGrads<F> = (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>);

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Real>(
    x: &[F],
    wt: &[F],
    gy: &[F],
    g: &ConvGeom,
    spec: &ConvSpec,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> ConvGrads<F> {
    let (mut gx, mut gw) = if spec.groups == 1 {
        conv2d_backward_gemm(x, wt, gy, g, spec, need_x, need_w)
    } else {
        (
            need_x.then(|| vec![F::zero(); x.len()]),
            need_w.then(|| vec![F::zero(); wt.len()]),
        )
    };
    let r = Rows::new(g, spec);
    let s = r.stride;
    if spec.groups > 1 && (need_x || need_w) {
        for_each_tap(g, spec, &r, |t| {
            let len = t.cols.1 - t.cols.0;
            if let Some(gx) = gx.as_mut() {
                let wv = wt[t.widx];
                r.each(t, |xs, os| {
                    let go = &gy[os..os + len];
                    if s == 1 {
                        for (gxv, &gov) in gx[xs..xs + len].iter_mut().zip(go) {
                            *gxv += wv * gov;
                        }
                    } else {
                        for (gxv, &gov) in gx[xs..].iter_mut().step_by(s).zip(go) {
                            *gxv += wv * gov;
                        }
                    }
                });
            }
            if let Some(gw) = gw.as_mut() {
                let mut acc = F::zero();
                r.each(t, |xs, os| {
                    let go = &gy[os..os + len];
                    if s == 1 {
                        for (&xv, &gov) in x[xs..xs + len].iter().zip(go) {
                            acc += xv * gov;
                        }
                    } else {
                        for (&xv, &gov) in x[xs..].iter().step_by(s).zip(go) {
                            acc += xv * gov;
                        }
                    }
                });
                gw[t.widx] += acc;
            }
        });
    }
    let gb = need_b.then(|| {
        let mut gb = vec![F::zero(); g.cout];
        for (i, plane) in gy.chunks(g.oh * g.ow).enumerate() {
            gb[i % g.cout] += plane.iter().copied().sum::<F>();
        }
        gb
    });
    (gx, gw, gb)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PoolGeom {
    pub fn new(x: &[usize], k: usize, stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "pool input must be NCHW, got {x:?}");
        let spec = ConvSpec::new(stride, pad, 1, 1);
        Self {
            n: x[0],
            c: x[1],
            h: x[2],
            w: x[3],
            oh: spec.out_size(x[2], k),
            ow: spec.out_size(x[3], k),
            k,
            stride,
            pad,
        }
    }

    fn window(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.pad as isize;
        let lo = start.max(0) as usize;
        let hi = ((start + self.k as isize).min(len as isize)) as usize;
        (lo, hi)
    }
}

/// Max pooling with implicit -inf padding. Returns the output and the flat
/// input index chosen for each output element (first maximum wins).
pub fn max_pool_forward<F: Real>(x: &[F], g: &PoolGeom) -> (Vec<F>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for nc in 0..g.n * g.c {
        let plane = nc * g.h * g.w;
        for oy in 0..g.oh {
            let (y0, y1) = g.window(oy, g.h);
            for ox in 0..g.ow {
                let (x0, x1) = g.window(ox, g.w);
                let mut best = F::neg_infinity();
                let mut bi = plane + y0 * g.w + x0;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let idx = plane + iy * g.w + ix;
                        if x[idx] > best {
                            best = x[idx];
                            bi = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(bi);
            }
        }
    }
    (out, arg)
}

/// Average pooling that divides by the number of in-bounds taps
/// (padding is not counted).
pub fn avg_pool_forward<F: Real>(x: &[F], g: &PoolGeom) -> Vec<F> {
    let mut out = Vec::with_capacity(g.n * g.c * g.oh * g.ow);
    for nc in 0..g.n * g.c {
        let plane = nc * g.h * g.w;
        for oy in 0..g.oh {
            let (y0, y1) = g.window(oy, g.h);
            for ox in 0..g.ow {
                let (x0, x1) = g.window(ox, g.w);
                let mut acc = F::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x[plane + iy * g.w + ix];
                    }
                }
                out.push(acc / F::of(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub fn avg_pool_backward<F: Real>(gy: &[F], g: &PoolGeom) -> Vec<F> {
    let mut gx = vec![F::zero(); g.n * g.c * g.h * g.w];
    let mut o = 0;
    for nc in 0..g.n * g.c {
        let plane = nc * g.h * g.w;
        for oy in 0..g.oh {
            let (y0, y1) = g.window(oy, g.h);
            for ox in 0..g.ow {
                let (x0, x1) = g.window(ox, g.w);
                let share = gy[o] / F::of(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        gx[plane + iy * g.w + ix] += share;
                    }
                }
                o += 1;
            }
        }
    }
    gx
}

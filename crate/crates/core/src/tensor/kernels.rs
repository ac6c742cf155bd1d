// Raw loops behind the tape primitives. Shapes are validated by the caller.

/// `ln(1 + e^(beta*z)) / beta` in the branch-stable form
/// `max(bz, 0) + ln(1 + e^-|bz|)`.
pub fn softplus(z: f64, beta: f64) -> f64 {
    let bz = beta * z;
    (bz.max(0.0) + (-bz.abs()).exp().ln_1p()) / beta
}

/// Derivative of [`softplus`] with respect to `z`: `sigmoid(beta*z)`.
pub(crate) fn softplus_grad(z: f64, beta: f64) -> f64 {
    sigmoid(beta * z)
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `out = W x + b` with `W` of shape `[out, in]`.
pub(crate) fn dense_forward(x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
    let n_in = x.len();
    for (o, (row, bias)) in out.iter_mut().zip(w.chunks_exact(n_in).zip(b)) {
        *o = bias + dot(row, x);
    }
}

pub(crate) fn dense_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
) {
    let n_in = x.len();
    if let Some(gx) = gx {
        gx.iter_mut().for_each(|v| *v = 0.0);
        for (row, &go) in w.chunks_exact(n_in).zip(g) {
            if go == 0.0 {
                continue;
            }
            for (acc, wv) in gx.iter_mut().zip(row) {
                *acc += go * wv;
            }
        }
    }
    if let Some(gw) = gw {
        for (row, &go) in gw.chunks_exact_mut(n_in).zip(g) {
            for (acc, xv) in row.iter_mut().zip(x) {
                *acc = go * xv;
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width - self.kernel) / self.stride + 1
    }
}

/// Unfolds every receptive field into one row of `[oh*ow, C*k*k]`, in the
/// same `(c, ki, kj)` order as a kernel slice.
fn im2col(g: ConvGeometry, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let patch = g.in_channels * g.kernel * g.kernel;
    let mut cols = vec![0.0; oh * ow * patch];
    for i in 0..oh {
        for j in 0..ow {
            let row = &mut cols[(i * ow + j) * patch..(i * ow + j + 1) * patch];
            let mut at = 0;
            for c in 0..g.in_channels {
                let xin = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
                for ki in 0..g.kernel {
                    let start = (i * g.stride + ki) * g.width + j * g.stride;
                    row[at..at + g.kernel].copy_from_slice(&xin[start..start + g.kernel]);
                    at += g.kernel;
                }
            }
        }
    }
    cols
}

/// Dot product with four independent accumulators so the loop vectorizes.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Valid-padding direct convolution (cross-correlation).
pub(crate) fn conv2d_forward(g: ConvGeometry, x: &[f64], k: &[f64], b: &[f64], out: &mut [f64]) {
    let positions = g.out_height() * g.out_width();
    let patch = g.in_channels * g.kernel * g.kernel;
    let cols = im2col(g, x);
    for (o, plane) in out.chunks_exact_mut(positions).enumerate() {
        let kern = &k[o * patch..(o + 1) * patch];
        for (v, col) in plane.iter_mut().zip(cols.chunks_exact(patch)) {
            *v = b[o] + dot(kern, col);
        }
    }
}

pub(crate) fn conv2d_backward(
    g: ConvGeometry,
    x: &[f64],
    k: &[f64],
    grad_out: &[f64],
    gx: Option<&mut [f64]>,
    gk: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    let patch = g.in_channels * g.kernel * g.kernel;
    if let Some(gb) = gb {
        for (acc, plane) in gb.iter_mut().zip(grad_out.chunks_exact(positions)) {
            *acc = plane.iter().sum();
        }
    }
    if let Some(gk) = gk {
        let cols = im2col(g, x);
        for (gkern, gplane) in gk.chunks_exact_mut(patch).zip(grad_out.chunks_exact(positions)) {
            gkern.iter_mut().for_each(|v| *v = 0.0);
            for (&go, col) in gplane.iter().zip(cols.chunks_exact(patch)) {
                if go != 0.0 {
                    for (acc, xv) in gkern.iter_mut().zip(col) {
                        *acc += go * xv;
                    }
                }
            }
        }
    }
    if let Some(gx) = gx {
        // Gradient of each unfolded patch, then folded back onto the image.
        let mut gcols = vec![0.0; positions * patch];
        for (kern, gplane) in k.chunks_exact(patch).zip(grad_out.chunks_exact(positions)) {
            for (&go, gcol) in gplane.iter().zip(gcols.chunks_exact_mut(patch)) {
                if go != 0.0 {
                    for (acc, kv) in gcol.iter_mut().zip(kern) {
                        *acc += go * kv;
                    }
                }
            }
        }
        gx.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..oh {
            for j in 0..ow {
                let gcol = &gcols[(i * ow + j) * patch..(i * ow + j + 1) * patch];
                let mut at = 0;
                for c in 0..g.in_channels {
                    let gin = &mut gx[c * g.height * g.width..(c + 1) * g.height * g.width];
                    for ki in 0..g.kernel {
                        let start = (i * g.stride + ki) * g.width + j * g.stride;
                        for (acc, v) in gin[start..start + g.kernel]
                            .iter_mut()
                            .zip(&gcol[at..at + g.kernel])
                        {
                            *acc += v;
                        }
                        at += g.kernel;
                    }
                }
            }
        }
    }
}

//! Direct 3D convolution.
//!
//! The stride-1 path works on a zero-padded copy of the input. In that
//! layout every kernel tap is a constant offset into the flat buffer, so
//! each (out channel, in channel, tap) triple is a single long axpy or dot
//! product. Output positions that fall in the padding columns are computed
//! and discarded.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::Shape;
use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy)]
pub(super) struct ConvGeom {
    cin: usize,
    cout: usize,
    n: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    out: [usize; 3],
}

pub(super) struct Wants {
    pub x: bool,
    pub w: bool,
    pub b: bool,
}

pub(super) struct Grads<T> {
    pub x: Option<Vec<T>>,
    pub w: Option<Vec<T>>,
    pub b: Option<Vec<T>>,
}

impl ConvGeom {
    pub fn new(xs: Shape, cout: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let mut out = [0; 3];
        for d in 0..3 {
            let span = xs.dims[d] + 2 * pad;
            if span < k {
                return Err(Error::Shape(format!(
                    "conv input dim {} with pad {pad} is smaller than kernel {k}",
                    xs.dims[d]
                )));
            }
            out[d] = (span - k) / stride + 1;
        }
        Ok(ConvGeom {
            cin: xs.channels,
            cout,
            n: xs.dims,
            k,
            stride,
            pad,
            out,
        })
    }

    pub fn out_shape(&self) -> Shape {
        Shape::new(self.cout, self.out)
    }

    fn taps(&self) -> usize {
        self.k * self.k * self.k
    }

    fn padded(&self) -> [usize; 3] {
        core::array::from_fn(|d| self.n[d] + 2 * self.pad)
    }

    /// Length of the flat span covering all valid outputs in padded layout.
    fn span(&self) -> usize {
        let p = self.padded();
        (self.out[2] - 1) * p[0] * p[1] + (self.out[1] - 1) * p[0] + self.out[0]
    }

    fn tap_offsets(&self) -> Vec<usize> {
        let p = self.padded();
        let (sy, sz) = (p[0], p[0] * p[1]);
        let mut offs = Vec::with_capacity(self.taps());
        for kz in 0..self.k {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    offs.push(kz * sz + ky * sy + kx);
                }
            }
        }
        offs
    }

    fn pad_input<T: Real>(&self, x: &[T]) -> Vec<T> {
        let p = self.padded();
        let pv = p[0] * p[1] * p[2];
        let nv = self.n[0] * self.n[1] * self.n[2];
        let mut xp = vec![T::zero(); self.cin * pv];
        for c in 0..self.cin {
            for z in 0..self.n[2] {
                for y in 0..self.n[1] {
                    let src = &x[c * nv + (z * self.n[1] + y) * self.n[0]..][..self.n[0]];
                    let dst = c * pv + ((z + self.pad) * p[1] + y + self.pad) * p[0] + self.pad;
                    xp[dst..dst + self.n[0]].copy_from_slice(src);
                }
            }
        }
        xp
    }
}

#[inline]
fn axpy<T: Real>(acc: &mut [T], x: &[T], w: T) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += w * v;
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
/// The reduction order is fixed, so results are reproducible.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    let mut s = lanes.iter().copied().sum::<T>();
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

pub(super) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    if g.stride != 1 {
        return forward_strided(g, x, w, b);
    }
    let p = g.padded();
    let pv = p[0] * p[1] * p[2];
    let (sy, sz) = (p[0], p[0] * p[1]);
    let xp = g.pad_input(x);
    let offs = g.tap_offsets();
    let l = g.span();
    let taps = g.taps();
    let ov = g.out[0] * g.out[1] * g.out[2];
    let mut out = vec![T::zero(); g.cout * ov];
    let mut acc = vec![T::zero(); l];
    for oc in 0..g.cout {
        acc.iter_mut().for_each(|a| *a = T::zero());
        for ic in 0..g.cin {
            let xc = &xp[ic * pv..(ic + 1) * pv];
            let wk = &w[(oc * g.cin + ic) * taps..][..taps];
            for (&off, &wt) in offs.iter().zip(wk) {
                axpy(&mut acc, &xc[off..off + l], wt);
            }
        }
        let o = &mut out[oc * ov..(oc + 1) * ov];
        for z in 0..g.out[2] {
            for y in 0..g.out[1] {
                let src = &acc[z * sz + y * sy..][..g.out[0]];
                let dst = &mut o[(z * g.out[1] + y) * g.out[0]..][..g.out[0]];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b[oc];
                }
            }
        }
    }
    out
}

pub(super) fn backward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], gout: &[T], want: Wants) -> Grads<T> {
    let ov = g.out[0] * g.out[1] * g.out[2];
    let gb = want.b.then(|| {
        (0..g.cout)
            .map(|oc| gout[oc * ov..(oc + 1) * ov].iter().copied().sum())
            .collect()
    });
    if !want.x && !want.w {
        return Grads {
            x: None,
            w: None,
            b: gb,
        };
    }
    if g.stride != 1 {
        let (gx, gw) = backward_strided(g, x, w, gout, &want);
        return Grads { x: gx, w: gw, b: gb };
    }
    let p = g.padded();
    let pv = p[0] * p[1] * p[2];
    let (sy, sz) = (p[0], p[0] * p[1]);
    let offs = g.tap_offsets();
    let l = g.span();
    let taps = g.taps();

    // output adjoint in padded-stride layout, zero on the discarded columns
    let mut gp = vec![T::zero(); g.cout * l];
    for oc in 0..g.cout {
        for z in 0..g.out[2] {
            for y in 0..g.out[1] {
                let src = &gout[oc * ov + (z * g.out[1] + y) * g.out[0]..][..g.out[0]];
                let dst = oc * l + z * sz + y * sy;
                gp[dst..dst + g.out[0]].copy_from_slice(src);
            }
        }
    }

    let gw = want.w.then(|| {
        let xp = g.pad_input(x);
        let mut gw = vec![T::zero(); w.len()];
        for oc in 0..g.cout {
            let go = &gp[oc * l..(oc + 1) * l];
            for ic in 0..g.cin {
                let xc = &xp[ic * pv..(ic + 1) * pv];
                let dst = &mut gw[(oc * g.cin + ic) * taps..][..taps];
                for (d, &off) in dst.iter_mut().zip(&offs) {
                    *d = dot(go, &xc[off..off + l]);
                }
            }
        }
        gw
    });

    let gx = want.x.then(|| {
        let mut gxp = vec![T::zero(); g.cin * pv];
        for ic in 0..g.cin {
            let gc = &mut gxp[ic * pv..(ic + 1) * pv];
            for oc in 0..g.cout {
                let go = &gp[oc * l..(oc + 1) * l];
                let wk = &w[(oc * g.cin + ic) * taps..][..taps];
                for (&off, &wt) in offs.iter().zip(wk) {
                    axpy(&mut gc[off..off + l], go, wt);
                }
            }
        }
        let nv = g.n[0] * g.n[1] * g.n[2];
        let mut gx = vec![T::zero(); g.cin * nv];
        for c in 0..g.cin {
            for z in 0..g.n[2] {
                for y in 0..g.n[1] {
                    let src = c * pv + ((z + g.pad) * p[1] + y + g.pad) * p[0] + g.pad;
                    let dst = c * nv + (z * g.n[1] + y) * g.n[0];
                    gx[dst..dst + g.n[0]].copy_from_slice(&gxp[src..src + g.n[0]]);
                }
            }
        }
        gx
    });

    Grads { x: gx, w: gw, b: gb }
}

/// Visit every (output index, input index, tap index) triple of a strided
/// convolution that touches a real (non-padding) input voxel.
fn for_each_tap(g: &ConvGeom, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let nv = g.n[0] * g.n[1] * g.n[2];
    let ov = g.out[0] * g.out[1] * g.out[2];
    let taps = g.taps();
    let pad = g.pad as isize;
    for oc in 0..g.cout {
        for ic in 0..g.cin {
            for oz in 0..g.out[2] {
                for oy in 0..g.out[1] {
                    for ox in 0..g.out[0] {
                        let o = oc * ov + (oz * g.out[1] + oy) * g.out[0] + ox;
                        for kz in 0..g.k {
                            let iz = (oz * g.stride + kz) as isize - pad;
                            if iz < 0 || iz >= g.n[2] as isize {
                                continue;
                            }
                            for ky in 0..g.k {
                                let iy = (oy * g.stride + ky) as isize - pad;
                                if iy < 0 || iy >= g.n[1] as isize {
                                    continue;
                                }
                                for kx in 0..g.k {
                                    let ix = (ox * g.stride + kx) as isize - pad;
                                    if ix < 0 || ix >= g.n[0] as isize {
                                        continue;
                                    }
                                    let i = ic * nv + ((iz as usize) * g.n[1] + iy as usize) * g.n[0] + ix as usize;
                                    let t = (oc * g.cin + ic) * taps + (kz * g.k + ky) * g.k + kx;
                                    f(oc, ic, o, i, t);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn forward_strided<T: Real>(g: &ConvGeom, x: &[T], w: &[T], b: &[T]) -> Vec<T> {
    let ov = g.out[0] * g.out[1] * g.out[2];
    let mut out = vec![T::zero(); g.cout * ov];
    for (oc, chunk) in out.chunks_mut(ov).enumerate() {
        chunk.iter_mut().for_each(|v| *v = b[oc]);
    }
    for_each_tap(g, |_, _, o, i, t| out[o] += w[t] * x[i]);
    out
}

fn backward_strided<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    gout: &[T],
    want: &Wants,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut gx = want.x.then(|| vec![T::zero(); x.len()]);
    let mut gw = want.w.then(|| vec![T::zero(); w.len()]);
    for_each_tap(g, |_, _, o, i, t| {
        if let Some(gx) = gx.as_mut() {
            gx[i] += w[t] * gout[o];
        }
        if let Some(gw) = gw.as_mut() {
            gw[t] += x[i] * gout[o];
        }
    });
    (gx, gw)
}

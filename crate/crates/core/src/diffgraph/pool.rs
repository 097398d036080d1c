use alloc::vec;
use alloc::vec::Vec;

use super::Shape;
use crate::real::Real;

pub(super) fn maxpool2_forward<T: Real>(x: &[T], s: Shape) -> (Vec<T>, Vec<u32>, Shape) {
    let [nx, ny, nz] = s.dims;
    let od = [nx / 2, ny / 2, nz / 2];
    let out_shape = Shape::new(s.channels, od);
    let nv = s.spatial_len();
    let mut out = Vec::with_capacity(out_shape.len());
    let mut argmax = Vec::with_capacity(out_shape.len());
    for c in 0..s.channels {
        let xc = &x[c * nv..(c + 1) * nv];
        for oz in 0..od[2] {
            for oy in 0..od[1] {
                for ox in 0..od[0] {
                    let mut best = usize::MAX;
                    // candidates visited in increasing linear index; strict `>` keeps the first on ties
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((2 * oz + dz) * ny + 2 * oy + dy) * nx + 2 * ox + dx;
                                if best == usize::MAX || xc[i] > xc[best] {
                                    best = i;
                                }
                            }
                        }
                    }
                    out.push(xc[best]);
                    argmax.push(best as u32);
                }
            }
        }
    }
    (out, argmax, out_shape)
}

pub(super) fn maxpool2_backward<T: Real>(gx: &mut [T], g: &[T], argmax: &[u32], xs: Shape, os: Shape) {
    let nv = xs.spatial_len();
    let ov = os.spatial_len();
    for c in 0..xs.channels {
        for o in 0..ov {
            gx[c * nv + argmax[c * ov + o] as usize] += g[c * ov + o];
        }
    }
}

/// Source taps and weights for output sample `j` of a 2x linear upsampling
/// along an axis of length `n`. Output `j` sits at input coordinate
/// `j/2 - 1/4`; indices outside the grid clamp to the edge.
#[inline]
fn taps(j: usize, n: usize) -> (usize, usize) {
    let i = j / 2;
    let other = if j.is_multiple_of(2) {
        i.saturating_sub(1)
    } else {
        (i + 1).min(n - 1)
    };
    (i, other)
}

/// Strides for viewing a tensor as `[outer, n, inner]` around `axis`.
fn axis_view(s: Shape, axis: usize) -> (usize, usize, usize) {
    let inner: usize = s.dims[..axis].iter().product();
    let outer: usize = s.dims[axis + 1..].iter().product::<usize>() * s.channels;
    (outer, s.dims[axis], inner)
}

fn upsample_axis<T: Real>(x: &[T], s: Shape, axis: usize) -> (Vec<T>, Shape) {
    let (outer, n, inner) = axis_view(s, axis);
    let mut dims = s.dims;
    dims[axis] = 2 * n;
    let os = Shape::new(s.channels, dims);
    let mut out = vec![T::zero(); os.len()];
    let (wa, wb) = (T::of(0.75), T::of(0.25));
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for j in 0..2 * n {
            let (a, b) = taps(j, n);
            let (ra, rb) = (&src[a * inner..][..inner], &src[b * inner..][..inner]);
            for ((d, &va), &vb) in dst[j * inner..][..inner].iter_mut().zip(ra).zip(rb) {
                *d = wa * va + wb * vb;
            }
        }
    }
    (out, os)
}

fn upsample_axis_transpose<T: Real>(g: &[T], s_in: Shape, axis: usize) -> Vec<T> {
    let (outer, n, inner) = axis_view(s_in, axis);
    let mut gx = vec![T::zero(); s_in.len()];
    let (wa, wb) = (T::of(0.75), T::of(0.25));
    for o in 0..outer {
        let src = &g[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        let dst = &mut gx[o * n * inner..(o + 1) * n * inner];
        for j in 0..2 * n {
            let (a, b) = taps(j, n);
            let gr = &src[j * inner..][..inner];
            for (d, &v) in dst[a * inner..][..inner].iter_mut().zip(gr) {
                *d += wa * v;
            }
            for (d, &v) in dst[b * inner..][..inner].iter_mut().zip(gr) {
                *d += wb * v;
            }
        }
    }
    gx
}

pub(super) fn upsample2_forward<T: Real>(x: &[T], s: Shape) -> (Vec<T>, Shape) {
    let (a, sa) = upsample_axis(x, s, 0);
    let (b, sb) = upsample_axis(&a, sa, 1);
    upsample_axis(&b, sb, 2)
}

pub(super) fn upsample2_backward<T: Real>(g: &[T], xs: Shape) -> Vec<T> {
    let s1 = Shape::new(xs.channels, [2 * xs.dims[0], xs.dims[1], xs.dims[2]]);
    let s2 = Shape::new(xs.channels, [2 * xs.dims[0], 2 * xs.dims[1], xs.dims[2]]);
    let g2 = upsample_axis_transpose(g, s2, 2);
    let g1 = upsample_axis_transpose(&g2, s1, 1);
    upsample_axis_transpose(&g1, xs, 0)
}

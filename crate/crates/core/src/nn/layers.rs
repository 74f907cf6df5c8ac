//! Convolution, pooling, up-sampling and activation layers over
//! `(C, N, H, W)` activations.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, Array4, ArrayView2, ArrayView4, Axis};
use rand::Rng;

use super::{ParamId, ParamStore, Grads, Real};

/// Unfolds `k x k` same-padded neighborhoods into columns:
/// `(C*k*k, N*H*W)`, row index `(c*k + ky)*k + kx`.
pub fn im2col<T: Real>(x: &Array4<T>, k: usize) -> Array2<T> {
    let (c, n, h, w) = x.dim();
    let x = x.as_standard_layout();
    let src = x.as_slice().expect("standard layout");
    let p = k / 2;
    let mut cols = Array2::<T>::zeros((c * k * k, n * h * w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut r = cols.row_mut(row);
                let dst = r.as_slice_mut().expect("row contiguous");
                let (x_lo, x_hi) = (p.saturating_sub(kx), (w + p).saturating_sub(kx).min(w));
                for ni in 0..n {
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < p || sy - p >= h {
                            continue;
                        }
                        let sy = sy - p;
                        let base_src = ((ci * n + ni) * h + sy) * w;
                        let base_dst = (ni * h + y) * w;
                        if x_lo < x_hi {
                            let s0 = base_src + x_lo + kx - p;
                            dst[base_dst + x_lo..base_dst + x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, summing overlaps.
pub fn col2im<T: Real>(cols: &Array2<T>, shape: (usize, usize, usize, usize), k: usize) -> Array4<T> {
    let (c, n, h, w) = shape;
    let p = k / 2;
    let mut out = Array4::<T>::zeros(shape);
    let dst = out.as_slice_mut().expect("fresh array");
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = cols.row((ci * k + ky) * k + kx);
                let src = row.as_slice().expect("row contiguous");
                let (x_lo, x_hi) = (p.saturating_sub(kx), (w + p).saturating_sub(kx).min(w));
                for ni in 0..n {
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < p || sy - p >= h || x_lo >= x_hi {
                            continue;
                        }
                        let base_dst = ((ci * n + ni) * h + sy - p) * w;
                        let base_src = (ni * h + y) * w;
                        for xo in x_lo..x_hi {
                            dst[base_dst + xo + kx - p] += src[base_src + xo];
                        }
                    }
                }
            }
        }
    }
    out
}

fn flat<'a, T: Real>(x: ArrayView4<'a, T>) -> ArrayView2<'a, T> {
    let c = x.dim().0;
    let n = x.len() / c;
    x.into_shape_with_order((c, n)).expect("standard layout")
}

/// Stride-1 same-padded `k x k` convolution (odd `k`).
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Conv2d {
    pub fn new<T: Real>(
        ps: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(k % 2 == 1, "same padding needs an odd kernel");
        let w = ps.add_he(format!("{name}.w"), vec![cout, cin * k * k], cin * k * k, rng);
        let b = bias.then(|| ps.add_zeros(format!("{name}.b"), vec![cout]));
        Conv2d { w, b, cin, cout, k }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let (c, n, h, w) = x.dim();
        assert_eq!(c, self.cin, "conv input channels");
        let cols = im2col(x, self.k);
        let mut y = ps.mat(self.w).dot(&cols);
        if let Some(b) = self.b {
            for (mut row, &bv) in y.outer_iter_mut().zip(ps.vec(b).iter()) {
                row.mapv_inplace(|v| v + bv);
            }
        }
        y.into_shape_with_order((self.cout, n, h, w)).expect("gemm output is contiguous")
    }

    /// Accumulates parameter gradients; returns the input gradient if asked.
    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Array4<T>,
        dy: &Array4<T>,
        want_dx: bool,
    ) -> Option<Array4<T>> {
        let cols = im2col(x, self.k);
        let dy = dy.as_standard_layout();
        let dy2 = flat(dy.view());
        general_mat_mul(T::one(), &dy2, &cols.t(), T::one(), &mut grads.mat_mut(self.w, self.cout));
        if let Some(b) = self.b {
            *grads.vec_mut(b) += &dy2.sum_axis(Axis(1));
        }
        want_dx.then(|| col2im(&ps.mat(self.w).t().dot(&dy2), x.dim(), self.k))
    }
}

/// Transposed convolution with a 2x2 kernel and stride 2 (exact 2x
/// up-sampling, no overlap between output blocks).
#[derive(Debug, Clone)]
pub struct UpConv2 {
    pub w: ParamId,
    pub b: ParamId,
    pub cin: usize,
    pub cout: usize,
}

impl UpConv2 {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        // Row (dy*2 + dx)*cout + co.
        let w = ps.add_he(format!("{name}.w"), vec![4 * cout, cin], cin, rng);
        let b = ps.add_zeros(format!("{name}.b"), vec![cout]);
        UpConv2 { w, b, cin, cout }
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Array4<T>) -> Array4<T> {
        let (c, n, h, w) = x.dim();
        assert_eq!(c, self.cin, "up-conv input channels");
        let x = x.as_standard_layout();
        let y2 = ps.mat(self.w).dot(&flat(x.view()));
        let bias = ps.vec(self.b);
        let mut out = Array4::<T>::zeros((self.cout, n, 2 * h, 2 * w));
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            for co in 0..self.cout {
                let src = y2.row(q * self.cout + co);
                let src = src.into_shape_with_order((n, h, w)).expect("contiguous row");
                let mut dst = out.slice_mut(s![co, .., dy..;2, dx..;2]);
                dst.assign(&src);
                dst.mapv_inplace(|v| v + bias[co]);
            }
        }
        out
    }

    pub fn backward<T: Real>(
        &self,
        ps: &ParamStore<T>,
        grads: &mut Grads<T>,
        x: &Array4<T>,
        dout: &Array4<T>,
    ) -> Array4<T> {
        let (_, n, h, w) = x.dim();
        let mut g2 = Array2::<T>::zeros((4 * self.cout, n * h * w));
        for q in 0..4 {
            let (dy, dx) = (q / 2, q % 2);
            for co in 0..self.cout {
                let mut row = g2.row_mut(q * self.cout + co);
                let src = dout.slice(s![co, .., dy..;2, dx..;2]);
                for (d, s) in row.iter_mut().zip(src.iter()) {
                    *d = *s;
                }
            }
        }
        let x = x.as_standard_layout();
        let x2 = flat(x.view());
        general_mat_mul(T::one(), &g2, &x2.t(), T::one(), &mut grads.mat_mut(self.w, 4 * self.cout));
        let db = dout.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(1));
        *grads.vec_mut(self.b) += &db;
        ps.mat(self.w)
            .t()
            .dot(&g2)
            .into_shape_with_order((self.cin, n, h, w))
            .expect("gemm output is contiguous")
    }
}

pub fn relu<T: Real>(x: Array4<T>) -> Array4<T> {
    x.mapv_into(|v| if v > T::zero() { v } else { T::zero() })
}

/// Backward of ReLU given its output.
pub fn relu_backward<T: Real>(out: &Array4<T>, mut dy: Array4<T>) -> Array4<T> {
    ndarray::Zip::from(&mut dy).and(out).for_each(|d, &o| {
        if o <= T::zero() {
            *d = T::zero();
        }
    });
    dy
}

/// 2x2 max pooling with stride 2; returns the output and the argmax
/// position (0..4, row-major in the window) of every output element.
pub fn maxpool2<T: Real>(x: &Array4<T>) -> (Array4<T>, Array4<u8>) {
    let (c, n, h, w) = x.dim();
    assert!(h % 2 == 0 && w % 2 == 0, "pooling needs even spatial size");
    let mut out = Array4::<T>::zeros((c, n, h / 2, w / 2));
    let mut arg = Array4::<u8>::zeros((c, n, h / 2, w / 2));
    ndarray::Zip::indexed(&mut out).and(&mut arg).for_each(|(ci, ni, y, xo), o, a| {
        let mut best = x[[ci, ni, 2 * y, 2 * xo]];
        let mut bi = 0u8;
        for q in 1..4u8 {
            let v = x[[ci, ni, 2 * y + (q / 2) as usize, 2 * xo + (q % 2) as usize]];
            if v > best {
                best = v;
                bi = q;
            }
        }
        *o = best;
        *a = bi;
    });
    (out, arg)
}

pub fn maxpool2_backward<T: Real>(arg: &Array4<u8>, dy: &Array4<T>) -> Array4<T> {
    let (c, n, h, w) = dy.dim();
    let mut dx = Array4::<T>::zeros((c, n, 2 * h, 2 * w));
    ndarray::Zip::indexed(dy).and(arg).for_each(|(ci, ni, y, xo), &d, &q| {
        dx[[ci, ni, 2 * y + (q / 2) as usize, 2 * xo + (q % 2) as usize]] = d;
    });
    dx
}

/// Channel concatenation.
pub fn concat<T: Real>(a: &Array4<T>, b: &Array4<T>) -> Array4<T> {
    ndarray::concatenate(Axis(0), &[a.view(), b.view()]).expect("matching spatial dims")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct same-padded convolution used as an oracle.
    fn conv_direct(x: &Array4<f64>, w: &Array2<f64>, b: &[f64], k: usize) -> Array4<f64> {
        let (c, n, h, wd) = x.dim();
        let cout = w.dim().0;
        let p = k as isize / 2;
        Array4::from_shape_fn((cout, n, h, wd), |(co, ni, y, xo)| {
            let mut acc = b[co];
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let sy = y as isize + ky as isize - p;
                        let sx = xo as isize + kx as isize - p;
                        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < wd {
                            acc += w[[co, (ci * k + ky) * k + kx]] * x[[ci, ni, sy as usize, sx as usize]];
                        }
                    }
                }
            }
            acc
        })
    }

    fn random4(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn conv_matches_direct_evaluation() {
        for k in [1, 3, 5] {
            let mut ps = ParamStore::<f64>::new();
            let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
            let conv = Conv2d::new(&mut ps, "c", 3, 4, k, true, &mut rng);
            ps.values[conv.b.unwrap().0] = ndarray::Array1::from(vec![0.1, -0.2, 0.3, 0.0]);
            let x = random4((3, 2, 5, 6), 9);
            let got = conv.forward(&ps, &x);
            let expect = conv_direct(&x, &ps.mat(conv.w).to_owned(), ps.vec(conv.b.unwrap()).as_slice().unwrap(), k);
            assert!((got - expect).iter().all(|d| d.abs() < 1e-12));
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), c> == <x, col2im(c)>
        let x = random4((2, 3, 4, 5), 1);
        let cols_shape = (2 * 9, 3 * 4 * 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = Array2::from_shape_fn(cols_shape, |_| rng.random_range(-1.0..1.0));
        let lhs = (&im2col(&x, 3) * &c).sum();
        let rhs = (&x * &col2im(&c, x.dim(), 3)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn upconv_places_quadrants() {
        let mut ps = ParamStore::<f64>::new();
        let up = UpConv2::new(&mut ps, "u", 1, 1, &mut ChaCha8Rng::seed_from_u64(0));
        ps.values[up.w.0] = ndarray::Array1::from(vec![1.0, 2.0, 3.0, 4.0]);
        ps.values[up.b.0] = ndarray::Array1::from(vec![0.5]);
        let x = Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 10.0]).unwrap();
        let y = up.forward(&ps, &x);
        assert_eq!(y.dim(), (1, 1, 2, 4));
        let row0: Vec<f64> = y.slice(s![0, 0, 0, ..]).to_vec();
        let row1: Vec<f64> = y.slice(s![0, 0, 1, ..]).to_vec();
        assert_eq!(row0, vec![1.5, 2.5, 10.5, 20.5]);
        assert_eq!(row1, vec![3.5, 4.5, 30.5, 40.5]);
    }

    #[test]
    fn maxpool_round_trip() {
        let x = Array4::from_shape_vec((1, 1, 2, 4), vec![1.0, 5.0, 0.0, -1.0, 2.0, 3.0, -2.0, -3.0]).unwrap();
        let (y, arg) = maxpool2(&x);
        assert_eq!(y.iter().copied().collect::<Vec<f64>>(), vec![5.0, 0.0]);
        let dx = maxpool2_backward(&arg, &Array4::from_elem((1, 1, 1, 2), 1.0));
        assert_eq!(
            dx.iter().copied().collect::<Vec<f64>>(),
            vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }
}

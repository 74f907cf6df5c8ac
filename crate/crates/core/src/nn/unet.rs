//! UNet encoder-decoder with skip connections and a 1x1 output head.

use ndarray::{s, Array4};
use rand::Rng;

use super::layers::{concat, maxpool2, maxpool2_backward, relu, relu_backward, Conv2d, UpConv2};
use super::{Grads, ParamStore, Real};

/// `widths[l]` channels at resolution level `l`; each level halves the
/// spatial size, so inputs must be divisible by `2^(levels-1)`.
#[derive(Debug, Clone)]
pub struct Unet {
    enc: Vec<(Conv2d, Conv2d)>,
    ups: Vec<UpConv2>,
    dec: Vec<(Conv2d, Conv2d)>,
    head: Conv2d,
    pub cin: usize,
    pub cout: usize,
}

#[derive(Debug, Clone)]
struct EncCache<T> {
    input: Array4<T>,
    a1: Array4<T>,
    a2: Array4<T>,
    pool_arg: Option<Array4<u8>>,
}

#[derive(Debug, Clone)]
struct DecCache<T> {
    up_in: Array4<T>,
    cat: Array4<T>,
    d1: Array4<T>,
    d2: Array4<T>,
}

#[derive(Debug, Clone)]
pub struct UnetCache<T> {
    enc: Vec<EncCache<T>>,
    dec: Vec<DecCache<T>>,
    head_in: Array4<T>,
}

impl Unet {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, widths: &[usize], rng: &mut impl Rng) -> Self {
        assert!(!widths.is_empty(), "UNet needs at least one level");
        let mut enc = Vec::new();
        let mut prev = cin;
        for (l, &w) in widths.iter().enumerate() {
            enc.push((
                Conv2d::new(ps, &format!("{name}.enc{l}a"), prev, w, 3, true, rng),
                Conv2d::new(ps, &format!("{name}.enc{l}b"), w, w, 3, true, rng),
            ));
            prev = w;
        }
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for l in (0..widths.len() - 1).rev() {
            let w = widths[l];
            ups.push(UpConv2::new(ps, &format!("{name}.up{l}"), widths[l + 1], w, rng));
            dec.push((
                Conv2d::new(ps, &format!("{name}.dec{l}a"), 2 * w, w, 3, true, rng),
                Conv2d::new(ps, &format!("{name}.dec{l}b"), w, w, 3, true, rng),
            ));
        }
        let head = Conv2d::new(ps, &format!("{name}.head"), widths[0], cout, 1, true, rng);
        Unet { enc, ups, dec, head, cin, cout }
    }

    pub fn levels(&self) -> usize {
        self.enc.len()
    }

    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, x: &Array4<T>) -> (Array4<T>, UnetCache<T>) {
        let levels = self.levels();
        let mut enc_cache = Vec::with_capacity(levels);
        let mut cur = x.clone();
        for (l, (c1, c2)) in self.enc.iter().enumerate() {
            let a1 = relu(c1.forward(ps, &cur));
            let a2 = relu(c2.forward(ps, &a1));
            let (next, pool_arg) = if l + 1 < levels {
                let (p, arg) = maxpool2(&a2);
                (p, Some(arg))
            } else {
                (a2.clone(), None)
            };
            enc_cache.push(EncCache {
                input: cur,
                a1,
                a2,
                pool_arg,
            });
            cur = next;
        }
        let mut dec_cache = Vec::with_capacity(levels - 1);
        for (j, (up, (c1, c2))) in self.ups.iter().zip(&self.dec).enumerate() {
            let l = levels - 2 - j;
            let u = up.forward(ps, &cur);
            let cat = concat(&u, &enc_cache[l].a2);
            let d1 = relu(c1.forward(ps, &cat));
            let d2 = relu(c2.forward(ps, &d1));
            dec_cache.push(DecCache {
                up_in: cur,
                cat,
                d1,
                d2: d2.clone(),
            });
            cur = d2;
        }
        let out = self.head.forward(ps, &cur);
        (
            out,
            UnetCache {
                enc: enc_cache,
                dec: dec_cache,
                head_in: cur,
            },
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, cache: &UnetCache<T>, dout: &Array4<T>) -> Array4<T> {
        let levels = self.levels();
        let mut d = self.head.backward(ps, grads, &cache.head_in, dout, true).expect("dx requested");
        // Gradients flowing into each encoder level's skip output.
        let mut d_skip: Vec<Option<Array4<T>>> = vec![None; levels];
        for (j, (up, (c1, c2))) in self.ups.iter().zip(&self.dec).enumerate().rev() {
            let l = levels - 2 - j;
            let dc = &cache.dec[j];
            let g = relu_backward(&dc.d2, d);
            let g = c2.backward(ps, grads, &dc.d1, &g, true).expect("dx requested");
            let g = relu_backward(&dc.d1, g);
            let g_cat = c1.backward(ps, grads, &dc.cat, &g, true).expect("dx requested");
            let w = up.cout;
            d_skip[l] = Some(g_cat.slice(s![w.., .., .., ..]).to_owned());
            let g_up = g_cat.slice(s![..w, .., .., ..]).to_owned();
            d = up.backward(ps, grads, &dc.up_in, &g_up);
        }
        for l in (0..levels).rev() {
            let ec = &cache.enc[l];
            let mut g = match &ec.pool_arg {
                Some(arg) => maxpool2_backward(arg, &d),
                None => d,
            };
            if let Some(sk) = d_skip[l].take() {
                g += &sk;
            }
            let (c1, c2) = &self.enc[l];
            let g = relu_backward(&ec.a2, g);
            let g = c2.backward(ps, grads, &ec.a1, &g, true).expect("dx requested");
            let g = relu_backward(&ec.a1, g);
            d = c1.backward(ps, grads, &ec.input, &g, true).expect("dx requested");
        }
        d
    }
}

//! Convolutional LSTM cell shared over time steps, and the summation fusion
//! of its per-step hidden maps.

use ndarray::{s, Array4, Axis, Zip};
use rand::Rng;

use super::layers::Conv2d;
use super::{Grads, ParamStore, Real};

/// Hidden and cell maps, each `(C_hidden, N, h, w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClstmState<T> {
    pub h: Array4<T>,
    pub c: Array4<T>,
}

impl<T: Real> ClstmState<T> {
    pub fn zeros(hidden: usize, n: usize, height: usize, width: usize) -> Self {
        ClstmState {
            h: Array4::zeros((hidden, n, height, width)),
            c: Array4::zeros((hidden, n, height, width)),
        }
    }
}

/// Gate pre-activations are `W_x * x + W_h * H + b`, with the four gates
/// stacked along the output channels in the order input, forget, output,
/// candidate.
#[derive(Debug, Clone)]
pub struct Clstm {
    pub conv_x: Conv2d,
    pub conv_h: Conv2d,
    pub cin: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone)]
struct StepCache<T> {
    x: Array4<T>,
    h_prev: Array4<T>,
    c_prev: Array4<T>,
    gates: [Array4<T>; 4],
    tanh_c: Array4<T>,
}

#[derive(Debug, Clone)]
pub struct ClstmCache<T> {
    steps: Vec<StepCache<T>>,
}

fn sigmoid<T: Real>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

impl Clstm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, cin: usize, hidden: usize, k: usize, rng: &mut impl Rng) -> Self {
        Clstm {
            conv_x: Conv2d::new(ps, &format!("{name}.x"), cin, 4 * hidden, k, true, rng),
            conv_h: Conv2d::new(ps, &format!("{name}.h"), hidden, 4 * hidden, k, false, rng),
            cin,
            hidden,
        }
    }

    fn step_cached<T: Real>(&self, ps: &ParamStore<T>, x: &Array4<T>, prev: &ClstmState<T>) -> (ClstmState<T>, StepCache<T>) {
        let pre = self.conv_x.forward(ps, x) + self.conv_h.forward(ps, &prev.h);
        let ch = self.hidden;
        let gate = |k: usize, tanh: bool| {
            pre.slice(s![k * ch..(k + 1) * ch, .., .., ..])
                .mapv(|v| if tanh { v.tanh() } else { sigmoid(v) })
        };
        let (i, f, o, g) = (gate(0, false), gate(1, false), gate(2, false), gate(3, true));
        let c = &f * &prev.c + &i * &g;
        let tanh_c = c.mapv(|v| v.tanh());
        let h = &o * &tanh_c;
        let cache = StepCache {
            x: x.clone(),
            h_prev: prev.h.clone(),
            c_prev: prev.c.clone(),
            gates: [i, f, o, g],
            tanh_c,
        };
        (ClstmState { h, c }, cache)
    }

    /// One recurrence step.
    pub fn step<T: Real>(&self, ps: &ParamStore<T>, x: &Array4<T>, prev: &ClstmState<T>) -> ClstmState<T> {
        self.step_cached(ps, x, prev).0
    }

    /// Runs the cell over `xs` from a zero state; returns every step's hidden map.
    pub fn forward<T: Real>(&self, ps: &ParamStore<T>, xs: &[Array4<T>]) -> (Vec<Array4<T>>, ClstmCache<T>) {
        let (_, n, h, w) = xs[0].dim();
        let mut state = ClstmState::zeros(self.hidden, n, h, w);
        let mut hs = Vec::with_capacity(xs.len());
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let (next, cache) = self.step_cached(ps, x, &state);
            hs.push(next.h.clone());
            steps.push(cache);
            state = next;
        }
        (hs, ClstmCache { steps })
    }

    /// Backpropagation through time. `d_hs[t]` is the external gradient on
    /// the hidden map of step `t`.
    pub fn backward<T: Real>(&self, ps: &ParamStore<T>, grads: &mut Grads<T>, cache: &ClstmCache<T>, d_hs: &[Array4<T>]) {
        let one = T::one();
        let shape = d_hs[0].dim();
        let mut dh_next = Array4::<T>::zeros(shape);
        let mut dc_next = Array4::<T>::zeros(shape);
        for (t, sc) in cache.steps.iter().enumerate().rev() {
            let dh = &d_hs[t] + &dh_next;
            let [i, f, o, g] = &sc.gates;
            let mut dpre = Array4::<T>::zeros((4 * self.hidden, shape.1, shape.2, shape.3));
            let mut dc = dc_next;
            Zip::from(&mut dc).and(&dh).and(o).and(&sc.tanh_c).for_each(|dc, &dh, &o, &tc| {
                *dc += dh * o * (one - tc * tc);
            });
            {
                let (mut di, rest) = dpre.view_mut().split_at(Axis(0), self.hidden);
                let (mut df, rest) = rest.split_at(Axis(0), self.hidden);
                let (mut dout, mut dg) = rest.split_at(Axis(0), self.hidden);
                Zip::from(&mut di).and(&dc).and(g).and(i).for_each(|d, &dc, &g, &i| *d = dc * g * i * (one - i));
                Zip::from(&mut df).and(&dc).and(&sc.c_prev).and(f).for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (one - f));
                Zip::from(&mut dout).and(&dh).and(&sc.tanh_c).and(o).for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (one - o));
                Zip::from(&mut dg).and(&dc).and(i).and(g).for_each(|d, &dc, &i, &g| *d = dc * i * (one - g * g));
            }
            dc_next = dc * f;
            self.conv_x.backward(ps, grads, &sc.x, &dpre, false);
            dh_next = self
                .conv_h
                .backward(ps, grads, &sc.h_prev, &dpre, t > 0)
                .unwrap_or_else(|| Array4::zeros(shape));
        }
    }
}

/// Element-wise sum of the per-step hidden maps.
pub fn fuse_embeddings<T: Real>(hs: &[Array4<T>]) -> Array4<T> {
    let mut it = hs.iter();
    let mut acc = it.next().expect("at least one hidden map").clone();
    for h in it {
        acc += h;
    }
    acc
}

//! Two-hidden-layer perceptron with tanh activations, used by the shared
//! parameterization tier. Forward passes cache activations so the hand-rolled
//! backward pass can run without re-evaluation.

use crate::numerics::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub in_dim: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub w3: Vec<f64>,
    pub b3: Vec<f64>,
}

/// Post-activation values of both hidden layers for one forward call.
#[derive(Debug, Clone, Default)]
pub struct MlpCache {
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(in_dim: usize, hidden: usize) -> Self {
        Mlp {
            in_dim,
            hidden,
            w1: vec![0.0; hidden * in_dim],
            b1: vec![0.0; hidden],
            w2: vec![0.0; hidden * hidden],
            b2: vec![0.0; hidden],
            w3: vec![0.0; hidden],
            b3: vec![0.0; 1],
        }
    }

    pub fn init(in_dim: usize, hidden: usize, rng: &mut RngStream) -> Self {
        let mut mlp = Mlp::zeros(in_dim, hidden);
        let s1 = 1.0 / (in_dim as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        for w in mlp.w1.iter_mut() {
            *w = s1 * rng.normal();
        }
        for w in mlp.w2.iter_mut() {
            *w = s2 * rng.normal();
        }
        for w in mlp.w3.iter_mut() {
            *w = s2 * rng.normal();
        }
        mlp
    }

    /// Scalar output; fills `cache` for the backward pass.
    pub fn forward(&self, x: &[f64], cache: &mut MlpCache) -> f64 {
        debug_assert_eq!(x.len(), self.in_dim);
        let h = self.hidden;
        cache.h1.resize(h, 0.0);
        cache.h2.resize(h, 0.0);
        for i in 0..h {
            let row = &self.w1[i * self.in_dim..(i + 1) * self.in_dim];
            let mut acc = self.b1[i];
            for (w, v) in row.iter().zip(x) {
                acc += w * v;
            }
            cache.h1[i] = acc.tanh();
        }
        for i in 0..h {
            let row = &self.w2[i * h..(i + 1) * h];
            let mut acc = self.b2[i];
            for (w, v) in row.iter().zip(&cache.h1) {
                acc += w * v;
            }
            cache.h2[i] = acc.tanh();
        }
        let mut out = self.b3[0];
        for (w, v) in self.w3.iter().zip(&cache.h2) {
            out += w * v;
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and input gradients into
    /// `d_x` (both `+=`), given d(loss)/d(output).
    pub fn backward(
        &self,
        x: &[f64],
        cache: &MlpCache,
        d_out: f64,
        grads: &mut Mlp,
        d_x: &mut [f64],
    ) {
        let h = self.hidden;
        grads.b3[0] += d_out;
        // d_h2 = d_out * w3, through tanh: * (1 - h2^2)
        let mut d_a2 = vec![0.0; h];
        for i in 0..h {
            grads.w3[i] += d_out * cache.h2[i];
            d_a2[i] = d_out * self.w3[i] * (1.0 - cache.h2[i] * cache.h2[i]);
        }
        let mut d_a1 = vec![0.0; h];
        for i in 0..h {
            let g = d_a2[i];
            if g != 0.0 {
                grads.b2[i] += g;
                let row = &self.w2[i * h..(i + 1) * h];
                let grow = &mut grads.w2[i * h..(i + 1) * h];
                for j in 0..h {
                    grow[j] += g * cache.h1[j];
                    d_a1[j] += g * row[j];
                }
            }
        }
        for i in 0..h {
            let g = d_a1[i] * (1.0 - cache.h1[i] * cache.h1[i]);
            if g != 0.0 {
                grads.b1[i] += g;
                let row = &self.w1[i * self.in_dim..(i + 1) * self.in_dim];
                let grow = &mut grads.w1[i * self.in_dim..(i + 1) * self.in_dim];
                for j in 0..self.in_dim {
                    grow[j] += g * x[j];
                    d_x[j] += g * row[j];
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, grad_relative_error};

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = RngStream::new(3, 0);
        let mlp = Mlp::init(5, 4, &mut rng);
        let x: Vec<f64> = (0..5).map(|_| rng.normal()).collect();

        let mut cache = MlpCache::default();
        let _ = mlp.forward(&x, &mut cache);
        let mut grads = Mlp::zeros(5, 4);
        let mut d_x = vec![0.0; 5];
        mlp.backward(&x, &cache, 1.0, &mut grads, &mut d_x);

        // Input gradient.
        let fd_x = finite_diff_grad(
            |xs| {
                let mut c = MlpCache::default();
                mlp.forward(xs, &mut c)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(grad_relative_error(&d_x, &fd_x) < 1e-7, "input grads diverge");

        // Parameter gradient, checked through a flattened view.
        let flat: Vec<f64> = [&mlp.w1[..], &mlp.b1, &mlp.w2, &mlp.b2, &mlp.w3, &mlp.b3]
            .concat();
        let rebuild = |p: &[f64]| {
            let mut m = Mlp::zeros(5, 4);
            let mut off = 0;
            for (dst, len) in [
                (&mut m.w1, 20),
                (&mut m.b1, 4),
                (&mut m.w2, 16),
                (&mut m.b2, 4),
                (&mut m.w3, 4),
                (&mut m.b3, 1),
            ] {
                dst.copy_from_slice(&p[off..off + len]);
                off += len;
            }
            m
        };
        let fd_p = finite_diff_grad(
            |p| {
                let m = rebuild(p);
                let mut c = MlpCache::default();
                m.forward(&x, &mut c)
            },
            &flat,
            1e-6,
        )
        .unwrap();
        let an_p: Vec<f64> =
            [&grads.w1[..], &grads.b1, &grads.w2, &grads.b2, &grads.w3, &grads.b3].concat();
        assert!(grad_relative_error(&an_p, &fd_p) < 1e-7, "parameter grads diverge");
    }
}

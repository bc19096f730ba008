use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tape::{ParamId, ParamSet, Tape, Var};

/// Two stacked GRU layers with a linear skip readout
/// `y = W_out [x, h2] + b_out`.
///
/// Inputs are standardised with a frozen per-feature normalizer stored
/// alongside the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruBlock {
    pub name: String,
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub dropout: f64,
    pub w: [ParamId; 2],
    pub u: [ParamId; 2],
    pub b: [ParamId; 2],
    pub w_out: ParamId,
    pub b_out: ParamId,
    pub norm_mean: ParamId,
    pub norm_scale: ParamId,
}

/// Hidden state of a block on a tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GruHidden(pub [Var; 2]);

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-bound..bound)).collect()
}

impl GruBlock {
    /// Registers the block's tensors in `params` with uniform
    /// `+-1/sqrt(fan)` initialisation.
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden: usize,
        output_dim: usize,
        dropout: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        let mut w = [ParamId(0); 2];
        let mut u = [ParamId(0); 2];
        let mut b = [ParamId(0); 2];
        for l in 0..2 {
            let d = if l == 0 { input_dim } else { hidden };
            w[l] = params.add(format!("{name}.w{l}"), 3 * hidden, d, uniform(rng, 3 * hidden * d, k), true);
            u[l] = params.add(format!("{name}.u{l}"), 3 * hidden, hidden, uniform(rng, 3 * hidden * hidden, k), true);
            b[l] = params.add(format!("{name}.b{l}"), 3 * hidden, 1, uniform(rng, 3 * hidden, k), true);
        }
        let fan = input_dim + hidden;
        let ko = 1.0 / (fan as f64).sqrt();
        let w_out = params.add(format!("{name}.w_out"), output_dim, fan, uniform(rng, output_dim * fan, ko), true);
        let b_out = params.add(format!("{name}.b_out"), output_dim, 1, uniform(rng, output_dim, ko), true);
        let norm_mean = params.add(format!("{name}.norm_mean"), input_dim, 1, vec![0.0; input_dim], false);
        let norm_scale = params.add(format!("{name}.norm_scale"), input_dim, 1, vec![1.0; input_dim], false);
        GruBlock {
            name: name.to_string(),
            input_dim,
            hidden,
            output_dim,
            dropout,
            w,
            u,
            b,
            w_out,
            b_out,
            norm_mean,
            norm_scale,
        }
    }

    pub fn trainable(&self) -> Vec<ParamId> {
        let mut v = vec![self.w[0], self.u[0], self.b[0], self.w[1], self.u[1], self.b[1]];
        v.push(self.w_out);
        v.push(self.b_out);
        v
    }

    pub fn set_output_bias(&self, params: &mut ParamSet, bias: &[f64]) {
        params.data_mut(self.b_out).copy_from_slice(bias);
    }

    /// Sets the normalizer from per-feature sample statistics. Features
    /// with (near) zero spread are only centred.
    pub fn fit_normalizer<'a>(&self, params: &mut ParamSet, samples: impl IntoIterator<Item = &'a [f64]>) {
        let d = self.input_dim;
        let mut n = 0usize;
        let mut mean = vec![0.0; d];
        let mut m2 = vec![0.0; d];
        for x in samples {
            assert_eq!(x.len(), d);
            n += 1;
            for k in 0..d {
                let delta = x[k] - mean[k];
                mean[k] += delta / n as f64;
                m2[k] += delta * (x[k] - mean[k]);
            }
        }
        if n == 0 {
            return;
        }
        let scale: Vec<f64> = m2
            .iter()
            .map(|v| {
                let sd = (v / n as f64).sqrt();
                if sd > 1e-6 {
                    1.0 / sd
                } else {
                    1.0
                }
            })
            .collect();
        params.data_mut(self.norm_mean).copy_from_slice(&mean);
        params.data_mut(self.norm_scale).copy_from_slice(&scale);
    }

    /// Sets a fixed normalizer.
    pub fn set_normalizer(&self, params: &mut ParamSet, mean: &[f64], scale: &[f64]) {
        params.data_mut(self.norm_mean).copy_from_slice(mean);
        params.data_mut(self.norm_scale).copy_from_slice(scale);
    }

    pub fn zero_state(&self, tape: &mut Tape) -> GruHidden {
        GruHidden([tape.zeros(self.hidden), tape.zeros(self.hidden)])
    }

    pub fn state_from(&self, tape: &mut Tape, h: &[Vec<f64>; 2]) -> GruHidden {
        GruHidden([tape.leaf(&h[0]), tape.leaf(&h[1])])
    }

    /// Dropout mask for the first layer's output: entries are 0 or
    /// `1/(1-p)`.
    pub fn dropout_mask(&self, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
        if self.dropout <= 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.dropout);
        Some((0..self.hidden).map(|_| if rng.random::<f64>() < self.dropout { 0.0 } else { keep }).collect())
    }

    /// One time step. `inputs` are concatenated to form `x`.
    pub fn step(
        &self,
        tape: &mut Tape,
        params: &ParamSet,
        inputs: &[Var],
        state: GruHidden,
        mask: Option<&[f64]>,
    ) -> (Var, GruHidden) {
        let x = if inputs.len() == 1 { inputs[0] } else { tape.concat(inputs) };
        assert_eq!(tape.dim(x), self.input_dim, "{} input width", self.name);
        let mean = tape.leaf(params.data(self.norm_mean));
        let scale = tape.leaf(params.data(self.norm_scale));
        let centred = tape.sub(x, mean);
        let xn = tape.mul(centred, scale);
        let h1 = tape.gru(params, self.w[0], self.u[0], self.b[0], xn, state.0[0]);
        let h1_in = match mask {
            Some(m) => {
                let mv = tape.leaf(m);
                tape.mul(h1, mv)
            }
            None => h1,
        };
        let h2 = tape.gru(params, self.w[1], self.u[1], self.b[1], h1_in, state.0[1]);
        let y = tape.linear(params, self.w_out, Some(self.b_out), &[xn, h2]);
        (y, GruHidden([h1, h2]))
    }
}

/// Runs a block over a sequence without dropout, carrying the hidden state.
pub fn gru_forward(block: &GruBlock, params: &ParamSet, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut tape = Tape::new();
    let mut h = [vec![0.0; block.hidden], vec![0.0; block.hidden]];
    let mut out = Vec::with_capacity(xs.len());
    for x in xs {
        tape.clear();
        let state = block.state_from(&mut tape, &h);
        let xv = tape.leaf(x);
        let (y, s) = block.step(&mut tape, params, &[xv], state, None);
        out.push(tape.value(y).to_vec());
        h = [tape.value(s.0[0]).to_vec(), tape.value(s.0[1]).to_vec()];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::tape::{grad_check_inputs, grad_check_params};
    use rand::SeedableRng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    /// Straightforward re-implementation of the recurrence.
    fn reference(params: &ParamSet, blk: &GruBlock, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let hd = blk.hidden;
        let mut h = vec![vec![0.0; hd], vec![0.0; hd]];
        let mut out = vec![];
        let mv = |m: &[f64], cols: usize, row: usize, v: &[f64]| -> f64 { (0..cols).map(|c| m[row * cols + c] * v[c]).sum() };
        for x in xs {
            let mean = params.data(blk.norm_mean);
            let sc = params.data(blk.norm_scale);
            let xn: Vec<f64> = (0..x.len()).map(|k| (x[k] - mean[k]) * sc[k]).collect();
            let mut inp = xn.clone();
            for l in 0..2 {
                let (w, u, b) = (params.data(blk.w[l]), params.data(blk.u[l]), params.data(blk.b[l]));
                let d = inp.len();
                let hp = h[l].clone();
                let z: Vec<f64> = (0..hd).map(|k| sigmoid(mv(w, d, k, &inp) + mv(u, hd, k, &hp) + b[k])).collect();
                let r: Vec<f64> = (0..hd).map(|k| sigmoid(mv(w, d, hd + k, &inp) + mv(u, hd, hd + k, &hp) + b[hd + k])).collect();
                let rh: Vec<f64> = (0..hd).map(|k| r[k] * hp[k]).collect();
                let c: Vec<f64> = (0..hd)
                    .map(|k| (mv(w, d, 2 * hd + k, &inp) + mv(u, hd, 2 * hd + k, &rh) + b[2 * hd + k]).tanh())
                    .collect();
                h[l] = (0..hd).map(|k| (1.0 - z[k]) * hp[k] + z[k] * c[k]).collect();
                inp = h[l].clone();
            }
            let mut cat = xn.clone();
            cat.extend_from_slice(&h[1]);
            let (wo, bo) = (params.data(blk.w_out), params.data(blk.b_out));
            out.push((0..blk.output_dim).map(|k| mv(wo, cat.len(), k, &cat) + bo[k]).collect());
        }
        out
    }

    fn setup(seed: u64) -> (ParamSet, GruBlock, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let blk = GruBlock::new(&mut ps, "t", 5, 6, 3, 0.5, &mut rng);
        let xs: Vec<Vec<f64>> = (0..7).map(|_| (0..5).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        blk.fit_normalizer(&mut ps, xs.iter().map(|x| x.as_slice()));
        (ps, blk, xs)
    }

    #[test]
    fn forward_matches_reference() {
        let (ps, blk, xs) = setup(1);
        let a = gru_forward(&blk, &ps, &xs);
        let b = reference(&ps, &blk, &xs);
        for (p, q) in a.iter().zip(&b) {
            for (u, v) in p.iter().zip(q) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalizer_standardises() {
        let (ps, blk, xs) = setup(2);
        let mean = ps.data(blk.norm_mean);
        let sc = ps.data(blk.norm_scale);
        for k in 0..5 {
            let v: Vec<f64> = xs.iter().map(|x| (x[k] - mean[k]) * sc[k]).collect();
            let m: f64 = v.iter().sum::<f64>() / v.len() as f64;
            let var: f64 = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
            assert!(m.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
        }
    }

    fn seq_loss(tape: &mut Tape, ps: &ParamSet, blk: &GruBlock, xs: &[Var], masks: &[Vec<f64>]) -> Var {
        let mut s = blk.zero_state(tape);
        let mut terms = vec![];
        for (x, m) in xs.iter().zip(masks) {
            let (y, ns) = blk.step(tape, ps, &[*x], s, Some(m));
            s = ns;
            let q = tape.sum_sq(y);
            terms.push(q);
        }
        tape.add_all(&terms)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (ps, blk, xs) = setup(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let masks: Vec<Vec<f64>> = xs.iter().map(|_| blk.dropout_mask(&mut rng).unwrap()).collect();
        let rep = grad_check_params(&ps, None, 0, |t, p| {
            let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x)).collect();
            seq_loss(t, p, &blk, &vs, &masks)
        });
        assert!(rep.max_rel_error < 1e-5, "{:?}", rep);
        let flat: Vec<f64> = xs.concat();
        let rep = grad_check_inputs(&ps, &flat, None, 0, |t, p, xv| {
            let vs: Vec<Var> = (0..xs.len()).map(|i| t.slice(xv, 5 * i, 5)).collect();
            seq_loss(t, p, &blk, &vs, &masks)
        });
        assert!(rep.max_rel_error < 1e-5, "{:?}", rep);
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let (_, blk, _) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = blk.dropout_mask(&mut rng).unwrap();
        assert!(m.iter().all(|v| *v == 0.0 || *v == 2.0));
    }
}

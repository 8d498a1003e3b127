//! Bridge between the encoder and the temporal core: learnable positional
//! embedding, the concatenated core input and the global initial state.

use crate::config::ModelConfig;
use crate::nn::{Bound, Conv2d, Linear, ParamStore};
use crate::rng::SplitMix64;
use crate::tensor::{shape_err, Real, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct InterfaceOutput {
    /// `[B, Cb + E, H, W]`: encoder features followed by the positional embedding.
    pub ltc_input: Var,
    /// `[B, hidden, H, W]`, spatially constant per (batch, channel).
    pub s0: Var,
    /// `[B, E, H, W]`
    pub pos_emb: Var,
}

#[derive(Clone, Debug)]
pub struct TauFlowInterface {
    pos_conv: Conv2d,
    init_state: Linear,
    hidden: usize,
}

impl TauFlowInterface {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SplitMix64, cfg: &ModelConfig) -> Self {
        TauFlowInterface {
            pos_conv: Conv2d::new(store, rng, "interface.pos_conv", 1, cfg.group_embed_dim, cfg.pos_kernel, 1, 1),
            init_state: Linear::new(store, rng, "interface.init_state", cfg.base_channel, cfg.hidden_channels),
            hidden: cfg.hidden_channels,
        }
    }

    /// Positional embedding: the convolution applied to an all-ones plane.
    pub fn make_positional_embedding<T: Real>(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let ones = tape.constant(Tensor::ones(&[batch, 1, height, width]))?;
        self.pos_conv.forward(tape, p, ones)
    }

    pub fn build_ltc_input<T: Real>(&self, tape: &mut Tape<T>, f3: Var, pos_emb: Var) -> Result<Var> {
        let (a, b) = (tape.shape(f3), tape.shape(pos_emb));
        if a.len() != 4 || b.len() != 4 || a[0] != b[0] || a[2..] != b[2..] {
            return Err(shape_err("build_ltc_input", format!("{a:?} vs {b:?}")));
        }
        tape.concat(&[f3, pos_emb], 1)
    }

    /// `broadcast(tanh(Linear(mean_{H,W} f3)))`.
    pub fn init_hidden_state<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f3: Var) -> Result<Var> {
        let s = tape.shape(f3).to_vec();
        let pooled = tape.mean_axes(f3, &[2, 3])?;
        let flat = tape.reshape(pooled, &[s[0], s[1]])?;
        let z = self.init_state.forward(tape, p, flat)?;
        let z = tape.tanh(z)?;
        let z = tape.reshape(z, &[s[0], self.hidden, 1, 1])?;
        tape.broadcast_to(z, &[s[0], self.hidden, s[2], s[3]])
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, p: &Bound, f3: Var) -> Result<InterfaceOutput> {
        let s = tape.shape(f3).to_vec();
        let pos_emb = self.make_positional_embedding(tape, p, s[0], s[2], s[3])?;
        let ltc_input = self.build_ltc_input(tape, f3, pos_emb)?;
        let s0 = self.init_hidden_state(tape, p, f3)?;
        Ok(InterfaceOutput { ltc_input, s0, pos_emb })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ModelConfig, ParamStore<f64>, TauFlowInterface) {
        let cfg = ModelConfig { base_channel: 4, group_embed_dim: 2, hidden_channels: 4, norm_groups: 2, ..ModelConfig::reduced() };
        let mut store = ParamStore::new();
        let iface = TauFlowInterface::new(&mut store, &mut SplitMix64::new(5), &cfg);
        (cfg, store, iface)
    }

    #[test]
    fn zero_kernel_embedding_is_bias() {
        let (_, mut store, iface) = setup();
        store.get_mut(iface.pos_conv.weight).data_mut().fill(0.0);
        let bias = store.get(iface.pos_conv.bias).clone();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let e = iface.make_positional_embedding(&mut tape, &p, 2, 5, 5).unwrap();
        let v = tape.value(e);
        for c in 0..2 {
            for i in 0..5 {
                for j in 0..5 {
                    assert_eq!(v.at(&[1, c, i, j]), bias.data()[c]);
                }
            }
        }
    }

    #[test]
    fn embedding_identical_across_batch_and_border_differs() {
        let (_, store, iface) = setup();
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let e = iface.make_positional_embedding(&mut tape, &p, 2, 6, 6).unwrap();
        let v = tape.value(e);
        let per = v.numel() / 2;
        assert_eq!(&v.data()[..per], &v.data()[per..]);
        // Interior pixels see all nine taps; corners only four.
        let w = store.get(iface.pos_conv.weight);
        let b = store.get(iface.pos_conv.bias);
        let k: Vec<f64> = w.data()[..9].to_vec();
        let interior = b.data()[0] + k.iter().sum::<f64>();
        let corner = b.data()[0] + k[4] + k[5] + k[7] + k[8];
        assert!((v.at(&[0, 0, 2, 3]) - interior).abs() < 1e-12);
        assert!((v.at(&[0, 0, 0, 0]) - corner).abs() < 1e-12);
        assert!((v.at(&[0, 0, 1, 1]) - v.at(&[0, 0, 4, 4])).abs() < 1e-12);
    }

    #[test]
    fn hidden_state_bounds_and_zero_weights() {
        let (_, mut store, iface) = setup();
        let f3 = Tensor::<f64>::from_fn(&[2, 4, 5, 5], |i| ((i * 7919) % 13) as f64 - 6.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.constant(f3.clone()).unwrap();
        let s0 = iface.init_hidden_state(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(s0), &[2, 4, 5, 5]);
        assert!(tape.value(s0).data().iter().all(|v| v.abs() < 1.0));

        store.get_mut(iface.init_state.weight).data_mut().fill(0.0);
        store.get_mut(iface.init_state.bias).data_mut().fill(0.0);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.constant(f3).unwrap();
        let s0 = iface.init_hidden_state(&mut tape, &p, x).unwrap();
        assert!(tape.value(s0).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ltc_input_layout() {
        let (_, store, iface) = setup();
        let f3 = Tensor::<f64>::from_fn(&[1, 4, 3, 3], |i| i as f64);
        let mut tape = Tape::new();
        let p = store.bind(&mut tape).unwrap();
        let x = tape.constant(f3.clone()).unwrap();
        let out = iface.forward(&mut tape, &p, x).unwrap();
        assert_eq!(tape.shape(out.ltc_input), &[1, 6, 3, 3]);
        let head = crate::tensor::kernels::slice_axis(tape.value(out.ltc_input), 1, 0, 4).unwrap();
        assert_eq!(head, f3);
        let tail = crate::tensor::kernels::slice_axis(tape.value(out.ltc_input), 1, 4, 2).unwrap();
        assert_eq!(&tail, tape.value(out.pos_emb));
        let bad = tape.constant(Tensor::zeros(&[1, 2, 4, 3])).unwrap();
        assert!(iface.build_ltc_input(&mut tape, x, bad).is_err());
    }
}

//! Parameterised layers shared by the autoencoder and the transformer.
//!
//! Layers hold parameter ids only; `p` maps an id's index to its tape
//! variable, so the same layer runs in 32-bit training and 64-bit checks.

use crate::error::Result;
use crate::numeric::{Init, NdArray, ParamId, ParamStore, Real, Tape, Var};

/// How a layer's weight is initialised.
#[derive(Debug, Clone, Copy)]
pub enum WeightInit {
    /// Normal with std `gain / sqrt(fan_in)`.
    FanIn(f64),
    Zero,
}

fn weight(store: &mut ParamStore<f32>, name: String, shape: &[usize], fan_in: usize, init: &mut Init, how: WeightInit) -> Result<ParamId> {
    let value = match how {
        WeightInit::FanIn(gain) => init.fan_in(shape, fan_in, gain),
        WeightInit::Zero => NdArray::zeros(shape.to_vec()),
    };
    store.add(name, value)
}

/// `y = x W + b` on the last axis, `W: [in, out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        init: &mut Init,
        how: WeightInit,
    ) -> Result<Self> {
        let w = weight(store, format!("{name}.w"), &[fan_in, fan_out], fan_in, init, how)?;
        let b = store.add(format!("{name}.b"), NdArray::zeros([fan_out]))?;
        Ok(Self { w, b, fan_in, fan_out })
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, p[self.w.index()])?;
        tape.add_row(y, p[self.b.index()])
    }
}

/// Square-kernel convolution with per-channel bias over NCHW input.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore<f32>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        init: &mut Init,
        how: WeightInit,
    ) -> Result<Self> {
        let w = weight(
            store,
            format!("{name}.w"),
            &[out_ch, in_ch, kernel, kernel],
            in_ch * kernel * kernel,
            init,
            how,
        )?;
        let b = store.add(format!("{name}.b"), NdArray::zeros([out_ch]))?;
        Ok(Self {
            w,
            b,
            stride,
            padding: kernel / 2,
        })
    }

    /// Rebind to existing parameters named `{name}.w` / `{name}.b`.
    pub fn find<T: Real>(store: &ParamStore<T>, name: &str, stride: usize) -> Option<Self> {
        let w = store.id(&format!("{name}.w"))?;
        let b = store.id(&format!("{name}.b"))?;
        let k = store.get(w).shape()[2];
        Some(Self {
            w,
            b,
            stride,
            padding: k / 2,
        })
    }

    pub fn out_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.w).shape()[0]
    }

    pub fn in_channels<T: Real>(&self, store: &ParamStore<T>) -> usize {
        store.get(self.w).shape()[1]
    }

    pub fn apply<T: Real>(&self, tape: &mut Tape<T>, p: &[Var], x: Var) -> Result<Var> {
        let y = tape.conv2d(x, p[self.w.index()], self.stride, self.padding)?;
        tape.add_channel(y, p[self.b.index()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{Ctx, Rng};

    #[test]
    fn linear_and_conv_shapes() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        let mut init = Init { rng: &mut rng };
        let lin = Linear::new(&mut store, "lin", 3, 5, &mut init, WeightInit::FanIn(1.0)).unwrap();
        let conv = Conv::new(&mut store, "conv", 2, 4, 3, 2, &mut init, WeightInit::Zero).unwrap();
        let mut ctx = Ctx::train(&store);
        let (tape, p) = ctx.parts();
        let x = tape.constant(NdArray::zeros([7, 3]));
        let y = lin.apply(tape, p, x).unwrap();
        assert_eq!(tape.shape(y), &[7, 5]);
        let img = tape.constant(NdArray::zeros([1, 2, 8, 8]));
        let z = conv.apply(tape, p, img).unwrap();
        assert_eq!(tape.shape(z), &[1, 4, 4, 4]);
        let found = Conv::find(&store, "conv", 2).unwrap();
        assert_eq!(found.w, conv.w);
        assert_eq!(found.out_channels(&store), 4);
    }
}

//! Small reusable layers on top of the tape: linear maps and LSTM cells.

use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Copy, Clone, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        dim_out: usize,
        rng: &mut R,
    ) -> LinearParams {
        let bound = (1.0 / dim_in as f64).sqrt();
        LinearParams {
            w: store.add(&format!("{prefix}/w"), Tensor::uniform(&[dim_in, dim_out], bound, rng)),
            b: store.add(&format!("{prefix}/b"), Tensor::zeros(&[1, dim_out])),
        }
    }

    pub fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }

    pub fn apply_relu(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let y = self.apply(tape, store, x);
        tape.relu(y)
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

/// LSTM cell parameters; the fused weight maps `[x; h]` to the four gates in
/// i, f, g, o order. Forget-gate biases start at one.
#[derive(Copy, Clone, Debug)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

/// Hidden and cell activations of one LSTM.
#[derive(Copy, Clone, Debug)]
pub struct LstmState {
    pub h: Var,
    pub c: Var,
}

impl LstmParams {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim_in: usize,
        hidden: usize,
        rng: &mut R,
    ) -> LstmParams {
        let bound = (1.0 / (dim_in + hidden) as f64).sqrt();
        let w = store.add(
            &format!("{prefix}/w"),
            Tensor::uniform(&[dim_in + hidden, 4 * hidden], bound, rng),
        );
        let mut bias = Tensor::zeros(&[1, 4 * hidden]);
        for j in hidden..2 * hidden {
            bias.set(0, j, 1.0);
        }
        let b = store.add(&format!("{prefix}/b"), bias);
        LstmParams { w, b, hidden }
    }

    pub fn zero_state(&self, tape: &mut Tape, rows: usize) -> LstmState {
        let h = tape.constant(Tensor::zeros(&[rows, self.hidden]));
        let c = tape.constant(Tensor::zeros(&[rows, self.hidden]));
        LstmState { h, c }
    }

    /// State with a provided initial hidden activation and zero cell.
    pub fn state_from_hidden(&self, tape: &mut Tape, h: Var) -> LstmState {
        let rows = tape.value(h).rows();
        let c = tape.constant(Tensor::zeros(&[rows, self.hidden]));
        LstmState { h, c }
    }

    pub fn step(&self, tape: &mut Tape, store: &ParamStore, x: Var, state: LstmState) -> LstmState {
        let hd = self.hidden;
        let xc = tape.concat_cols(&[x, state.h]);
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let gates = tape.linear(xc, w, b);
        let i_raw = tape.slice_cols(gates, 0, hd);
        let f_raw = tape.slice_cols(gates, hd, 2 * hd);
        let g_raw = tape.slice_cols(gates, 2 * hd, 3 * hd);
        let o_raw = tape.slice_cols(gates, 3 * hd, 4 * hd);
        let i = tape.sigmoid(i_raw);
        let f = tape.sigmoid(f_raw);
        let g = tape.tanh(g_raw);
        let o = tape.sigmoid(o_raw);
        let kept = tape.mul(f, state.c);
        let update = tape.mul(i, g);
        let c = tape.add(kept, update);
        let ct = tape.tanh(c);
        let h = tape.mul(o, ct);
        LstmState { h, c }
    }

    pub fn ids(&self) -> [ParamId; 2] {
        [self.w, self.b]
    }
}

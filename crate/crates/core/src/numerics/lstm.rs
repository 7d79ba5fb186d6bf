//! Stacked LSTM built from graph primitives.

use rand::Rng;

use super::graph::{Graph, NodeId};
use super::params::{uniform_fan_in, ParamGroup, ParamId, ParamStore};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Parameters of one layer: `weight` is `4H x (I + H)` acting on
/// `[x | h_prev]`, `bias` has `4H` entries. Gate blocks are ordered
/// input, forget, cell candidate, output.
#[derive(Clone, Copy, Debug)]
pub struct LstmLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub input_size: usize,
}

#[derive(Clone, Debug)]
pub struct LstmParams {
    pub layers: Vec<LstmLayer>,
    pub hidden: usize,
}

/// Hidden and cell node of every layer.
#[derive(Clone, Debug)]
pub struct LstmNodes {
    pub hidden: Vec<NodeId>,
    pub cell: Vec<NodeId>,
}

impl LstmParams {
    pub fn init<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        input_size: usize,
        hidden: usize,
        num_layers: usize,
    ) -> Result<Self> {
        if num_layers == 0 || hidden == 0 || input_size == 0 {
            return Err(Error::Config(
                "lstm needs at least one layer and non-zero sizes".into(),
            ));
        }
        let mut layers = Vec::with_capacity(num_layers);
        for l in 0..num_layers {
            let inp = if l == 0 { input_size } else { hidden };
            let weight = store.add(
                format!("{prefix}.l{l}.weight"),
                ParamGroup::Head,
                uniform_fan_in(rng, &[4 * hidden, inp + hidden], inp + hidden),
            );
            let bias = store.add(
                format!("{prefix}.l{l}.bias"),
                ParamGroup::Head,
                Tensor::zeros(&[4 * hidden]),
            );
            layers.push(LstmLayer {
                weight,
                bias,
                input_size: inp,
            });
        }
        Ok(Self { layers, hidden })
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size
    }

    /// Zero hidden and cell state for `batch` sequences.
    pub fn zero_state<T: Scalar>(&self, g: &mut Graph<T>, batch: usize) -> LstmNodes {
        let n = self.layers.len();
        let zero = g.input(Tensor::zeros(&[batch, self.hidden]));
        LstmNodes {
            hidden: vec![zero; n],
            cell: vec![zero; n],
        }
    }

    /// One time-step through every layer. `x` is `N x I`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        state: &LstmNodes,
    ) -> Result<LstmNodes> {
        let h = self.hidden;
        let mut input = x;
        let mut next = LstmNodes {
            hidden: Vec::with_capacity(self.layers.len()),
            cell: Vec::with_capacity(self.layers.len()),
        };
        for (l, layer) in self.layers.iter().enumerate() {
            let width = g.shape(input).get(1).copied().unwrap_or(0);
            if width != layer.input_size {
                return Err(Error::Shape(format!(
                    "lstm layer {l}: input width {width}, expected {}",
                    layer.input_size
                )));
            }
            let w = g.param(store, layer.weight);
            let b = g.param(store, layer.bias);
            let xh = g.concat(&[input, state.hidden[l]])?;
            let gates = g.affine(xh, w, Some(b))?;
            let i_pre = g.narrow(gates, 0, h)?;
            let f_pre = g.narrow(gates, h, h)?;
            let c_pre = g.narrow(gates, 2 * h, h)?;
            let o_pre = g.narrow(gates, 3 * h, h)?;
            let i = g.sigmoid(i_pre);
            let f = g.sigmoid(f_pre);
            let cand = g.tanh(c_pre);
            let o = g.sigmoid(o_pre);
            let keep = g.mul(f, state.cell[l])?;
            let write = g.mul(i, cand)?;
            let c = g.add(keep, write)?;
            let tc = g.tanh(c);
            let hn = g.mul(o, tc)?;
            next.hidden.push(hn);
            next.cell.push(c);
            input = hn;
        }
        Ok(next)
    }

    /// Runs a whole sequence. `inputs` holds one `N x I` node per step;
    /// returns the top-layer output per step and the final state.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &[NodeId],
        init: LstmNodes,
    ) -> Result<(Vec<NodeId>, LstmNodes)> {
        let mut state = init;
        let mut outputs = Vec::with_capacity(inputs.len());
        for &x in inputs {
            state = self.step(g, store, x, &state)?;
            outputs.push(*state.hidden.last().expect("at least one layer"));
        }
        Ok((outputs, state))
    }
}

/// Output of [`lstm_forward`] for a single sequence.
#[derive(Clone, Debug)]
pub struct LstmRun<T> {
    /// `T x H` top-layer outputs.
    pub outputs: Tensor<T>,
    pub final_hidden: Vec<Tensor<T>>,
    pub final_cell: Vec<Tensor<T>>,
}

/// Runs one `T x I` sequence from the given `1 x H` initial states.
pub fn lstm_forward<T: Scalar>(
    inputs: &Tensor<T>,
    init_hidden: &[Tensor<T>],
    init_cell: &[Tensor<T>],
    params: &LstmParams,
    store: &ParamStore<T>,
) -> Result<LstmRun<T>> {
    let (steps, width) = inputs.dims2()?;
    let layers = params.layers.len();
    if init_hidden.len() != layers || init_cell.len() != layers {
        return Err(Error::Shape(format!(
            "expected {layers} initial states, got {} hidden / {} cell",
            init_hidden.len(),
            init_cell.len()
        )));
    }
    if width != params.input_size() {
        return Err(Error::Shape(format!(
            "input width {width}, expected {}",
            params.input_size()
        )));
    }
    let mut g = Graph::new();
    let mut state = LstmNodes {
        hidden: Vec::with_capacity(layers),
        cell: Vec::with_capacity(layers),
    };
    for (h, c) in init_hidden.iter().zip(init_cell) {
        if h.len() != params.hidden || c.len() != params.hidden {
            return Err(Error::Shape(
                "initial state width differs from hidden size".into(),
            ));
        }
        state
            .hidden
            .push(g.input(h.clone().reshape(&[1, params.hidden])?));
        state
            .cell
            .push(g.input(c.clone().reshape(&[1, params.hidden])?));
    }
    let xs = (0..steps)
        .map(|t| Tensor::new(&[1, width], inputs.row(t).to_vec()).map(|x| g.input(x)))
        .collect::<Result<Vec<_>>>()?;
    let (outs, fin) = params.forward(&mut g, store, &xs, state)?;
    let mut data = Vec::with_capacity(steps * params.hidden);
    for o in outs {
        data.extend_from_slice(g.value(o).data());
    }
    Ok(LstmRun {
        outputs: Tensor::new(&[steps, params.hidden], data)?,
        final_hidden: fin.hidden.iter().map(|&n| g.value(n).clone()).collect(),
        final_cell: fin.cell.iter().map(|&n| g.value(n).clone()).collect(),
    })
}

use serde::{Deserialize, Serialize};

use super::{Graph, ParamSet, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::LeakyRelu(s) => g.leaky_relu(x, s),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

/// `y = x·W + b` with `W` stored `[inputs, outputs]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub inputs: usize,
    pub outputs: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let weight = format!("{prefix}.w");
        let bias = format!("{prefix}.b");
        params.insert_uniform(&weight, &[inputs, outputs], inputs, rng)?;
        params.insert_uniform(&bias, &[outputs], inputs, rng)?;
        Ok(Linear {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, x: Var) -> Result<Var> {
        let w = g.param(params, &self.weight)?;
        let b = g.param(params, &self.bias)?;
        let h = g.matmul(x, w)?;
        g.add_bias(h, b)
    }
}

/// Dense stack: hidden layers share one activation, the last layer has its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub hidden: Activation,
    pub output: Activation,
}

impl Mlp {
    /// `sizes` lists widths from input to output, e.g. `[12, 64, 64, 5]`.
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut Rng,
    ) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Contract("an MLP needs at least input and output widths".into()));
        }
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(params, &format!("{prefix}.l{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Mlp {
            layers,
            hidden,
            output,
        })
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs
    }

    pub fn outputs(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs
    }

    pub fn last(&self) -> &Linear {
        &self.layers[self.layers.len() - 1]
    }

    pub fn forward(&self, g: &mut Graph, params: &ParamSet, mut x: Var) -> Result<Var> {
        let n = self.layers.len();
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, params, x)?;
            let act = if i + 1 == n { self.output } else { self.hidden };
            x = act.apply(g, x);
        }
        Ok(x)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    /// One update gate and one candidate state.
    #[default]
    Gated,
    Lstm,
}

/// Recurrent state; `memory` is only used by the LSTM cell.
#[derive(Clone, Copy, Debug)]
pub struct CellState {
    pub hidden: Var,
    pub memory: Option<Var>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecurrentCell {
    pub kind: CellKind,
    pub inputs: usize,
    pub hidden: usize,
    gates: Vec<Linear>,
}

impl RecurrentCell {
    pub fn new(
        params: &mut ParamSet,
        prefix: &str,
        kind: CellKind,
        inputs: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let names: &[&str] = match kind {
            CellKind::Gated => &["update", "candidate"],
            CellKind::Lstm => &["input", "forget", "output", "candidate"],
        };
        let gates = names
            .iter()
            .map(|n| Linear::new(params, &format!("{prefix}.{n}"), inputs + hidden, hidden, rng))
            .collect::<Result<_>>()?;
        Ok(RecurrentCell {
            kind,
            inputs,
            hidden,
            gates,
        })
    }

    /// All-zero state for `batch` sequences.
    pub fn zero_state(&self, g: &mut Graph, batch: usize) -> CellState {
        let hidden = g.input(Tensor::zeros(&[batch, self.hidden]));
        let memory = match self.kind {
            CellKind::Gated => None,
            CellKind::Lstm => Some(g.input(Tensor::zeros(&[batch, self.hidden]))),
        };
        CellState { hidden, memory }
    }

    pub fn step(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        state: CellState,
        x: Var,
    ) -> Result<CellState> {
        if g.value(x).cols() != self.inputs || g.value(state.hidden).cols() != self.hidden {
            return Err(Error::shape(
                "recurrent_cell",
                format!(
                    "input width {} / hidden width {} for a {}→{} cell",
                    g.value(x).cols(),
                    g.value(state.hidden).cols(),
                    self.inputs,
                    self.hidden
                ),
            ));
        }
        let xh = g.concat(&[x, state.hidden])?;
        match self.kind {
            CellKind::Gated => {
                let z = self.gates[0].forward(g, params, xh)?;
                let z = g.sigmoid(z);
                let c = self.gates[1].forward(g, params, xh)?;
                let c = g.tanh(c);
                // h' = h + z ⊙ (c − h)
                let delta = g.sub(c, state.hidden)?;
                let step = g.mul(z, delta)?;
                let hidden = g.add(state.hidden, step)?;
                Ok(CellState {
                    hidden,
                    memory: None,
                })
            }
            CellKind::Lstm => {
                let memory = state
                    .memory
                    .ok_or_else(|| Error::Contract("LSTM step without memory state".into()))?;
                let i = self.gates[0].forward(g, params, xh)?;
                let i = g.sigmoid(i);
                let f = self.gates[1].forward(g, params, xh)?;
                let f = g.sigmoid(f);
                let o = self.gates[2].forward(g, params, xh)?;
                let o = g.sigmoid(o);
                let c = self.gates[3].forward(g, params, xh)?;
                let c = g.tanh(c);
                let keep = g.mul(f, memory)?;
                let write = g.mul(i, c)?;
                let memory = g.add(keep, write)?;
                let squashed = g.tanh(memory);
                let hidden = g.mul(o, squashed)?;
                Ok(CellState {
                    hidden,
                    memory: Some(memory),
                })
            }
        }
    }
}

/// Mean squared error over every element.
pub fn mse(g: &mut Graph, pred: Var, target: Var) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let sq = g.square(d);
    Ok(g.mean(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_all(p: &mut ParamSet) {
        let names: Vec<String> = p.names().map(str::to_string).collect();
        for n in names {
            p.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn gated_cell_at_zero_weights_halves_the_state() {
        // z = σ(0) = ½, c = tanh(0) = 0, so h' = h + ½(0 − h) = h/2.
        let mut p = ParamSet::new();
        let cell = RecurrentCell::new(&mut p, "c", CellKind::Gated, 2, 3, &mut seeded(1)).unwrap();
        zero_all(&mut p);
        let mut g = Graph::new();
        let h = g.input(Tensor::row(&[0.4, -1.0, 2.0]));
        let x = g.input(Tensor::row(&[5.0, 6.0]));
        let s = cell.step(&mut g, &p, CellState { hidden: h, memory: None }, x).unwrap();
        assert_eq!(g.value(s.hidden).data(), &[0.2, -0.5, 1.0]);
    }

    #[test]
    fn lstm_cell_at_zero_weights() {
        // i=f=o=½, c̃=0: memory' = ½·m, h' = ½·tanh(½·m).
        let mut p = ParamSet::new();
        let cell = RecurrentCell::new(&mut p, "c", CellKind::Lstm, 1, 2, &mut seeded(1)).unwrap();
        zero_all(&mut p);
        let mut g = Graph::new();
        let h = g.input(Tensor::row(&[0.0, 0.0]));
        let m = g.input(Tensor::row(&[1.0, -2.0]));
        let x = g.input(Tensor::row(&[3.0]));
        let s = cell
            .step(&mut g, &p, CellState { hidden: h, memory: Some(m) }, x)
            .unwrap();
        let got = g.value(s.hidden).data();
        assert!((got[0] - 0.5 * 0.5f64.tanh()).abs() < 1e-15);
        assert!((got[1] - 0.5 * (-1.0f64).tanh()).abs() < 1e-15);
    }

    #[test]
    fn cell_rejects_wrong_widths() {
        let mut p = ParamSet::new();
        let cell = RecurrentCell::new(&mut p, "c", CellKind::Gated, 2, 3, &mut seeded(1)).unwrap();
        let mut g = Graph::new();
        let h = g.input(Tensor::row(&[0.0; 3]));
        let x = g.input(Tensor::row(&[0.0; 4]));
        assert!(cell.step(&mut g, &p, CellState { hidden: h, memory: None }, x).is_err());
    }
}

use rand::Rng;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{PodnetError, Result};

/// Feedforward stack `{prefix}.l{i}.{w,b}`: tanh on hidden layers, linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    input_dim: usize,
    output_dim: usize,
}

impl Mlp {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let mut layers = Vec::new();
        let mut dims: Vec<(usize, usize)> = Vec::new();
        while let Some(w) = store.id(&format!("{prefix}.l{}.w", layers.len())) {
            let b = store.require(&format!("{prefix}.l{}.b", layers.len()))?;
            let (rows, cols) = store.tensor(w).matrix_dims();
            if store.tensor(b).len() != rows {
                return Err(PodnetError::shape(format!("{prefix} bias"), rows, store.tensor(b).len()));
            }
            if let Some(&(prev_rows, _)) = dims.last() {
                if prev_rows != cols {
                    return Err(PodnetError::shape(format!("{prefix} layer chain"), prev_rows, cols));
                }
            }
            dims.push((rows, cols));
            layers.push((w, b));
        }
        if layers.is_empty() {
            return Err(PodnetError::invalid(format!("no layers found under `{prefix}`")));
        }
        Ok(Self {
            layers,
            input_dim: dims[0].1,
            output_dim: dims[dims.len() - 1].0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.affine(w, b, h)?;
            if i + 1 < self.layers.len() {
                h = tape.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Recurrent state of an LSTM cell.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f64>,
    pub cell: Vec<f64>,
}

impl LstmState {
    pub fn zeros(size: usize) -> Self {
        Self {
            hidden: vec![0.0; size],
            cell: vec![0.0; size],
        }
    }
}

/// LSTM cell `{prefix}.w` of shape `[4h, in + h]` over `concat(x, h)` and
/// bias `{prefix}.b`. Gate blocks are ordered input, forget, candidate, output.
#[derive(Debug, Clone)]
pub struct Lstm {
    w: ParamId,
    b: ParamId,
    input_dim: usize,
    hidden: usize,
}

impl Lstm {
    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let w = store.require(&format!("{prefix}.w"))?;
        let b = store.require(&format!("{prefix}.b"))?;
        let (rows, cols) = store.tensor(w).matrix_dims();
        if rows % 4 != 0 || rows == 0 {
            return Err(PodnetError::invalid(format!("{prefix}.w rows {rows} not a multiple of 4")));
        }
        let hidden = rows / 4;
        if cols <= hidden {
            return Err(PodnetError::shape(format!("{prefix}.w columns"), hidden + 1, cols));
        }
        if store.tensor(b).len() != rows {
            return Err(PodnetError::shape(format!("{prefix}.b"), rows, store.tensor(b).len()));
        }
        Ok(Self {
            w,
            b,
            input_dim: cols - hidden,
            hidden,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden
    }

    /// One cell update; returns `(hidden, cell)`.
    pub fn step(&self, tape: &mut Tape<'_>, x: Var, hidden: Var, cell: Var) -> Result<(Var, Var)> {
        let h = self.hidden;
        if tape.value(hidden).len() != h || tape.value(cell).len() != h {
            return Err(PodnetError::shape("lstm state", h, tape.value(hidden).len()));
        }
        if tape.value(x).len() != self.input_dim {
            return Err(PodnetError::shape("lstm input", self.input_dim, tape.value(x).len()));
        }
        let xh = tape.concat(&[x, hidden]);
        let z = tape.affine(self.w, self.b, xh)?;
        let zi = tape.slice(z, 0, h)?;
        let zf = tape.slice(z, h, h)?;
        let zg = tape.slice(z, 2 * h, h)?;
        let zo = tape.slice(z, 3 * h, h)?;
        let i = tape.sigmoid(zi);
        let f = tape.sigmoid(zf);
        let g = tape.tanh(zg);
        let o = tape.sigmoid(zo);
        let keep = tape.mul(f, cell)?;
        let write = tape.mul(i, g)?;
        let c_new = tape.add(keep, write)?;
        let c_act = tape.tanh(c_new);
        let h_new = tape.mul(o, c_act)?;
        Ok((h_new, c_new))
    }
}

fn uniform_matrix<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (cols as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor {
        shape: vec![rows, cols],
        data,
    }
}

/// Insert `{prefix}.l{i}` layers for the width chain `sizes` (input first).
pub fn init_mlp<R: Rng>(store: &mut ParamStore, prefix: &str, sizes: &[usize], rng: &mut R) -> Result<()> {
    if sizes.len() < 2 {
        return Err(PodnetError::invalid("an MLP needs at least input and output widths"));
    }
    for (i, pair) in sizes.windows(2).enumerate() {
        store.insert(format!("{prefix}.l{i}.w"), uniform_matrix(pair[1], pair[0], rng))?;
        store.insert(format!("{prefix}.l{i}.b"), Tensor::zeros(vec![pair[1]]))?;
    }
    Ok(())
}

/// Insert an LSTM cell with forget-gate bias 1.
pub fn init_lstm<R: Rng>(
    store: &mut ParamStore,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    store.insert(format!("{prefix}.w"), uniform_matrix(4 * hidden, input + hidden, rng))?;
    let mut bias = vec![0.0; 4 * hidden];
    bias[hidden..2 * hidden].iter_mut().for_each(|b| *b = 1.0);
    store.insert(format!("{prefix}.b"), Tensor::new(vec![4 * hidden], bias)?)?;
    Ok(())
}

pub fn mlp_forward(params: &ParamStore, prefix: &str, input: &[f64]) -> Result<Vec<f64>> {
    let mlp = Mlp::from_store(params, prefix)?;
    let mut tape = Tape::new(params);
    let x = tape.constant(input.to_vec());
    let y = mlp.forward(&mut tape, x)?;
    Ok(tape.value(y).to_vec())
}

pub fn lstm_step(
    params: &ParamStore,
    prefix: &str,
    input: &[f64],
    state: &LstmState,
) -> Result<(Vec<f64>, LstmState)> {
    let lstm = Lstm::from_store(params, prefix)?;
    let mut tape = Tape::new(params);
    let x = tape.constant(input.to_vec());
    let h = tape.constant(state.hidden.clone());
    let c = tape.constant(state.cell.clone());
    let (h_new, c_new) = lstm.step(&mut tape, x, h, c)?;
    let hidden = tape.value(h_new).to_vec();
    Ok((
        hidden.clone(),
        LstmState {
            hidden,
            cell: tape.value(c_new).to_vec(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn zero_store(mut store: ParamStore) -> ParamStore {
        for t in store.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        store
    }

    #[test]
    fn zero_mlp_outputs_zero() {
        let mut store = ParamStore::new();
        init_mlp(&mut store, "p", &[3, 8, 8, 2], &mut seeded(0)).unwrap();
        let store = zero_store(store);
        assert_eq!(mlp_forward(&store, "p", &[1.0, -2.0, 3.0]).unwrap(), vec![0.0, 0.0]);
        assert!(mlp_forward(&store, "p", &[1.0, 2.0]).is_err());
    }

    #[test]
    fn identity_linear_layer() {
        let mut store = ParamStore::new();
        store
            .insert("id.l0.w", Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        store.insert("id.l0.b", Tensor::zeros(vec![2])).unwrap();
        assert_eq!(mlp_forward(&store, "id", &[0.25, -4.0]).unwrap(), vec![0.25, -4.0]);
    }

    #[test]
    fn broken_layer_chain_is_rejected() {
        let mut store = ParamStore::new();
        store.insert("m.l0.w", Tensor::zeros(vec![4, 2])).unwrap();
        store.insert("m.l0.b", Tensor::zeros(vec![4])).unwrap();
        store.insert("m.l1.w", Tensor::zeros(vec![1, 3])).unwrap();
        store.insert("m.l1.b", Tensor::zeros(vec![1])).unwrap();
        assert!(Mlp::from_store(&store, "m").is_err());
    }

    #[test]
    fn zero_lstm_keeps_zero_state() {
        let mut store = ParamStore::new();
        init_lstm(&mut store, "r", 3, 5, &mut seeded(1)).unwrap();
        let store = zero_store(store);
        let (out, state) = lstm_step(&store, "r", &[1.0, 2.0, 3.0], &LstmState::zeros(5)).unwrap();
        assert_eq!(out, vec![0.0; 5]);
        assert_eq!(state.cell, vec![0.0; 5]);
        assert!(lstm_step(&store, "r", &[1.0, 2.0, 3.0], &LstmState::zeros(4)).is_err());
    }

    #[test]
    fn lstm_step_is_pure() {
        let mut store = ParamStore::new();
        init_lstm(&mut store, "r", 2, 4, &mut seeded(2)).unwrap();
        let state = LstmState {
            hidden: vec![0.1, -0.2, 0.3, 0.0],
            cell: vec![0.5, 0.5, -0.5, 0.2],
        };
        let a = lstm_step(&store, "r", &[0.7, -1.1], &state).unwrap();
        let b = lstm_step(&store, "r", &[0.7, -1.1], &state).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0, a.1.hidden);
    }

    #[test]
    fn lstm_forget_bias_is_one() {
        let mut store = ParamStore::new();
        init_lstm(&mut store, "r", 2, 3, &mut seeded(3)).unwrap();
        let b = &store.get("r.b").unwrap().data;
        assert_eq!(&b[3..6], &[1.0, 1.0, 1.0]);
        assert!(b[..3].iter().chain(&b[6..]).all(|&x| x == 0.0));
    }
}

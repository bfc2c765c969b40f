use rand::Rng;

use super::{ParamId, ParamStore};
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `y = x W + b` over the rows of `x`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Ok(Linear {
            w: store.register(&format!("{name}.w"), &[in_dim, out_dim], rng)?,
            b: store.register(&format!("{name}.b"), &[out_dim], rng)?,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }
}

/// Embedding table lookup.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId,
    pub rows: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, rows: usize, dim: usize) -> Result<Self> {
        Ok(Embedding {
            table: store.register(&format!("{name}.table"), &[rows, dim], rng)?,
            rows,
            dim,
        })
    }

    pub fn forward(&self, g: &mut Graph, ids: &[usize]) -> Result<Var> {
        let t = g.param(self.table);
        g.embed(t, ids)
    }
}

/// Hidden and cell vectors of one LSTM layer, each `[1, cells]`.
#[derive(Debug, Clone, Copy)]
pub struct LstmState {
    pub hidden: Var,
    pub cell: Var,
}

impl LstmState {
    /// Re-homes a state whose values live on another graph.
    pub fn import(g: &mut Graph, hidden: &Tensor, cell: &Tensor) -> Self {
        LstmState {
            hidden: g.constant(hidden.clone()),
            cell: g.constant(cell.clone()),
        }
    }
}

/// Single LSTM layer. Gate columns of `wx`, `wh` and `b` are packed as
/// `[input | forget | cell | output]`, each `cells` wide. There is no implicit
/// forget-gate bias offset.
#[derive(Debug, Clone)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub input_dim: usize,
    pub cells: usize,
}

impl Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, input_dim: usize, cells: usize) -> Result<Self> {
        Ok(Lstm {
            wx: store.register(&format!("{name}.wx"), &[input_dim, 4 * cells], rng)?,
            wh: store.register(&format!("{name}.wh"), &[cells, 4 * cells], rng)?,
            b: store.register(&format!("{name}.b"), &[4 * cells], rng)?,
            input_dim,
            cells,
        })
    }

    pub fn zero_state(&self, g: &mut Graph) -> LstmState {
        LstmState {
            hidden: g.constant(Tensor::zeros(&[1, self.cells])),
            cell: g.constant(Tensor::zeros(&[1, self.cells])),
        }
    }

    /// One recurrence step on `x: [1, input_dim]`; the new hidden vector is the output.
    pub fn step(&self, g: &mut Graph, x: Var, state: LstmState) -> Result<LstmState> {
        if g.shape(x) != [1, self.input_dim] {
            return Err(Error::shape(
                "lstm_step",
                format!("input {:?}, expected [1, {}]", g.shape(x), self.input_dim),
            ));
        }
        let wx = g.param(self.wx);
        let b = g.param(self.b);
        let xp = g.matmul(x, wx)?;
        let xp = g.add(xp, b)?;
        self.step_projected(g, xp, state)
    }

    /// Step given the already projected input `x Wx + b`.
    fn step_projected(&self, g: &mut Graph, xp: Var, state: LstmState) -> Result<LstmState> {
        let h = self.cells;
        let wh = g.param(self.wh);
        let rec = g.matmul(state.hidden, wh)?;
        let gates = g.add(xp, rec)?;
        let i = g.slice(gates, 1, 0, h)?;
        let i = g.sigmoid(i)?;
        let f = g.slice(gates, 1, h, h)?;
        let f = g.sigmoid(f)?;
        let c_hat = g.slice(gates, 1, 2 * h, h)?;
        let c_hat = g.tanh(c_hat)?;
        let o = g.slice(gates, 1, 3 * h, h)?;
        let o = g.sigmoid(o)?;
        let keep = g.mul(f, state.cell)?;
        let write = g.mul(i, c_hat)?;
        let cell = g.add(keep, write)?;
        let squashed = g.tanh(cell)?;
        let hidden = g.mul(o, squashed)?;
        Ok(LstmState { hidden, cell })
    }

    /// Runs over all rows of `x: [T, input_dim]`, right-to-left when `reverse`.
    /// Returns hidden vectors `[T, cells]` in input order.
    pub fn run(&self, g: &mut Graph, x: Var, reverse: bool) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 2 || s[1] != self.input_dim {
            return Err(Error::shape("lstm", format!("input {s:?}, expected [T, {}]", self.input_dim)));
        }
        let t_len = s[0];
        let wx = g.param(self.wx);
        let b = g.param(self.b);
        let xp = g.matmul(x, wx)?;
        let xp = g.add(xp, b)?;
        let mut state = self.zero_state(g);
        let mut outs = vec![state.hidden; t_len];
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t_len).rev())
        } else {
            Box::new(0..t_len)
        };
        for t in order {
            let row = g.slice(xp, 0, t, 1)?;
            state = self.step_projected(g, row, state)?;
            outs[t] = state.hidden;
        }
        g.concat(&outs, 0)
    }
}

/// Bidirectional LSTM with per-direction projections concatenated:
/// `tanh([Lin(fwd); Lin(bwd)])`, each projection `width / 2` wide.
#[derive(Debug, Clone)]
pub struct Blstm {
    pub fwd: Lstm,
    pub bwd: Lstm,
    pub proj_fwd: Linear,
    pub proj_bwd: Linear,
}

impl Blstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        input_dim: usize,
        cells: usize,
        width: usize,
    ) -> Result<Self> {
        if !width.is_multiple_of(2) {
            return Err(Error::Invalid(format!("BLSTM projection width {width} must be even")));
        }
        Ok(Blstm {
            fwd: Lstm::new(store, rng, &format!("{name}.fwd"), input_dim, cells)?,
            bwd: Lstm::new(store, rng, &format!("{name}.bwd"), input_dim, cells)?,
            proj_fwd: Linear::new(store, rng, &format!("{name}.proj_fwd"), cells, width / 2)?,
            proj_bwd: Linear::new(store, rng, &format!("{name}.proj_bwd"), cells, width / 2)?,
        })
    }

    pub fn width(&self) -> usize {
        self.proj_fwd.out_dim * 2
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        if g.shape(x).first().copied().unwrap_or(0) == 0 {
            return Err(Error::shape("blstm", "empty sequence"));
        }
        let hf = self.fwd.run(g, x, false)?;
        let hb = self.bwd.run(g, x, true)?;
        let pf = self.proj_fwd.forward(g, hf)?;
        let pb = self.proj_bwd.forward(g, hb)?;
        let y = g.concat(&[pf, pb], 1)?;
        g.tanh(y)
    }
}

/// Stack of BLSTM layers.
#[derive(Debug, Clone)]
pub struct BlstmStack {
    pub layers: Vec<Blstm>,
}

impl BlstmStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        depth: usize,
        input_dim: usize,
        cells: usize,
        width: usize,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(depth);
        let mut dim = input_dim;
        for i in 0..depth {
            layers.push(Blstm::new(store, rng, &format!("{name}.{i}"), dim, cells, width)?);
            dim = width;
        }
        Ok(BlstmStack { layers })
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        Ok(x)
    }
}

/// 3x3 (configurable) same-padded convolution followed by ReLU.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl ConvLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Invalid(format!("conv kernel {kernel} must be odd")));
        }
        Ok(ConvLayer {
            w: store.register(&format!("{name}.w"), &[out_channels, in_channels, kernel, kernel], rng)?,
            b: store.register(&format!("{name}.b"), &[out_channels], rng)?,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let y = g.conv2d(x, w, b, self.kernel / 2)?;
        g.relu(y)
    }
}

/// Convolution layers followed by an optional stride-2 max pool.
#[derive(Debug, Clone)]
pub struct VggBlock {
    pub convs: Vec<ConvLayer>,
    pub pool: Option<usize>,
}

impl VggBlock {
    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for c in &self.convs {
            x = c.forward(g, x)?;
        }
        match self.pool {
            Some(k) => g.maxpool2d(x, k),
            None => Ok(x),
        }
    }
}

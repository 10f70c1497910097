//! Small fully connected networks: score nets, the teaching assistant, and
//! the one-step generator all share this shape (a stack of affine layers with
//! SiLU activations and a scalar head).

use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use crate::rng::{purpose, RngStream};
use crate::tape::{Gradients, NodeId, Tape};

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input has {got} columns, network expects {want}")]
    InputArity { got: usize, want: usize },
    #[error("serialized network is malformed: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Nonlinearity between affine layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Silu,
}

/// What the scalar output means.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    /// Output is a noise estimate; scores are obtained as -out/sqrt(1-alpha_bar).
    NoisePrediction,
    /// Output is used directly (generator samples, velocities).
    DirectOutput,
}

impl Head {
    fn to_tag(self) -> u8 {
        match self {
            Head::NoisePrediction => 0,
            Head::DirectOutput => 1,
        }
    }

    fn from_tag(t: u8) -> Result<Self, NetError> {
        match t {
            0 => Ok(Head::NoisePrediction),
            1 => Ok(Head::DirectOutput),
            _ => Err(NetError::Format(format!("unknown head tag {t}"))),
        }
    }
}

/// Fully connected network parameters. Layer `k` maps through
/// `x · weights[k] + biases[k]`; all but the last layer are followed by the
/// activation.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNet {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array2<f64>>,
    pub activation: Activation,
    pub head: Head,
    pub input_arity: usize,
    pub hidden_width: usize,
    pub depth: usize,
}

/// Tape handles for one recorded forward pass: the output node plus the
/// parameter leaves in `[w0, b0, w1, b1, ...]` order.
#[derive(Debug)]
pub struct NetBinding {
    pub output: NodeId,
    pub params: Vec<NodeId>,
}

impl MlpNet {
    fn layer_dims(input_arity: usize, hidden_width: usize, depth: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(depth + 1);
        let mut prev = input_arity;
        for _ in 0..depth {
            dims.push((prev, hidden_width));
            prev = hidden_width;
        }
        dims.push((prev, 1));
        dims
    }

    /// All-zero parameters (useful as a degenerate fixture).
    pub fn zeros(input_arity: usize, hidden_width: usize, depth: usize, head: Head) -> Self {
        let dims = Self::layer_dims(input_arity, hidden_width, depth);
        let weights = dims.iter().map(|&(r, c)| Array2::zeros((r, c))).collect();
        let biases = dims.iter().map(|&(_, c)| Array2::zeros((1, c))).collect();
        Self {
            weights,
            biases,
            activation: Activation::Silu,
            head,
            input_arity,
            hidden_width,
            depth,
        }
    }

    /// Seeded init: each layer uniform in ±1/sqrt(fan_in).
    pub fn seeded(
        input_arity: usize,
        hidden_width: usize,
        depth: usize,
        head: Head,
        seed: u64,
        tag: u64,
    ) -> Self {
        let mut net = Self::zeros(input_arity, hidden_width, depth, head);
        for (layer, (w, b)) in net.weights.iter_mut().zip(net.biases.iter_mut()).enumerate() {
            let bound = 1.0 / (w.nrows() as f64).sqrt();
            let mut ws = RngStream::new(seed, &[purpose::NET_INIT, tag, layer as u64, 0]);
            for v in w.iter_mut() {
                *v = ws.uniform_in(-bound, bound);
            }
            let mut bs = RngStream::new(seed, &[purpose::NET_INIT, tag, layer as u64, 1]);
            for v in b.iter_mut() {
                *v = bs.uniform_in(-bound, bound);
            }
        }
        net
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    /// Parameter arrays in the fixed `[w0, b0, w1, b1, ...]` order used by the
    /// optimizer and the tape binding.
    pub fn params(&self) -> Vec<&Array2<f64>> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    fn check_input(&self, cols: usize) -> Result<(), NetError> {
        if cols != self.input_arity {
            return Err(NetError::InputArity { got: cols, want: self.input_arity });
        }
        Ok(())
    }

    /// Plain forward pass without recording; the reference path for oracle
    /// comparisons and the cheap path for frozen networks.
    pub fn forward_batch(&self, x: &Array2<f64>) -> Result<Array2<f64>, NetError> {
        self.check_input(x.ncols())?;
        let mut h = x.clone();
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let mut y = h.dot(w);
            let bias = b.row(0);
            for mut row in y.rows_mut() {
                row += &bias;
            }
            if k < last {
                match self.activation {
                    Activation::Silu => y.mapv_inplace(|v| v * crate::tape::sigmoid(v)),
                }
            }
            h = y;
        }
        Ok(h)
    }

    /// Scalar convenience over [`MlpNet::forward_batch`].
    pub fn forward_scalar(&self, input: &[f64]) -> Result<f64, NetError> {
        let x = Array2::from_shape_vec((1, input.len()), input.to_vec())
            .map_err(|e| NetError::Format(e.to_string()))?;
        Ok(self.forward_batch(&x)?[[0, 0]])
    }

    /// Records the forward pass on `tape` with parameters as differentiable
    /// leaves; `x` may be a constant (training the net) or a variable
    /// (differentiating through a frozen net).
    pub fn forward_on_tape(&self, tape: &mut Tape, x: NodeId) -> Result<NetBinding, NetError> {
        self.check_input(tape.value(x).ncols())?;
        let mut params = Vec::with_capacity(2 * self.weights.len());
        let mut h = x;
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let wid = tape.var(w.clone());
            let bid = tape.var(b.clone());
            params.push(wid);
            params.push(bid);
            h = tape.affine(h, wid, bid);
            if k < last {
                h = match self.activation {
                    Activation::Silu => tape.silu(h),
                };
            }
        }
        Ok(NetBinding { output: h, params })
    }

    /// Same recording but with parameters as constants, for frozen networks
    /// that only need gradients with respect to their input.
    pub fn forward_on_tape_frozen(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId, NetError> {
        self.check_input(tape.value(x).ncols())?;
        let mut h = x;
        let last = self.weights.len() - 1;
        for (k, (w, b)) in self.weights.iter().zip(self.biases.iter()).enumerate() {
            let wid = tape.constant(w.clone());
            let bid = tape.constant(b.clone());
            h = tape.affine(h, wid, bid);
            if k < last {
                h = match self.activation {
                    Activation::Silu => tape.silu(h),
                };
            }
        }
        Ok(h)
    }

    /// Collects parameter gradients from a backward sweep in the binding's
    /// order, zeros where a parameter was not reached.
    pub fn collect_grads(&self, binding: &NetBinding, grads: &mut Gradients) -> Vec<Array2<f64>> {
        binding
            .params
            .iter()
            .zip(self.params())
            .map(|(&id, p)| grads.take(id).unwrap_or_else(|| Array2::zeros(p.dim())))
            .collect()
    }

    /// FNV-1a over the parameter bytes; used to assert frozen networks stay
    /// frozen.
    pub fn param_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |v: f64| {
            for byte in v.to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for p in self.params() {
            for &v in p.iter() {
                eat(v);
            }
        }
        h
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let mut file = std::fs::File::create(path)?;
        self.write_to(&mut file)
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        let mut file = std::fs::File::open(path)?;
        Self::read_from(&mut file)
    }

    /// Binary container: magic, format version, shape header, then the layer
    /// matrices as little-endian f64 in row-major order.
    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<(), NetError> {
        out.write_all(b"DIDRMLP\x01")?;
        let act = match self.activation {
            Activation::Silu => 0u8,
        };
        out.write_all(&[act, self.head.to_tag()])?;
        for v in [self.input_arity as u32, self.hidden_width as u32, self.depth as u32] {
            out.write_all(&v.to_le_bytes())?;
        }
        for (w, b) in self.weights.iter().zip(self.biases.iter()) {
            for v in [w.nrows() as u32, w.ncols() as u32] {
                out.write_all(&v.to_le_bytes())?;
            }
            for &v in w.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
            for &v in b.iter() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self, NetError> {
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic)?;
        if &magic != b"DIDRMLP\x01" {
            return Err(NetError::Format("bad magic or unsupported version".into()));
        }
        let mut tags = [0u8; 2];
        input.read_exact(&mut tags)?;
        let activation = match tags[0] {
            0 => Activation::Silu,
            t => return Err(NetError::Format(format!("unknown activation tag {t}"))),
        };
        let head = Head::from_tag(tags[1])?;
        fn read_u32<R: Read>(input: &mut R) -> Result<u32, NetError> {
            let mut buf = [0u8; 4];
            input.read_exact(&mut buf)?;
            Ok(u32::from_le_bytes(buf))
        }
        let input_arity = read_u32(input)? as usize;
        let hidden_width = read_u32(input)? as usize;
        let depth = read_u32(input)? as usize;
        let dims = Self::layer_dims(input_arity, hidden_width, depth);
        let mut weights = Vec::with_capacity(dims.len());
        let mut biases = Vec::with_capacity(dims.len());
        let mut f64buf = [0u8; 8];
        for &(rows, cols) in &dims {
            let (r, c) = (read_u32(input)? as usize, read_u32(input)? as usize);
            if (r, c) != (rows, cols) {
                return Err(NetError::Format(format!(
                    "layer shape {r}x{c} does not match header-derived {rows}x{cols}"
                )));
            }
            let mut w = Array2::zeros((rows, cols));
            for v in w.iter_mut() {
                input.read_exact(&mut f64buf)?;
                *v = f64::from_le_bytes(f64buf);
            }
            let mut b = Array2::zeros((1, cols));
            for v in b.iter_mut() {
                input.read_exact(&mut f64buf)?;
                *v = f64::from_le_bytes(f64buf);
            }
            weights.push(w);
            biases.push(b);
        }
        Ok(Self { weights, biases, activation, head, input_arity, hidden_width, depth })
    }
}

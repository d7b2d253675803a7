//! From-scratch MLP computing `Q(s, a, g)`.
//!
//! Parameters live in one flat buffer so the optimizer, target sync,
//! checkpointing, and finite-difference checks all treat them uniformly.
//! Layer `l` stores its weights input-major (`w[i * out + o]`) followed by
//! its biases; a sparse input therefore accumulates whole weight rows.

mod adam;
mod checkpoint;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_FORMAT_VERSION};

/// Hidden layer widths used by [`init_params`].
pub const DEFAULT_HIDDEN: [usize; 2] = [256, 128];

/// Sparse vector in absolute input coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseVec {
    pub idx: Vec<u32>,
    pub val: Vec<f64>,
}

impl SparseVec {
    pub fn from_dense(dense: &[f64], offset: usize) -> Self {
        let mut out = SparseVec::default();
        for (i, &x) in dense.iter().enumerate() {
            if x != 0.0 {
                out.idx.push((offset + i) as u32);
                out.val.push(x);
            }
        }
        out
    }

    pub fn concat(parts: &[&SparseVec]) -> Self {
        let mut out = SparseVec::default();
        for p in parts {
            out.idx.extend_from_slice(&p.idx);
            out.val.extend_from_slice(&p.val);
        }
        out
    }

    pub fn nnz(&self) -> usize {
        self.idx.len()
    }

    pub fn scatter_into(&self, dense: &mut [f64]) {
        for (&i, &x) in self.idx.iter().zip(&self.val) {
            dense[i as usize] += x;
        }
    }

    pub fn to_dense(&self, dim: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        self.scatter_into(&mut v);
        v
    }

    fn max_index(&self) -> Option<usize> {
        self.idx.iter().max().map(|&i| i as usize)
    }
}

/// Weights and biases of a rectifier MLP with a scalar identity output.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    data: Vec<f64>,
}

impl MlpParams {
    /// All-zero parameters for the given layer sizes (input first, 1 last).
    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) || *sizes.last().unwrap() != 1 {
            return Err(Error::Config(format!("invalid layer sizes {sizes:?}")));
        }
        let n = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(MlpParams {
            sizes: sizes.to_vec(),
            data: vec![0.0; n],
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        let mut p = MlpParams::zeros(sizes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for l in 0..p.num_layers() {
            let (fan_in, fan_out) = (p.sizes[l], p.sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let (w, _) = p.layer_mut(l);
            for x in w.iter_mut() {
                *x = rng.gen_range(-limit..=limit);
            }
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        MlpParams {
            sizes: self.sizes.clone(),
            data: vec![0.0; self.data.len()],
        }
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn from_parts(sizes: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let shell = MlpParams::zeros(&sizes)?;
        if shell.data.len() != data.len() {
            return Err(Error::DimensionMismatch {
                expected: shell.data.len(),
                actual: data.len(),
            });
        }
        Ok(MlpParams { sizes, data })
    }

    fn offset(&self, l: usize) -> usize {
        self.sizes[..=l]
            .windows(2)
            .take(l)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let off = self.offset(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let (w, rest) = self.data[off..].split_at(i * o);
        (w, &rest[..o])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let off = self.offset(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let (w, rest) = self.data[off..].split_at_mut(i * o);
        (w, &mut rest[..o])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_sparse(&self, x: &SparseVec) -> Result<()> {
        match x.max_index() {
            Some(m) if m >= self.input_dim() => Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: m + 1,
            }),
            _ => Ok(()),
        }
    }
}

/// Default-architecture parameters for `input_dim` inputs.
pub fn init_params(input_dim: usize, seed: u64) -> Result<MlpParams> {
    MlpParams::init(&[input_dim, DEFAULT_HIDDEN[0], DEFAULT_HIDDEN[1], 1], seed)
}

/// `z += x * w[i, :]` for every nonzero input.
fn accumulate_rows(w: &[f64], out: usize, x: &SparseVec, z: &mut [f64]) {
    for (&i, &v) in x.idx.iter().zip(&x.val) {
        let row = &w[i as usize * out..(i as usize + 1) * out];
        for (zo, wo) in z.iter_mut().zip(row) {
            *zo += v * wo;
        }
    }
}

/// `z = b + a W` over a dense activation, skipping zero entries.
fn dense_layer(w: &[f64], b: &[f64], a: &[f64], z: &mut Vec<f64>) {
    let out = b.len();
    z.clear();
    z.extend_from_slice(b);
    for (i, &ai) in a.iter().enumerate() {
        if ai == 0.0 {
            continue;
        }
        let row = &w[i * out..(i + 1) * out];
        for (zo, wo) in z.iter_mut().zip(row) {
            *zo += ai * wo;
        }
    }
}

fn relu_in_place(z: &mut [f64]) {
    for x in z {
        if *x < 0.0 {
            *x = 0.0;
        }
    }
}

impl MlpParams {
    /// First-layer pre-activation from sparse input parts.
    pub fn first_layer(&self, parts: &[&SparseVec]) -> Vec<f64> {
        let (w, b) = self.layer(0);
        let mut z = b.to_vec();
        for p in parts {
            accumulate_rows(w, b.len(), p, &mut z);
        }
        z
    }

    /// Finishes a forward pass from a first-layer pre-activation.
    fn forward_from_pre(&self, mut z: Vec<f64>, scratch: &mut Vec<f64>) -> f64 {
        for l in 1..self.num_layers() {
            relu_in_place(&mut z);
            let (w, b) = self.layer(l);
            dense_layer(w, b, &z, scratch);
            std::mem::swap(&mut z, scratch);
        }
        z[0]
    }

    pub fn forward_sparse(&self, x: &SparseVec) -> Result<f64> {
        self.check_sparse(x)?;
        let mut scratch = Vec::new();
        Ok(self.forward_from_pre(self.first_layer(&[x]), &mut scratch))
    }

    /// Q for each candidate action given shared state and goal parts.
    pub fn q_candidates(&self, shared: &[&SparseVec], candidates: &[SparseVec]) -> Vec<f64> {
        let base = self.first_layer(shared);
        let (w0, b0) = self.layer(0);
        let mut scratch = Vec::with_capacity(base.len());
        candidates
            .iter()
            .map(|a| {
                let mut z = base.clone();
                accumulate_rows(w0, b0.len(), a, &mut z);
                self.forward_from_pre(z, &mut scratch)
            })
            .collect()
    }
}

/// `Q(x; θ)` for a dense input.
pub fn forward(params: &MlpParams, input: &[f64]) -> Result<f64> {
    if input.len() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: input.len(),
        });
    }
    params.forward_sparse(&SparseVec::from_dense(input, 0))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

/// Double-DQN target `r + γ (1 − d) Q'(s', argmax_a Q(s', a, g; θ), g; θ')`.
///
/// `shared` holds the next-state and goal parts; `candidates` the action
/// parts of every action available in the next state.
pub fn double_dqn_target(
    reward: f64,
    done: bool,
    gamma: f64,
    shared: &[&SparseVec],
    candidates: &[SparseVec],
    pred: &MlpParams,
    target: &MlpParams,
) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::Config(format!("gamma {gamma} outside (0, 1)")));
    }
    if done {
        return Ok(reward);
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let q = pred.q_candidates(shared, candidates);
    let best = argmax(&q).unwrap();
    let base = target.first_layer(shared);
    let (w0, b0) = target.layer(0);
    let mut z = base;
    accumulate_rows(w0, b0.len(), &candidates[best], &mut z);
    let q_eval = target.forward_from_pre(z, &mut Vec::new());
    Ok(reward + gamma * q_eval)
}

/// Regression batch: encoded `(s, a, g)` inputs and their TD targets.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub inputs: Vec<SparseVec>,
    pub td_targets: Vec<f64>,
}

impl Batch {
    pub fn from_dense(inputs: &[Vec<f64>], td_targets: Vec<f64>) -> Self {
        Batch {
            inputs: inputs.iter().map(|x| SparseVec::from_dense(x, 0)).collect(),
            td_targets,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// Mean squared TD error and its gradient by reverse-mode differentiation.
pub fn loss_and_grads(params: &MlpParams, batch: &Batch) -> Result<(f64, MlpParams)> {
    if batch.is_empty() || batch.inputs.len() != batch.td_targets.len() {
        return Err(Error::Config(format!(
            "batch needs >= 1 row and equal lengths (inputs {}, targets {})",
            batch.inputs.len(),
            batch.td_targets.len()
        )));
    }
    for x in &batch.inputs {
        params.check_sparse(x)?;
    }
    let n = batch.len() as f64;
    let layers = params.num_layers();
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    // acts[l] is the input to layer l (post-activation), for l >= 1.
    let mut acts: Vec<Vec<f64>> = vec![Vec::new(); layers];
    let mut delta: Vec<f64> = Vec::new();
    let mut prev: Vec<f64> = Vec::new();
    for (x, &y) in batch.inputs.iter().zip(&batch.td_targets) {
        let mut z = params.first_layer(&[x]);
        for l in 1..layers {
            relu_in_place(&mut z);
            acts[l] = z;
            let (w, b) = params.layer(l);
            let mut next = Vec::with_capacity(b.len());
            dense_layer(w, b, &acts[l], &mut next);
            z = next;
        }
        let q = z[0];
        let err = q - y;
        loss += err * err / n;

        delta.clear();
        delta.push(2.0 * err / n);
        for l in (0..layers).rev() {
            let out = params.sizes[l + 1];
            let off = params.offset(l);
            let in_dim = params.sizes[l];
            let (gw, gb) = grads.data[off..off + in_dim * out + out].split_at_mut(in_dim * out);
            for (g, d) in gb.iter_mut().zip(&delta) {
                *g += d;
            }
            if l == 0 {
                for (&i, &v) in x.idx.iter().zip(&x.val) {
                    let row = &mut gw[i as usize * out..(i as usize + 1) * out];
                    for (g, d) in row.iter_mut().zip(&delta) {
                        *g += v * d;
                    }
                }
                break;
            }
            let a = &acts[l];
            let (w, _) = params.layer(l);
            prev.clear();
            prev.resize(in_dim, 0.0);
            for i in 0..in_dim {
                if a[i] == 0.0 {
                    // Rectifier is flat here; no weight or input gradient flows.
                    continue;
                }
                let row_g = &mut gw[i * out..(i + 1) * out];
                let row_w = &w[i * out..(i + 1) * out];
                let mut s = 0.0;
                for o in 0..out {
                    row_g[o] += a[i] * delta[o];
                    s += row_w[o] * delta[o];
                }
                prev[i] = s;
            }
            std::mem::swap(&mut delta, &mut prev);
        }
    }
    Ok((loss, grads))
}

/// Copies the prediction network into the target network.
pub fn sync_target(pred: &MlpParams, target: &mut MlpParams) {
    target.clone_from(pred);
}

//! Recurrent network building blocks: GRU cells and stacks (uni- and
//! bi-directional), dense layers, parameter initialization, and Adam.
//!
//! Parameters live in ordered name->tensor maps so snapshots serialize
//! deterministically and optimizer state can be keyed per tensor. The same
//! cell math is exposed twice: as plain tensor functions (`gru_forward`,
//! `bigru_forward`) and as tape builders used during training. Both apply
//! the operations in the same order, so their outputs are bit-identical.

use std::collections::BTreeMap;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{sigmoid_scalar, Tape, Var};
use crate::tensor::Tensor;

/// Named parameter tensors, ordered by name.
pub type ParamMap = BTreeMap<String, Tensor>;

// ── Initialization ───────────────────────────────────────────────────

/// Uniform Glorot initialization in +-sqrt(6 / (fan_in + fan_out)).
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(rows, cols, data).expect("shape matches data")
}

/// Random orthogonal matrix via Gram-Schmidt on a Gaussian matrix.
pub fn orthogonal(n: usize, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    use rand_distr::StandardNormal;
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    for j in 0..n {
        for i in 0..j {
            let dot: f64 = (0..n).map(|k| cols[i][k] * cols[j][k]).sum();
            for k in 0..n {
                cols[j][k] -= dot * cols[i][k];
            }
        }
        let norm: f64 = (0..n).map(|k| cols[j][k] * cols[j][k]).sum::<f64>().sqrt();
        for k in 0..n {
            cols[j][k] /= norm;
        }
    }
    let mut data = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            data[r * n + c] = cols[c][r];
        }
    }
    Tensor::matrix(n, n, data).expect("square")
}

// ── GRU parameters ───────────────────────────────────────────────────

/// Kernels and biases of one GRU layer: update gate `z`, reset gate `r`,
/// and candidate state `h~`.
#[derive(Clone, Debug)]
pub struct GruLayerParams {
    pub wz: Tensor,
    pub uz: Tensor,
    pub bz: Tensor,
    pub wr: Tensor,
    pub ur: Tensor,
    pub br: Tensor,
    pub wh: Tensor,
    pub uh: Tensor,
    pub bh: Tensor,
}

const GRU_FIELDS: [&str; 9] = ["wz", "uz", "bz", "wr", "ur", "br", "wh", "uh", "bh"];

impl GruLayerParams {
    pub fn random(input_width: usize, units: usize, rng: &mut ChaCha8Rng) -> Self {
        GruLayerParams {
            wz: glorot_uniform(input_width, units, rng),
            uz: orthogonal(units, rng),
            bz: Tensor::zeros(vec![1, units]),
            wr: glorot_uniform(input_width, units, rng),
            ur: orthogonal(units, rng),
            br: Tensor::zeros(vec![1, units]),
            wh: glorot_uniform(input_width, units, rng),
            uh: orthogonal(units, rng),
            bh: Tensor::zeros(vec![1, units]),
        }
    }

    pub fn zeros(input_width: usize, units: usize) -> Self {
        GruLayerParams {
            wz: Tensor::zeros(vec![input_width, units]),
            uz: Tensor::zeros(vec![units, units]),
            bz: Tensor::zeros(vec![1, units]),
            wr: Tensor::zeros(vec![input_width, units]),
            ur: Tensor::zeros(vec![units, units]),
            br: Tensor::zeros(vec![1, units]),
            wh: Tensor::zeros(vec![input_width, units]),
            uh: Tensor::zeros(vec![units, units]),
            bh: Tensor::zeros(vec![1, units]),
        }
    }

    pub fn input_width(&self) -> usize {
        self.wz.rows()
    }

    pub fn units(&self) -> usize {
        self.wz.cols()
    }

    pub fn validate(&self) -> Result<()> {
        let (in_w, u) = (self.input_width(), self.units());
        let expect = [
            (&self.wz, [in_w, u]),
            (&self.uz, [u, u]),
            (&self.bz, [1, u]),
            (&self.wr, [in_w, u]),
            (&self.ur, [u, u]),
            (&self.br, [1, u]),
            (&self.wh, [in_w, u]),
            (&self.uh, [u, u]),
            (&self.bh, [1, u]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape {
                return Err(Error::Config(format!(
                    "gru parameter shape {:?} does not match expected {:?}",
                    t.shape(),
                    shape
                )));
            }
            if !t.is_finite() {
                return Err(Error::Config("gru parameter contains non-finite values".into()));
            }
        }
        Ok(())
    }

    fn fields(&self) -> [&Tensor; 9] {
        [
            &self.wz, &self.uz, &self.bz, &self.wr, &self.ur, &self.br, &self.wh, &self.uh,
            &self.bh,
        ]
    }

    /// Insert this layer's tensors into `map` under `prefix`.
    pub fn insert_into(&self, map: &mut ParamMap, prefix: &str) {
        for (name, t) in GRU_FIELDS.iter().zip(self.fields()) {
            map.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    /// Reconstruct a layer from `map` entries under `prefix`.
    pub fn from_map(map: &ParamMap, prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<Tensor> {
            map.get(&format!("{prefix}.{name}"))
                .cloned()
                .ok_or_else(|| Error::Usage(format!("missing parameter {prefix}.{name}")))
        };
        let p = GruLayerParams {
            wz: get("wz")?,
            uz: get("uz")?,
            bz: get("bz")?,
            wr: get("wr")?,
            ur: get("ur")?,
            br: get("br")?,
            wh: get("wh")?,
            uh: get("uh")?,
            bh: get("bh")?,
        };
        p.validate()?;
        Ok(p)
    }
}

// ── Plain (off-tape) forward passes ──────────────────────────────────

fn gru_cell_plain(p: &GruLayerParams, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    let pre = |w: &Tensor, u: &Tensor, b: &Tensor, xin: &Tensor, hin: &Tensor| -> Result<Tensor> {
        let xw = xin.matmul(w)?;
        let hu = hin.matmul(u)?;
        let mut data = xw.into_data();
        for (o, &v) in data.iter_mut().zip(hu.data()) {
            *o += v;
        }
        let cols = b.cols();
        for (i, o) in data.iter_mut().enumerate() {
            *o += b.data()[i % cols];
        }
        Tensor::matrix(x.rows(), cols, data)
    };
    let z = pre(&p.wz, &p.uz, &p.bz, x, h)?.map(sigmoid_scalar);
    let r = pre(&p.wr, &p.ur, &p.br, x, h)?.map(sigmoid_scalar);
    let rh_data: Vec<f64> = r.data().iter().zip(h.data()).map(|(&a, &b)| a * b).collect();
    let rh = Tensor::matrix(h.rows(), h.cols(), rh_data)?;
    let cand = pre(&p.wh, &p.uh, &p.bh, x, &rh)?.map(f64::tanh);
    // h' = (1 - z) .* h + z .* h~
    let data = z
        .data()
        .iter()
        .zip(h.data())
        .zip(cand.data())
        .map(|((&zi, &hi), &ci)| (1.0 - zi) * hi + zi * ci)
        .collect();
    Tensor::matrix(h.rows(), h.cols(), data)
}

/// Run a GRU layer over a `T x input_width` sequence from state `h0`
/// (`1 x units`). Returns the per-step outputs (`T x units`) and the final
/// state. Output at step t depends only on inputs 1..t.
pub fn gru_forward(p: &GruLayerParams, inputs: &Tensor, h0: &Tensor) -> Result<(Tensor, Tensor)> {
    p.validate()?;
    if !inputs.is_matrix() || inputs.cols() != p.input_width() {
        return Err(Error::Config(format!(
            "gru_forward: input shape {:?} does not match input width {}",
            inputs.shape(),
            p.input_width()
        )));
    }
    if inputs.rows() < 1 {
        return Err(Error::Config("gru_forward: empty sequence".into()));
    }
    if h0.shape() != [1, p.units()] {
        return Err(Error::Config(format!(
            "gru_forward: h0 shape {:?}, expected [1, {}]",
            h0.shape(),
            p.units()
        )));
    }
    let (steps, units) = (inputs.rows(), p.units());
    let mut h = h0.clone();
    let mut out = vec![0.0; steps * units];
    for t in 0..steps {
        let x = Tensor::matrix(1, inputs.cols(), inputs.data()[t * inputs.cols()..(t + 1) * inputs.cols()].to_vec())?;
        h = gru_cell_plain(p, &x, &h)?;
        out[t * units..(t + 1) * units].copy_from_slice(h.data());
    }
    Ok((Tensor::matrix(steps, units, out)?, h))
}

/// Bidirectional GRU over a sequence: forward pass over 1..T and backward
/// pass over T..1, concatenated per step as `[forward | backward]`.
pub fn bigru_forward(fwd: &GruLayerParams, bwd: &GruLayerParams, inputs: &Tensor) -> Result<Tensor> {
    if fwd.units() != bwd.units() {
        return Err(Error::Config(format!(
            "bigru_forward: direction unit counts differ ({} vs {})",
            fwd.units(),
            bwd.units()
        )));
    }
    let (steps, cols, units) = (inputs.rows(), inputs.cols(), fwd.units());
    let h0 = Tensor::zeros(vec![1, units]);
    let (f_out, _) = gru_forward(fwd, inputs, &h0)?;
    let mut rev = vec![0.0; steps * cols];
    for t in 0..steps {
        rev[t * cols..(t + 1) * cols]
            .copy_from_slice(&inputs.data()[(steps - 1 - t) * cols..(steps - t) * cols]);
    }
    let (b_out_rev, _) = gru_forward(bwd, &Tensor::matrix(steps, cols, rev)?, &h0)?;
    let mut out = vec![0.0; steps * 2 * units];
    for t in 0..steps {
        out[t * 2 * units..t * 2 * units + units].copy_from_slice(&f_out.data()[t * units..(t + 1) * units]);
        out[t * 2 * units + units..(t + 1) * 2 * units]
            .copy_from_slice(&b_out_rev.data()[(steps - 1 - t) * units..(steps - t) * units]);
    }
    Tensor::matrix(steps, 2 * units, out)
}

// ── Tape builders ────────────────────────────────────────────────────

/// Tape handles for one GRU layer's parameters.
#[derive(Clone, Copy)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wh: Var,
    pub uh: Var,
    pub bh: Var,
}

/// Record every tensor of `map` as a tape leaf, returning name -> handle.
pub fn bind_all(tape: &mut Tape, map: &ParamMap, requires_grad: bool) -> BTreeMap<String, Var> {
    map.iter()
        .map(|(name, t)| (name.clone(), tape.leaf(t.clone(), requires_grad)))
        .collect()
}

/// Collect the handles of a GRU layer bound under `prefix`.
pub fn gru_vars(bound: &BTreeMap<String, Var>, prefix: &str) -> Result<GruVars> {
    let get = |name: &str| -> Result<Var> {
        bound
            .get(&format!("{prefix}.{name}"))
            .copied()
            .ok_or_else(|| Error::Usage(format!("missing parameter {prefix}.{name}")))
    };
    Ok(GruVars {
        wz: get("wz")?,
        uz: get("uz")?,
        bz: get("bz")?,
        wr: get("wr")?,
        ur: get("ur")?,
        br: get("br")?,
        wh: get("wh")?,
        uh: get("uh")?,
        bh: get("bh")?,
    })
}

fn gate_pre(tape: &mut Tape, w: Var, u: Var, b: Var, x: Var, h: Var) -> Result<Var> {
    let xw = tape.matmul(x, w)?;
    let hu = tape.matmul(h, u)?;
    let s = tape.add(xw, hu)?;
    tape.add_bias(s, b)
}

/// One GRU step on the tape (reset-before-candidate formulation):
/// `z = sigma(xWz + hUz + bz)`, `r = sigma(xWr + hUr + br)`,
/// `h~ = tanh(xWh + (r .* h)Uh + bh)`, `h' = (1 - z) .* h + z .* h~`.
pub fn gru_cell(tape: &mut Tape, p: &GruVars, x: Var, h: Var) -> Result<Var> {
    let z_pre = gate_pre(tape, p.wz, p.uz, p.bz, x, h)?;
    let z = tape.sigmoid(z_pre);
    let r_pre = gate_pre(tape, p.wr, p.ur, p.br, x, h)?;
    let r = tape.sigmoid(r_pre);
    let rh = tape.mul(r, h)?;
    let c_pre = gate_pre(tape, p.wh, p.uh, p.bh, x, rh)?;
    let cand = tape.tanh(c_pre);
    let neg_z = tape.scale(z, -1.0);
    let one_minus_z = tape.add_scalar(neg_z, 1.0);
    let keep = tape.mul(one_minus_z, h)?;
    let update = tape.mul(z, cand)?;
    tape.add(keep, update)
}

/// Run a GRU layer on the tape over per-step batched inputs (`B x in` each),
/// starting from an all-zero state. Returns the per-step hidden states.
pub fn gru_layer_forward(tape: &mut Tape, p: &GruVars, xs: &[Var]) -> Result<Vec<Var>> {
    let batch = tape.value(xs[0]).rows();
    let units = tape.value(p.uz).rows();
    let mut h = tape.constant(Tensor::zeros(vec![batch, units]));
    let mut outs = Vec::with_capacity(xs.len());
    for &x in xs {
        h = gru_cell(tape, p, x, h)?;
        outs.push(h);
    }
    Ok(outs)
}

/// Bidirectional GRU layer on the tape: per-step `[forward | backward]`.
pub fn bigru_layer_forward(tape: &mut Tape, fwd: &GruVars, bwd: &GruVars, xs: &[Var]) -> Result<Vec<Var>> {
    let f = gru_layer_forward(tape, fwd, xs)?;
    let rev: Vec<Var> = xs.iter().rev().copied().collect();
    let mut b = gru_layer_forward(tape, bwd, &rev)?;
    b.reverse();
    f.iter()
        .zip(&b)
        .map(|(&ft, &bt)| tape.concat_cols(&[ft, bt]))
        .collect()
}

// ── Dense layer ──────────────────────────────────────────────────────

#[derive(Clone, Copy)]
pub struct DenseVars {
    pub w: Var,
    pub b: Var,
}

pub fn init_dense(map: &mut ParamMap, prefix: &str, in_w: usize, out_w: usize, rng: &mut ChaCha8Rng) {
    map.insert(format!("{prefix}.w"), glorot_uniform(in_w, out_w, rng));
    map.insert(format!("{prefix}.b"), Tensor::zeros(vec![1, out_w]));
}

pub fn dense_vars(bound: &BTreeMap<String, Var>, prefix: &str) -> Result<DenseVars> {
    let get = |name: &str| -> Result<Var> {
        bound
            .get(&format!("{prefix}.{name}"))
            .copied()
            .ok_or_else(|| Error::Usage(format!("missing parameter {prefix}.{name}")))
    };
    Ok(DenseVars {
        w: get("w")?,
        b: get("b")?,
    })
}

pub fn dense_apply(tape: &mut Tape, d: &DenseVars, x: Var) -> Result<Var> {
    let xw = tape.matmul(x, d.w)?;
    tape.add_bias(xw, d.b)
}

pub fn init_gru_stack(
    map: &mut ParamMap,
    prefix: &str,
    input_width: usize,
    units: usize,
    layers: usize,
    bidirectional: bool,
    rng: &mut ChaCha8Rng,
) {
    let mut in_w = input_width;
    for l in 0..layers {
        if bidirectional {
            GruLayerParams::random(in_w, units, rng).insert_into(map, &format!("{prefix}.l{l}.fwd"));
            GruLayerParams::random(in_w, units, rng).insert_into(map, &format!("{prefix}.l{l}.bwd"));
            in_w = 2 * units;
        } else {
            GruLayerParams::random(in_w, units, rng).insert_into(map, &format!("{prefix}.l{l}"));
            in_w = units;
        }
    }
}

/// Run a (possibly bidirectional) multi-layer GRU stack on the tape from
/// pre-bound parameter handles.
pub fn gru_stack_forward(
    tape: &mut Tape,
    bound: &BTreeMap<String, Var>,
    prefix: &str,
    layers: usize,
    bidirectional: bool,
    xs: &[Var],
) -> Result<Vec<Var>> {
    let mut current: Vec<Var> = xs.to_vec();
    for l in 0..layers {
        current = if bidirectional {
            let fwd = gru_vars(bound, &format!("{prefix}.l{l}.fwd"))?;
            let bwd = gru_vars(bound, &format!("{prefix}.l{l}.bwd"))?;
            bigru_layer_forward(tape, &fwd, &bwd, &current)?
        } else {
            let p = gru_vars(bound, &format!("{prefix}.l{l}"))?;
            gru_layer_forward(tape, &p, &current)?
        };
    }
    Ok(current)
}

// ── Adam ─────────────────────────────────────────────────────────────

/// Adam optimizer state: first/second moment accumulators per parameter,
/// a step counter, and hyperparameters. Defaults beta1=0.9, beta2=0.999,
/// epsilon=1e-8.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: ParamMap,
    v: ParamMap,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub lr: f64,
}

impl AdamState {
    pub fn new(params: &ParamMap, lr: f64) -> Self {
        let zeros = |p: &ParamMap| -> ParamMap {
            p.iter()
                .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect()
        };
        AdamState {
            m: zeros(params),
            v: zeros(params),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            lr,
        }
    }

    pub fn tracked_keys(&self) -> impl Iterator<Item = &String> {
        self.m.keys()
    }
}

/// One Adam update with bias correction, applied in place to `params`.
/// `grads` must be keyed identically to the state's tracked parameters.
pub fn adam_step(params: &mut ParamMap, grads: &ParamMap, state: &mut AdamState) -> Result<()> {
    for key in state.m.keys() {
        if !grads.contains_key(key) {
            return Err(Error::Usage(format!("adam_step: missing gradient for {key}")));
        }
        if !params.contains_key(key) {
            return Err(Error::Usage(format!("adam_step: missing parameter {key}")));
        }
    }
    for key in grads.keys() {
        if !state.m.contains_key(key) {
            return Err(Error::Usage(format!("adam_step: gradient for untracked parameter {key}")));
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(state.t as i32);
    let bc2 = 1.0 - b2.powi(state.t as i32);
    for (key, g) in grads {
        let m = state.m.get_mut(key).expect("validated");
        let v = state.v.get_mut(key).expect("validated");
        let p = params.get_mut(key).expect("validated");
        for i in 0..g.numel() {
            let gi = g.data()[i];
            m.data_mut()[i] = b1 * m.data()[i] + (1.0 - b1) * gi;
            v.data_mut()[i] = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
            let m_hat = m.data()[i] / bc1;
            let v_hat = v.data()[i] / bc2;
            p.data_mut()[i] -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Collect gradients for every tape leaf in `bindings`, materializing zeros
/// for parameters the loss does not reach.
pub fn collect_grads(
    tape: &Tape,
    grads: &crate::tape::Gradients,
    bindings: &BTreeMap<String, Var>,
) -> ParamMap {
    bindings
        .iter()
        .map(|(name, &var)| {
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec()));
            (name.clone(), g)
        })
        .collect()
}

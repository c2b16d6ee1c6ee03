//! Central finite-difference verification of analytic gradients.
//!
//! The checker perturbs every parameter entry by +-h (default 1e-5),
//! re-evaluates the scalar loss, and compares the central difference to the
//! analytic gradient. Errors are relative to `max(|analytic|, |numeric|, 1)`.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{collect_grads, ParamMap};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Worst observed deviation of one gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub entries_checked: usize,
}

/// Compare analytic gradients against central finite differences on every
/// entry of every parameter.
pub fn check_gradients(
    params: &ParamMap,
    loss_fn: impl Fn(&ParamMap) -> Result<f64>,
    grad_fn: impl Fn(&ParamMap) -> Result<ParamMap>,
    h: f64,
) -> Result<GradCheck> {
    let analytic = grad_fn(params)?;
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst_param: String::new(),
        entries_checked: 0,
    };
    for (name, tensor) in params {
        let grad = &analytic[name];
        for i in 0..tensor.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).expect("key exists").data_mut()[i] += h;
            let l_plus = loss_fn(&plus)?;
            let mut minus = params.clone();
            minus.get_mut(name).expect("key exists").data_mut()[i] -= h;
            let l_minus = loss_fn(&minus)?;
            let numeric = (l_plus - l_minus) / (2.0 * h);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

/// Convenience wrapper for graphs expressed as a tape builder.
pub fn check_graph(
    params: &ParamMap,
    build: impl Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>,
    h: f64,
) -> Result<GradCheck> {
    let loss_fn = |p: &ParamMap| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = crate::nn::bind_all(&mut tape, p, true);
        let loss = build(&mut tape, &bound)?;
        Ok(tape.value(loss).item())
    };
    let grad_fn = |p: &ParamMap| -> Result<ParamMap> {
        let mut tape = Tape::new();
        let bound = crate::nn::bind_all(&mut tape, p, true);
        let loss = build(&mut tape, &bound)?;
        let grads = tape.backward(loss)?;
        Ok(collect_grads(&tape, &grads, &bound))
    };
    check_gradients(params, loss_fn, grad_fn, h)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Gradient checks for every differentiable tape primitive, each in a tiny
/// random graph projected to a scalar. Returns (name, max relative error)
/// pairs.
pub fn primitive_gradient_suite(seed: u64) -> Result<Vec<(String, f64)>> {
    let mut results = Vec::new();
    let mut rq = rng(seed);

    // Each case owns its parameters and a builder from bound vars to a
    // scalar loss. Constants are baked into the closures.
    type Builder = Box<dyn Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var>>;
    let mut cases: Vec<(String, ParamMap, Builder)> = Vec::new();

    // matmul: loss = mean((A @ B) .* W)
    {
        let mut p = ParamMap::new();
        p.insert("a".into(), random_tensor(&[3, 4], 1.0, &mut rq));
        p.insert("b".into(), random_tensor(&[4, 2], 1.0, &mut rq));
        let w = random_tensor(&[3, 2], 1.0, &mut rq);
        cases.push((
            "matmul".into(),
            p,
            Box::new(move |tape, bound| {
                let prod = tape.matmul(bound["a"], bound["b"])?;
                let wv = tape.constant(w.clone());
                let weighted = tape.mul(prod, wv)?;
                tape.mean(weighted)
            }),
        ));
    }

    // Elementwise binaries and unaries share one input shape.
    let unary_cases: Vec<(&str, fn(&mut Tape, Var) -> Var)> = vec![
        ("sigmoid", |t, v| t.sigmoid(v)),
        ("tanh", |t, v| t.tanh(v)),
        ("scale", |t, v| t.scale(v, -1.7)),
        ("add_scalar", |t, v| t.add_scalar(v, 0.9)),
        ("sign", |t, v| t.sign(v)),
    ];
    for (name, op) in unary_cases {
        let mut p = ParamMap::new();
        // Keep |x| >= 0.15 so the finite difference never crosses the sign
        // discontinuity at 0.
        let x = random_tensor(&[2, 3], 1.0, &mut rq).map(|v| v + 0.3 * v.signum().max(0.5));
        p.insert("x".into(), x);
        let w = random_tensor(&[2, 3], 1.0, &mut rq);
        cases.push((
            name.into(),
            p,
            Box::new(move |tape, bound| {
                let y = op(tape, bound["x"]);
                let wv = tape.constant(w.clone());
                let weighted = tape.mul(y, wv)?;
                tape.mean(weighted)
            }),
        ));
    }

    let binary_cases: Vec<(&str, fn(&mut Tape, Var, Var) -> Result<Var>)> = vec![
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
    ];
    for (name, op) in binary_cases {
        let mut p = ParamMap::new();
        p.insert("a".into(), random_tensor(&[2, 3], 1.0, &mut rq));
        p.insert("b".into(), random_tensor(&[2, 3], 1.0, &mut rq));
        let w = random_tensor(&[2, 3], 1.0, &mut rq);
        cases.push((
            name.into(),
            p,
            Box::new(move |tape, bound| {
                let y = op(tape, bound["a"], bound["b"])?;
                let wv = tape.constant(w.clone());
                let weighted = tape.mul(y, wv)?;
                tape.mean(weighted)
            }),
        ));
    }

    // add_bias
    {
        let mut p = ParamMap::new();
        p.insert("m".into(), random_tensor(&[3, 4], 1.0, &mut rq));
        p.insert("bias".into(), random_tensor(&[1, 4], 1.0, &mut rq));
        let w = random_tensor(&[3, 4], 1.0, &mut rq);
        cases.push((
            "add_bias".into(),
            p,
            Box::new(move |tape, bound| {
                let y = tape.add_bias(bound["m"], bound["bias"])?;
                let wv = tape.constant(w.clone());
                let weighted = tape.mul(y, wv)?;
                tape.mean(weighted)
            }),
        ));
    }

    // concat_cols + slice_cols + slice_rows
    {
        let mut p = ParamMap::new();
        p.insert("a".into(), random_tensor(&[3, 2], 1.0, &mut rq));
        p.insert("b".into(), random_tensor(&[3, 3], 1.0, &mut rq));
        let w = random_tensor(&[1, 3], 1.0, &mut rq);
        cases.push((
            "concat_slice".into(),
            p,
            Box::new(move |tape, bound| {
                let cat = tape.concat_cols(&[bound["a"], bound["b"]])?;
                let cols = tape.slice_cols(cat, 1, 4)?;
                let row = tape.slice_rows(cols, 1, 2)?;
                let wv = tape.constant(w.clone());
                let weighted = tape.mul(row, wv)?;
                tape.mean(weighted)
            }),
        ));
    }

    // mean and sum
    {
        let mut p = ParamMap::new();
        p.insert("x".into(), random_tensor(&[4, 3], 1.0, &mut rq));
        cases.push((
            "mean".into(),
            p.clone(),
            Box::new(|tape, bound| tape.mean(bound["x"])),
        ));
        cases.push((
            "sum".into(),
            p,
            Box::new(|tape, bound| {
                let s = tape.sum(bound["x"])?;
                Ok(tape.scale(s, 0.25))
            }),
        ));
    }

    // norm_cols / norm_all (batch standardization)
    {
        let mut p = ParamMap::new();
        p.insert("x".into(), random_tensor(&[6, 3], 1.0, &mut rq));
        let w = random_tensor(&[6, 3], 1.0, &mut rq);
        let w2 = w.clone();
        cases.push((
            "norm_cols".into(),
            p.clone(),
            Box::new(move |tape, bound| {
                let y = tape.norm_cols(bound["x"])?;
                let wv = tape.constant(w.clone());
                let weighted = tape.mul(y, wv)?;
                tape.mean(weighted)
            }),
        ));
        cases.push((
            "norm_all".into(),
            p,
            Box::new(move |tape, bound| {
                let y = tape.norm_all(bound["x"])?;
                let wv = tape.constant(w2.clone());
                let weighted = tape.mul(y, wv)?;
                tape.mean(weighted)
            }),
        ));
    }

    // affine_cols (frozen statistics)
    {
        let mut p = ParamMap::new();
        p.insert("x".into(), random_tensor(&[4, 3], 1.0, &mut rq));
        let w = random_tensor(&[4, 3], 1.0, &mut rq);
        cases.push((
            "affine_cols".into(),
            p,
            Box::new(move |tape, bound| {
                let y = tape.affine_cols(bound["x"], &[0.1, -0.2, 0.05], &[0.9, 1.1, 1.4])?;
                let wv = tape.constant(w.clone());
                let weighted = tape.mul(y, wv)?;
                tape.mean(weighted)
            }),
        ));
    }

    // Losses driven through a sigmoid so probabilities stay in (0, 1).
    {
        let mut p = ParamMap::new();
        p.insert("logits".into(), random_tensor(&[4, 3], 1.5, &mut rq));
        let targets = Tensor::matrix(4, 3, (0..12).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect()).unwrap();
        let t2 = targets.clone();
        cases.push((
            "bce_loss".into(),
            p.clone(),
            Box::new(move |tape, bound| {
                let probs = tape.sigmoid(bound["logits"]);
                let tv = tape.constant(targets.clone());
                tape.bce_loss(probs, tv)
            }),
        ));
        cases.push((
            "mse_loss".into(),
            p,
            Box::new(move |tape, bound| {
                let probs = tape.sigmoid(bound["logits"]);
                let tv = tape.constant(t2.clone());
                tape.mse_loss(probs, tv)
            }),
        ));
    }

    for (name, params, build) in cases {
        let check = check_graph(&params, |t, b| build(t, b), DEFAULT_FD_STEP)?;
        results.push((name, check.max_rel_err));
    }
    Ok(results)
}

/// Gradient check of a full 2-layer GRU + dense + BCE stack with under 1000
/// parameters.
pub fn gru_stack_gradient_check(seed: u64) -> Result<GradCheck> {
    use crate::nn::{dense_apply, dense_vars, gru_stack_forward, init_dense, init_gru_stack};

    let mut r = rng(seed);
    let (in_w, units, steps, batch) = (2, 6, 4, 3);
    let mut params = ParamMap::new();
    init_gru_stack(&mut params, "gru", in_w, units, 2, false, &mut r);
    init_dense(&mut params, "out", units, 1, &mut r);
    let total: usize = params.values().map(|t| t.numel()).sum();
    assert!(total <= 1000, "stack has {total} parameters");

    let inputs = random_tensor(&[batch, steps * in_w], 1.0, &mut r);
    let targets = Tensor::matrix(batch, steps, (0..batch * steps).map(|i| (i % 2) as f64).collect()).unwrap();

    check_graph(
        &params,
        move |tape, bound| {
            let x = tape.constant(inputs.clone());
            let xs: Vec<Var> = (0..steps)
                .map(|t| tape.slice_cols(x, t * in_w, (t + 1) * in_w))
                .collect::<Result<Vec<_>>>()?;
            let hidden = gru_stack_forward(tape, bound, "gru", 2, false, &xs)?;
            let head = dense_vars(bound, "out")?;
            let outs: Vec<Var> = hidden
                .iter()
                .map(|&h| dense_apply(tape, &head, h))
                .collect::<Result<Vec<_>>>()?;
            let logits = tape.concat_cols(&outs)?;
            let probs = tape.sigmoid(logits);
            let tv = tape.constant(targets.clone());
            tape.bce_loss(probs, tv)
        },
        DEFAULT_FD_STEP,
    )
}

/// Gradient check of a complete encode -> channel -> decode -> BCE pipeline
/// (fixed noise realization) at toy sizes, over encoder and decoder
/// parameters jointly.
pub fn pipeline_gradient_check(arch: &crate::neural::ArchSpec, seed: u64) -> Result<GradCheck> {
    use crate::neural::{decoder_graph, encoder_graph, ModelParams, Phase};

    let mut r = rng(seed);
    let model = ModelParams::init(arch.clone(), &mut r)?;
    let total: usize = model
        .enc
        .values()
        .chain(model.dec.values())
        .map(|t| t.numel())
        .sum();
    assert!(total <= 1000, "toy pipeline has {total} parameters");

    let batch = 3;
    let k = arch.k();
    let msgs = crate::common::random_message_matrix(batch, k, &mut r);
    let noise = random_tensor(&[batch, k * arch.rate().n_streams()], 0.5, &mut r);

    // Merge both sides under prefixes so one FD sweep covers everything.
    let mut joint = ParamMap::new();
    for (name, t) in &model.enc {
        joint.insert(format!("enc.{name}"), t.clone());
    }
    for (name, t) in &model.dec {
        joint.insert(format!("dec.{name}"), t.clone());
    }

    let split = |joint: &ParamMap| -> (ParamMap, ParamMap) {
        let mut enc = ParamMap::new();
        let mut dec = ParamMap::new();
        for (name, t) in joint {
            if let Some(rest) = name.strip_prefix("enc.") {
                enc.insert(rest.to_string(), t.clone());
            } else if let Some(rest) = name.strip_prefix("dec.") {
                dec.insert(rest.to_string(), t.clone());
            }
        }
        (enc, dec)
    };

    let build = |p: &ParamMap| -> Result<(Tape, Var, ParamMap, ParamMap)> {
        let (enc, dec) = split(p);
        let mut tape = Tape::new();
        let eg = encoder_graph(&mut tape, arch, &enc, &msgs, Phase::Train, None, true)?;
        let noise_leaf = tape.constant(noise.clone());
        let y = tape.add(eg.code, noise_leaf)?;
        let dg = decoder_graph(&mut tape, arch, &dec, y, true)?;
        let targets = tape.constant(msgs.clone());
        let loss = tape.bce_loss(dg.probs, targets)?;
        let mut enc_grads = ParamMap::new();
        let mut dec_grads = ParamMap::new();
        let grads = tape.backward(loss)?;
        for (name, &var) in &eg.bound {
            enc_grads.insert(
                format!("enc.{name}"),
                grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec())),
            );
        }
        for (name, &var) in &dg.bound {
            dec_grads.insert(
                format!("dec.{name}"),
                grads
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape().to_vec())),
            );
        }
        Ok((tape, loss, enc_grads, dec_grads))
    };

    check_gradients(
        &joint,
        |p| {
            let (tape, loss, _, _) = build(p)?;
            Ok(tape.value(loss).item())
        },
        |p| {
            let (_, _, enc_g, dec_g) = build(p)?;
            Ok(enc_g.into_iter().chain(dec_g).collect())
        },
        DEFAULT_FD_STEP,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::common::Rate;
    use crate::neural::{ArchSpec, ChannelAeConfig, LearnConfig, PowerMode};

    #[test]
    fn primitives_match_finite_differences() {
        for (name, err) in primitive_gradient_suite(1234).unwrap() {
            assert!(err <= 1e-4, "{name}: relative error {err}");
        }
    }

    #[test]
    fn gru_stack_matches_finite_differences() {
        let check = gru_stack_gradient_check(77).unwrap();
        assert!(
            check.max_rel_err <= 1e-4,
            "worst {} at {}",
            check.max_rel_err,
            check.worst_param
        );
    }

    #[test]
    fn full_pipeline_matches_finite_differences() {
        let ae = ArchSpec::ChannelAe(ChannelAeConfig {
            k: 4,
            rate: Rate::R12,
            enc_units: 2,
            dec_units: 3,
            enc_layers: 2,
            dec_layers: 2,
            power: PowerMode::Bitwise,
        });
        let check = pipeline_gradient_check(&ae, 5).unwrap();
        assert!(
            check.max_rel_err <= 1e-4,
            "block AE pipeline: worst {} at {}",
            check.max_rel_err,
            check.worst_param
        );

        let learn = ArchSpec::Learn(LearnConfig {
            k: 5,
            rate: Rate::R13,
            delay: 2,
            enc_units: 2,
            dec_units: 3,
            enc_layers: 2,
            dec_layers: 2,
            power: PowerMode::Bitwise,
        });
        let check = pipeline_gradient_check(&learn, 6).unwrap();
        assert!(
            check.max_rel_err <= 1e-4,
            "low-latency pipeline: worst {} at {}",
            check.max_rel_err,
            check.worst_param
        );
    }
}

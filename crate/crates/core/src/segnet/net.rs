//! Whole-network forward/backward over batches, plus the training loss.

use super::ops::{
    concat, conv_forward, conv_backward, maxpool2, maxpool2_backward, relu_backward, sigmoid,
    split_grad, upsample2, upsample2_backward, FeatureMap,
};
use super::{ParamSet, Scalar, SegnetError};
use crate::preprocess::Sample;
use rayon::prelude::*;

const CLAMP_EPS: f64 = 1e-7;

/// A batch of samples (or predictions), sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    pub count: usize,
    pub channels: usize,
    pub side: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_parts(count: usize, channels: usize, side: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), count * channels * side * side);
        Batch {
            count,
            channels,
            side,
            data,
        }
    }

    /// Stack sample inputs into one batch.
    pub fn inputs(samples: &[&Sample]) -> Result<Batch<T>, SegnetError> {
        Self::stack(samples, |s| (&s.input, s.input_channels))
    }

    /// Stack sample targets into one batch (always 2 channels).
    pub fn targets(samples: &[&Sample]) -> Result<Batch<T>, SegnetError> {
        Self::stack(samples, |s| (&s.target, 2))
    }

    fn stack(
        samples: &[&Sample],
        select: impl Fn(&Sample) -> (&Vec<f32>, usize),
    ) -> Result<Batch<T>, SegnetError> {
        let first = samples.first().ok_or(SegnetError::EmptySet { which: "batch" })?;
        let (_, channels) = select(first);
        let side = first.side;
        let mut data = Vec::with_capacity(samples.len() * channels * side * side);
        for s in samples {
            let (values, c) = select(s);
            if s.side != side || c != channels {
                return Err(SegnetError::ShapeMismatch {
                    expected: format!("{channels}x{side}x{side}"),
                    found: format!("{}x{}x{}", c, s.side, s.side),
                });
            }
            data.extend(values.iter().map(|&v| T::from_f64(v as f64)));
        }
        Ok(Batch {
            count: samples.len(),
            channels,
            side,
            data,
        })
    }

    pub fn sample(&self, i: usize) -> FeatureMap<T> {
        let n = self.channels * self.side * self.side;
        FeatureMap::from_vec(
            self.channels,
            self.side,
            self.side,
            self.data[i * n..(i + 1) * n].to_vec(),
        )
    }
}

// Canonical layer indices; see `layer_shapes`.
struct LayerIndex {
    depth: usize,
}

impl LayerIndex {
    fn enc_a(&self, i: usize) -> usize {
        2 * i
    }
    fn enc_b(&self, i: usize) -> usize {
        2 * i + 1
    }
    fn bot_a(&self) -> usize {
        2 * self.depth
    }
    fn bot_b(&self) -> usize {
        2 * self.depth + 1
    }
    fn dec_a(&self, i: usize) -> usize {
        2 * self.depth + 2 + 2 * (self.depth - 1 - i)
    }
    fn dec_b(&self, i: usize) -> usize {
        self.dec_a(i) + 1
    }
    fn head(&self) -> usize {
        4 * self.depth + 2
    }
}

/// Per-sample activation record for backpropagation.
struct Tape<T> {
    conv_inputs: Vec<FeatureMap<T>>,
    conv_outputs: Vec<FeatureMap<T>>,
    pool_argmax: Vec<Vec<u32>>,
    pool_in_shape: Vec<(usize, usize, usize)>,
}

fn forward_sample<T: Scalar>(
    params: &ParamSet<T>,
    input: FeatureMap<T>,
    record: bool,
) -> (FeatureMap<T>, Option<Tape<T>>) {
    let d = params.config.depth;
    let ix = LayerIndex { depth: d };
    let n_layers = params.layers.len();
    let mut tape = if record {
        Some(Tape {
            conv_inputs: Vec::with_capacity(n_layers),
            conv_outputs: Vec::with_capacity(n_layers),
            pool_argmax: Vec::with_capacity(d),
            pool_in_shape: Vec::with_capacity(d),
        })
    } else {
        None
    };

    let run_conv = |tape: &mut Option<Tape<T>>, idx: usize, x: FeatureMap<T>, relu: bool| {
        let out = conv_forward(&params.layers[idx], &x, relu);
        if let Some(t) = tape {
            debug_assert_eq!(t.conv_inputs.len(), idx);
            t.conv_inputs.push(x);
            t.conv_outputs.push(out.clone());
        }
        out
    };

    let mut skips: Vec<FeatureMap<T>> = Vec::with_capacity(d);
    let mut x = input;
    for i in 0..d {
        x = run_conv(&mut tape, ix.enc_a(i), x, true);
        x = run_conv(&mut tape, ix.enc_b(i), x, true);
        let (pooled, argmax) = maxpool2(&x);
        if let Some(t) = &mut tape {
            t.pool_argmax.push(argmax);
            t.pool_in_shape.push((x.channels, x.height, x.width));
        }
        skips.push(x);
        x = pooled;
    }
    x = run_conv(&mut tape, ix.bot_a(), x, true);
    x = run_conv(&mut tape, ix.bot_b(), x, true);
    for i in (0..d).rev() {
        let up = upsample2(&x);
        let cat = concat(&up, &skips[i]);
        x = run_conv(&mut tape, ix.dec_a(i), cat, true);
        x = run_conv(&mut tape, ix.dec_b(i), x, true);
    }
    let mut y = run_conv(&mut tape, ix.head(), x, false);
    sigmoid(&mut y);
    if let Some(t) = &mut tape {
        // Overwrite the head record with the post-sigmoid output.
        *t.conv_outputs.last_mut().unwrap() = y.clone();
    }
    (y, tape)
}

/// Per-layer gradients, shaped like the parameters they belong to.
type LayerGrads<T> = Vec<(Vec<T>, Vec<T>)>;

fn backward_sample<T: Scalar>(
    params: &ParamSet<T>,
    tape: &Tape<T>,
    mut grad: FeatureMap<T>,
) -> LayerGrads<T> {
    let d = params.config.depth;
    let ix = LayerIndex { depth: d };
    let mut grads: Vec<(Vec<T>, Vec<T>)> = params
        .layers
        .iter()
        .map(|l| (vec![T::zero(); l.weights.len()], vec![T::zero(); l.bias.len()]))
        .collect();

    let conv_back = |idx: usize, grad: &FeatureMap<T>, grads: &mut LayerGrads<T>| {
        let (gin, gw, gb) = conv_backward(&params.layers[idx], &tape.conv_inputs[idx], grad);
        grads[idx] = (gw, gb);
        gin
    };

    // Head: sigmoid then 1x1 conv.
    {
        let y = &tape.conv_outputs[ix.head()];
        for (g, &yv) in grad.data.iter_mut().zip(&y.data) {
            *g = *g * yv * (T::one() - yv);
        }
        grad = conv_back(ix.head(), &grad, &mut grads);
    }

    // Decoder levels were executed d-1 .. 0, so walk them back 0 .. d-1.
    let mut skip_grads: Vec<Option<FeatureMap<T>>> = (0..d).map(|_| None).collect();
    for i in 0..d {
        relu_backward(&mut grad, &tape.conv_outputs[ix.dec_b(i)]);
        grad = conv_back(ix.dec_b(i), &grad, &mut grads);
        relu_backward(&mut grad, &tape.conv_outputs[ix.dec_a(i)]);
        grad = conv_back(ix.dec_a(i), &grad, &mut grads);
        let up_channels = 2 * (params.config.base_width << i);
        let (g_up, g_skip) = split_grad(&grad, up_channels);
        skip_grads[i] = Some(g_skip);
        grad = upsample2_backward(&g_up);
    }

    relu_backward(&mut grad, &tape.conv_outputs[ix.bot_b()]);
    grad = conv_back(ix.bot_b(), &grad, &mut grads);
    relu_backward(&mut grad, &tape.conv_outputs[ix.bot_a()]);
    grad = conv_back(ix.bot_a(), &grad, &mut grads);

    for i in (0..d).rev() {
        grad = maxpool2_backward(&grad, &tape.pool_argmax[i], tape.pool_in_shape[i]);
        let skip = skip_grads[i].take().expect("skip gradient");
        debug_assert_eq!(grad.data.len(), skip.data.len());
        for (g, s) in grad.data.iter_mut().zip(&skip.data) {
            *g = *g + *s;
        }
        relu_backward(&mut grad, &tape.conv_outputs[ix.enc_b(i)]);
        grad = conv_back(ix.enc_b(i), &grad, &mut grads);
        relu_backward(&mut grad, &tape.conv_outputs[ix.enc_a(i)]);
        // The final level's result is the gradient at the network input.
        grad = conv_back(ix.enc_a(i), &grad, &mut grads);
    }
    grads
}

fn check_batch_shape<T: Scalar>(params: &ParamSet<T>, batch: &Batch<T>) -> Result<(), SegnetError> {
    if batch.channels != params.config.input_channels || batch.side != params.config.image_side {
        return Err(SegnetError::ShapeMismatch {
            expected: format!(
                "{}x{}x{}",
                params.config.input_channels, params.config.image_side, params.config.image_side
            ),
            found: format!("{}x{}x{}", batch.channels, batch.side, batch.side),
        });
    }
    Ok(())
}

fn check_one_hot<T: Scalar>(target: &Batch<T>) -> Result<(), SegnetError> {
    if target.channels != 2 {
        return Err(SegnetError::ShapeMismatch {
            expected: "2-channel target".into(),
            found: format!("{}-channel target", target.channels),
        });
    }
    let plane = target.side * target.side;
    for s in 0..target.count {
        let base = s * 2 * plane;
        for p in 0..plane {
            let a = target.data[base + p];
            let b = target.data[base + plane + p];
            let binary = |v: T| v == T::zero() || v == T::one();
            if !binary(a) || !binary(b) || a + b != T::one() {
                return Err(SegnetError::NonOneHotTarget { index: s * plane + p });
            }
        }
    }
    Ok(())
}

/// Run the network over a batch. Outputs share the batch layout and land in
/// the open interval (0,1).
pub fn forward<T: Scalar>(params: &ParamSet<T>, batch: &Batch<T>) -> Result<Batch<T>, SegnetError> {
    check_batch_shape(params, batch)?;
    let outputs: Vec<FeatureMap<T>> = (0..batch.count)
        .into_par_iter()
        .map(|i| forward_sample(params, batch.sample(i), false).0)
        .collect();
    let mut data = Vec::with_capacity(batch.count * params.config.output_channels * batch.side * batch.side);
    for out in &outputs {
        data.extend_from_slice(&out.data);
    }
    Ok(Batch {
        count: batch.count,
        channels: params.config.output_channels,
        side: batch.side,
        data,
    })
}

/// Mean pixelwise binary cross-entropy over both channels, with
/// predictions clamped to [eps, 1-eps].
pub fn bce_loss<T: Scalar>(pred: &Batch<T>, target: &Batch<T>) -> Result<f64, SegnetError> {
    if (pred.count, pred.channels, pred.side) != (target.count, target.channels, target.side) {
        return Err(SegnetError::ShapeMismatch {
            expected: format!("{}x{}x{}", target.count, target.channels, target.side),
            found: format!("{}x{}x{}", pred.count, pred.channels, pred.side),
        });
    }
    check_one_hot(target)?;
    let mut sum = 0.0f64;
    for (&p, &t) in pred.data.iter().zip(&target.data) {
        let p = p.as_f64().clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
        let t = t.as_f64();
        sum -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(sum / pred.data.len() as f64)
}

/// Forward, loss, and gradients of the loss with respect to every parameter.
pub fn backward<T: Scalar>(
    params: &ParamSet<T>,
    batch: &Batch<T>,
    target: &Batch<T>,
) -> Result<(f64, ParamSet<T>), SegnetError> {
    check_batch_shape(params, batch)?;
    if target.count != batch.count || target.side != batch.side {
        return Err(SegnetError::ShapeMismatch {
            expected: format!("{} target samples of side {}", batch.count, batch.side),
            found: format!("{} target samples of side {}", target.count, target.side),
        });
    }
    check_one_hot(target)?;

    let plane = batch.side * batch.side;
    let out_n = params.config.output_channels * plane;
    let n_total = (batch.count * out_n) as f64;

    let per_sample: Vec<(f64, LayerGrads<T>)> = (0..batch.count)
        .into_par_iter()
        .map(|s| {
            let (y, tape) = forward_sample(params, batch.sample(s), true);
            let tape = tape.expect("tape requested");
            let mut grad = FeatureMap::zeros(y.channels, y.height, y.width);
            let mut loss_sum = 0.0f64;
            for (p_idx, (&p, g)) in y.data.iter().zip(grad.data.iter_mut()).enumerate() {
                let t = target.data[s * out_n + p_idx].as_f64();
                let pf = p.as_f64();
                let pc = pf.clamp(CLAMP_EPS, 1.0 - CLAMP_EPS);
                loss_sum -= t * pc.ln() + (1.0 - t) * (1.0 - pc).ln();
                // The clamp zeroes the gradient outside its interval.
                if (CLAMP_EPS..=1.0 - CLAMP_EPS).contains(&pf) {
                    *g = T::from_f64((-t / pc + (1.0 - t) / (1.0 - pc)) / n_total);
                }
            }
            (loss_sum, backward_sample(params, &tape, grad))
        })
        .collect();

    // Reduce in sample order so accumulation stays bit-deterministic.
    let mut grads = params.zeros_like();
    let mut loss = 0.0f64;
    for (sample_loss, layer_grads) in per_sample {
        loss += sample_loss;
        for (acc, (gw, gb)) in grads.layers.iter_mut().zip(layer_grads) {
            for (a, g) in acc.weights.iter_mut().zip(gw) {
                *a = *a + g;
            }
            for (a, g) in acc.bias.iter_mut().zip(gb) {
                *a = *a + g;
            }
        }
    }
    Ok((loss / n_total, grads))
}

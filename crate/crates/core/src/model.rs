//! Architectures, flat parameter states, and the taped forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{kernels, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Layer {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        padding: Padding,
    },
    Relu,
    AvgPool {
        size: usize,
    },
    Flatten,
}

impl Layer {
    fn pad(kernel: usize, padding: Padding) -> usize {
        match padding {
            Padding::Valid => 0,
            Padding::Same => (kernel - 1) / 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegmentKind {
    Weight,
    Bias,
}

/// One contiguous block of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub layer: usize,
    pub kind: SegmentKind,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Only dense/conv weight matrices are prunable.
    pub prunable: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Layer stack plus the per-example input shape.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Arch {
    pub input_shape: Vec<usize>,
    pub layers: Vec<Layer>,
}

impl Arch {
    pub fn new(input_shape: Vec<usize>, layers: Vec<Layer>) -> Result<Self> {
        let arch = Self {
            input_shape,
            layers,
        };
        arch.output_shape()?;
        Ok(arch)
    }

    /// Dense → ReLU blocks for each hidden width, then a dense classifier.
    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = inputs;
        for &h in hidden {
            layers.push(Layer::Dense {
                inputs: width,
                outputs: h,
            });
            layers.push(Layer::Relu);
            width = h;
        }
        layers.push(Layer::Dense {
            inputs: width,
            outputs: classes,
        });
        Self::new(vec![inputs], layers)
    }

    /// Three conv(3×3, same) → ReLU → avgpool(2) blocks and a dense head.
    pub fn convnet3(input_shape: [usize; 3], width: usize, classes: usize) -> Result<Self> {
        let [c, mut h, mut w] = input_shape;
        let mut layers = Vec::new();
        let mut ch = c;
        for _ in 0..3 {
            layers.push(Layer::Conv2d {
                in_channels: ch,
                out_channels: width,
                kernel: 3,
                padding: Padding::Same,
            });
            layers.push(Layer::Relu);
            if h >= 2 && w >= 2 {
                layers.push(Layer::AvgPool { size: 2 });
                h /= 2;
                w /= 2;
            }
            ch = width;
        }
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense {
            inputs: ch * h * w,
            outputs: classes,
        });
        Self::new(input_shape.to_vec(), layers)
    }

    /// Per-example output shape, validating every layer along the way.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::ArchMismatch(format!("layer {i}: {msg}"));
            shape = match layer {
                Layer::Dense { inputs, outputs } => {
                    if shape != [*inputs] {
                        return Err(bad(format!("dense expects [{inputs}], got {shape:?}")));
                    }
                    vec![*outputs]
                }
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    padding,
                } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(bad(format!("conv expects [C,H,W], got {shape:?}")));
                    };
                    if c != *in_channels || *kernel == 0 {
                        return Err(bad(format!("conv expects {in_channels} channels, got {c}")));
                    }
                    let pad = Layer::pad(*kernel, *padding);
                    if h + 2 * pad < *kernel || w + 2 * pad < *kernel {
                        return Err(bad("conv kernel larger than input".into()));
                    }
                    vec![
                        *out_channels,
                        h + 2 * pad + 1 - kernel,
                        w + 2 * pad + 1 - kernel,
                    ]
                }
                Layer::Relu => shape,
                Layer::AvgPool { size } => {
                    let &[c, h, w] = shape.as_slice() else {
                        return Err(bad(format!("pool expects [C,H,W], got {shape:?}")));
                    };
                    if *size == 0 || h < *size || w < *size {
                        return Err(bad("pool window larger than input".into()));
                    }
                    vec![c, h / size, w / size]
                }
                Layer::Flatten => vec![shape.iter().product()],
            };
        }
        if shape.len() != 1 {
            return Err(Error::ArchMismatch(format!(
                "final output must be a logit vector, got {shape:?}"
            )));
        }
        Ok(shape)
    }

    pub fn classes(&self) -> usize {
        self.output_shape().map(|s| s[0]).unwrap_or(0)
    }

    pub fn segments(&self) -> Vec<Segment> {
        let mut out = Vec::new();
        let mut offset = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            let (w_shape, b_len) = match layer {
                Layer::Dense { inputs, outputs } => (vec![*inputs, *outputs], *outputs),
                Layer::Conv2d {
                    in_channels,
                    out_channels,
                    kernel,
                    ..
                } => (
                    vec![*out_channels, *in_channels, *kernel, *kernel],
                    *out_channels,
                ),
                _ => continue,
            };
            let w = Segment {
                layer: i,
                kind: SegmentKind::Weight,
                offset,
                shape: w_shape,
                prunable: true,
            };
            offset += w.len();
            out.push(w);
            out.push(Segment {
                layer: i,
                kind: SegmentKind::Bias,
                offset,
                shape: vec![b_len],
                prunable: false,
            });
            offset += b_len;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.segments().iter().map(Segment::len).sum()
    }

    /// Short stable digest of the architecture.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("arch serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

/// A point in parameter space for a given architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Vec<f32>,
    pub arch: Arch,
    pub init_seed: u64,
    /// Weights as of the end of this epoch; 0 is initialization.
    pub epoch_tag: u32,
}

impl ModelState {
    /// Uniform(±1/√fan_in) weights and biases from a seeded stream.
    pub fn init(arch: &Arch, init_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
        let mut params = vec![0.0f32; arch.param_count()];
        let segments = arch.segments();
        for pair in segments.chunks(2) {
            let fan_in: usize = match &pair[0].shape[..] {
                [inputs, _] => *inputs,
                [_, ci, k, k2] => ci * k * k2,
                _ => 1,
            };
            let bound = 1.0 / (fan_in as f32).sqrt();
            for seg in pair {
                for p in &mut params[seg.range()] {
                    *p = rng.random_range(-bound..bound);
                }
            }
        }
        Self {
            params,
            arch: arch.clone(),
            init_seed,
            epoch_tag: 0,
        }
    }

    pub fn check_compatible(&self, other: &ModelState) -> Result<()> {
        if self.arch != other.arch || self.params.len() != other.params.len() {
            return Err(Error::ArchMismatch(format!(
                "states have architectures {} and {}",
                self.arch.digest(),
                other.arch.digest()
            )));
        }
        Ok(())
    }

    pub fn with_params(&self, params: Vec<f32>) -> Self {
        Self {
            params,
            arch: self.arch.clone(),
            init_seed: self.init_seed,
            epoch_tag: self.epoch_tag,
        }
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

fn check_batch(arch: &Arch, batch: &Tensor, labels: Option<&[usize]>) -> Result<()> {
    if batch.rank() < 1 || batch.shape()[1..] != arch.input_shape[..] {
        let mut expected = vec![batch.rows()];
        expected.extend(&arch.input_shape);
        return Err(Error::Shape {
            context: "batch vs architecture input",
            expected,
            actual: batch.shape().to_vec(),
        });
    }
    if let Some(labels) = labels {
        if labels.len() != batch.rows() {
            return Err(Error::Shape {
                context: "labels vs batch",
                expected: vec![batch.rows()],
                actual: vec![labels.len()],
            });
        }
    }
    Ok(())
}

fn check_finite(tape: &Tape, v: Var, layer: usize, context: &str) -> Result<()> {
    if tape.value(v).is_finite() {
        Ok(())
    } else {
        Err(Error::NumericFailure {
            layer,
            context: context.to_string(),
        })
    }
}

/// Records the network on `tape`, reading weights out of the flat `params`
/// var. Returns the logits var.
pub fn build_logits(tape: &mut Tape, arch: &Arch, params: Var, input: Var) -> Result<Var> {
    let segments = arch.segments();
    let mut seg_iter = segments.iter();
    let mut h = input;
    let batch = tape.shape(input)[0];
    for (i, layer) in arch.layers.iter().enumerate() {
        h = match layer {
            Layer::Dense { .. } => {
                let (ws, bs) = (seg_iter.next().unwrap(), seg_iter.next().unwrap());
                let w = tape.slice(params, ws.offset, ws.shape.clone())?;
                let b = tape.slice(params, bs.offset, bs.shape.clone())?;
                let z = tape.matmul(h, w)?;
                tape.bias_add(z, b)?
            }
            Layer::Conv2d {
                kernel, padding, ..
            } => {
                let (ws, bs) = (seg_iter.next().unwrap(), seg_iter.next().unwrap());
                let w = tape.slice(params, ws.offset, ws.shape.clone())?;
                let b = tape.slice(params, bs.offset, bs.shape.clone())?;
                let z = tape.conv2d(h, w, Layer::pad(*kernel, *padding))?;
                tape.bias_add(z, b)?
            }
            Layer::Relu => tape.relu(h),
            Layer::AvgPool { size } => tape.avg_pool(h, *size)?,
            Layer::Flatten => {
                let width = tape.value(h).row_len();
                tape.reshape(h, vec![batch, width])?
            }
        };
        check_finite(tape, h, i, "forward activation")?;
    }
    Ok(h)
}

/// A recorded forward pass waiting for its backward sweep.
#[derive(Debug)]
pub struct ComputationTape {
    tape: Tape,
    params: Var,
    loss: Var,
    consumed: bool,
}

impl ComputationTape {
    pub fn op_count(&self) -> usize {
        self.tape.len()
    }
}

#[derive(Debug)]
pub struct Forward {
    pub loss: f64,
    pub tape: ComputationTape,
}

/// Mean cross-entropy of `state` on a batch, with the tape for [`backward`].
pub fn forward(state: &ModelState, batch: &Tensor, labels: &[usize]) -> Result<Forward> {
    check_batch(&state.arch, batch, Some(labels))?;
    let mut tape = Tape::new();
    let params = tape.leaf(Tensor::from_vec(state.params.clone()));
    let input = tape.constant(batch.clone());
    let logits = build_logits(&mut tape, &state.arch, params, input)?;
    let loss = tape.cross_entropy(logits, labels)?;
    check_finite(&tape, loss, state.arch.layers.len(), "loss")?;
    let rows = kernels::cross_entropy_rows(
        tape.value(logits).data(),
        labels,
        tape.value(logits).row_len(),
    );
    let mean = rows.iter().sum::<f64>() / rows.len() as f64;
    Ok(Forward {
        loss: mean,
        tape: ComputationTape {
            tape,
            params,
            loss,
            consumed: false,
        },
    })
}

/// Gradient of the recorded loss with respect to the flat parameters.
pub fn backward(tape: &mut ComputationTape) -> Result<Vec<f32>> {
    if tape.consumed {
        return Err(Error::TapeConsumed);
    }
    tape.consumed = true;
    let g = tape.tape.grad(tape.loss, &[tape.params])?[0];
    let grad = tape.tape.value(g).data().to_vec();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericFailure {
            layer: tape.params.index(),
            context: "gradient".into(),
        });
    }
    Ok(grad)
}

/// Loss and gradient in one call.
pub fn loss_and_grad(state: &ModelState, batch: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f32>)> {
    let mut fwd = forward(state, batch, labels)?;
    let g = backward(&mut fwd.tape)?;
    Ok((fwd.loss, g))
}

/// Tape-free inference.
pub fn logits(state: &ModelState, batch: &Tensor) -> Result<Tensor> {
    check_batch(&state.arch, batch, None)?;
    let mut tape = Tape::new();
    let params = tape.constant(Tensor::from_vec(state.params.clone()));
    let input = tape.constant(batch.clone());
    let out = build_logits(&mut tape, &state.arch, params, input)?;
    Ok(tape.value(out).clone())
}

/// Gradient of `(1/n) Σ loss` over `features` in fixed consecutive batches.
pub fn full_gradient(
    state: &ModelState,
    features: &Tensor,
    labels: &[usize],
    batch_size: usize,
) -> Result<(f64, Vec<f32>)> {
    let n = features.rows();
    let bs = batch_size.max(1);
    let mut acc = vec![0.0f64; state.params.len()];
    let mut loss = 0.0f64;
    let mut start = 0;
    while start < n {
        let end = (start + bs).min(n);
        let batch = features.rows_range(start, end);
        let (l, g) = loss_and_grad(state, &batch, &labels[start..end])?;
        let w = (end - start) as f64 / n as f64;
        loss += l * w;
        for (a, gi) in acc.iter_mut().zip(&g) {
            *a += *gi as f64 * w;
        }
        start = end;
    }
    Ok((loss, acc.into_iter().map(|v| v as f32).collect()))
}

/// Central-difference Hessian-vector product of any gradient function:
/// `(∇(θ + εv) − ∇(θ − εv)) / 2ε` with `ε = 1e-3 / max(1, ‖v‖∞)`.
pub fn hvp_with<F>(grad_fn: F, params: &[f32], v: &[f32]) -> Result<Vec<f32>>
where
    F: Fn(&[f32]) -> Result<Vec<f32>>,
{
    if v.len() != params.len() {
        return Err(Error::Shape {
            context: "hvp direction",
            expected: vec![params.len()],
            actual: vec![v.len()],
        });
    }
    let vmax = v.iter().fold(0.0f32, |m, x| m.max(x.abs()));
    if vmax == 0.0 {
        return Ok(vec![0.0; v.len()]);
    }
    let eps = 1e-3 / vmax.max(1.0) as f64;
    let shifted = |sign: f64| -> Vec<f32> {
        params
            .iter()
            .zip(v)
            .map(|(&p, &d)| (p as f64 + sign * eps * d as f64) as f32)
            .collect()
    };
    let plus = grad_fn(&shifted(1.0))?;
    let minus = grad_fn(&shifted(-1.0))?;
    let out: Vec<f32> = plus
        .iter()
        .zip(&minus)
        .map(|(&a, &b)| ((a as f64 - b as f64) / (2.0 * eps)) as f32)
        .collect();
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NumericFailure {
            layer: 0,
            context: "hessian-vector product".into(),
        });
    }
    Ok(out)
}

/// Hessian-vector product of the batch loss at `state`.
pub fn hvp(state: &ModelState, batch: &Tensor, labels: &[usize], v: &[f32]) -> Result<Vec<f32>> {
    hvp_with(
        |p| loss_and_grad(&state.with_params(p.to_vec()), batch, labels).map(|(_, g)| g),
        &state.params,
        v,
    )
}

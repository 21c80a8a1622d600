//! Trainable velocity model with analytic gradients.
//!
//! A two-hidden-layer tanh perceptron is applied per frame position with shared
//! weights. Its input at position `i` is
//! `[x̂_i (d) | ctx_i (d) | g (d) | time embedding (8)]`, where
//! `g = Σ_j a_j ctx_j` is a learned position-weighted pool of the whole context.
//! The pool is the only path by which one position sees another's context slot.
//! Alongside the hidden layers runs a linear skip from input to output whose
//! matrix is modulated by time, `W(t) = W_0 + Σ_j e_j(t) W_j` over the time
//! embedding features `e_j`, so gains like `1/(1-t)` are cheap to represent.
//!
//! The pose adapter is part of the parameter vector; its gradient flows through
//! `x̂ = x_t + W_pose p + b_pose` when raw states and poses are supplied.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::Matrix;
use crate::memory::{inject_pose, ModelInput, PoseAdapter};
use crate::rng::{self, Stream};
use crate::scalar::Scalar;
use crate::tensor::Chunk;

/// Sine/cosine pairs in the time embedding.
pub const TIME_PAIRS: usize = 4;
pub const TIME_WIDTH: usize = 2 * TIME_PAIRS;
/// Constant gate plus one per time feature.
pub const SKIP_GATES: usize = TIME_WIDTH + 1;

/// Anything the sampler can integrate.
pub trait VelocityField<T: Scalar>: Sync {
    /// Adapter the sampler uses to inject pose before every evaluation.
    fn pose_adapter(&self) -> &PoseAdapter<T>;

    /// Velocity for the target positions of `input`, given the chunk's poses.
    fn velocity(&self, input: &ModelInput<T>, poses: &Chunk<T>) -> Result<Chunk<T>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldShape {
    pub latent_dim: usize,
    pub pose_dim: usize,
    /// Temporal length `T_z` of target and context.
    pub context_len: usize,
    pub hidden: usize,
}

impl FieldShape {
    pub fn input_width(&self) -> usize {
        3 * self.latent_dim + TIME_WIDTH
    }

    pub fn param_count(&self) -> usize {
        let (d, h, w) = (self.latent_dim, self.hidden, self.input_width());
        self.context_len + h * w + h + h * h + h + d * h + d + SKIP_GATES * d * w + d * self.pose_dim + d
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.pose_dim == 0 || self.context_len == 0 || self.hidden == 0 {
            return Err(Error::Config("field dimensions must all be at least 1".into()));
        }
        Ok(())
    }
}

pub fn time_embedding<T: Scalar>(t: T) -> [T; TIME_WIDTH] {
    let mut out = [T::zero(); TIME_WIDTH];
    for k in 0..TIME_PAIRS {
        let w = T::of(std::f64::consts::PI * (1u32 << k) as f64);
        out[2 * k] = (w * t).sin();
        out[2 * k + 1] = (w * t).cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct VectorField<T> {
    shape: FieldShape,
    mix: Vec<T>,
    w1: Matrix<T>,
    b1: Vec<T>,
    w2: Matrix<T>,
    b2: Vec<T>,
    w3: Matrix<T>,
    b3: Vec<T>,
    /// Time-gated linear path from the per-position input to the output.
    skip: Vec<Matrix<T>>,
    adapter: PoseAdapter<T>,
}

/// Loss and gradient aligned with [`VectorField::to_flat`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientRecord<T> {
    pub loss: T,
    pub grad: Vec<T>,
}

/// One supervised example: raw state, poses, context, time, and target velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldExample<T> {
    pub xt: Chunk<T>,
    pub poses: Chunk<T>,
    pub context: Chunk<T>,
    pub t: T,
    pub target: Chunk<T>,
}

struct Trace<T> {
    g: Vec<T>,
    z: Vec<Vec<T>>,
    h1: Vec<Vec<T>>,
    h2: Vec<Vec<T>>,
    gates: [T; SKIP_GATES],
    skip_t: Matrix<T>,
    out: Chunk<T>,
}

fn randn_matrix<T: Scalar>(rng: &mut Stream, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let s = T::of(std);
    let data = rng::normal_vec::<T>(rng, rows * cols).into_iter().map(|v| v * s).collect();
    Matrix::from_rows(rows, cols, data).expect("sizes agree")
}

fn skip_gates<T: Scalar>(t: T) -> [T; SKIP_GATES] {
    let mut e = [T::one(); SKIP_GATES];
    e[1..].copy_from_slice(&time_embedding(t));
    e
}

fn tanh_layer<T: Scalar>(w: &Matrix<T>, b: &[T], x: &[T]) -> Vec<T> {
    (0..w.rows())
        .map(|i| (crate::linalg::dot(w.row(i), x) + b[i]).tanh())
        .collect()
}

impl<T: Scalar> VectorField<T> {
    pub fn new(shape: FieldShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut s = rng::stream(seed, "field", "init");
        let (d, h, w) = (shape.latent_dim, shape.hidden, shape.input_width());
        let w1 = randn_matrix(&mut s, h, w, 1.0 / (w as f64).sqrt());
        let w2 = randn_matrix(&mut s, h, h, 1.0 / (h as f64).sqrt());
        let w3 = randn_matrix(&mut s, d, h, 0.5 / (h as f64).sqrt());
        let adapter = PoseAdapter::random(d, shape.pose_dim, T::of(0.5 / (shape.pose_dim as f64).sqrt()), &mut s);
        Ok(Self {
            shape,
            mix: vec![T::one() / T::count(shape.context_len); shape.context_len],
            w1,
            b1: vec![T::zero(); h],
            w2,
            b2: vec![T::zero(); h],
            w3,
            b3: vec![T::zero(); d],
            skip: vec![Matrix::zeros(d, w); SKIP_GATES],
            adapter,
        })
    }

    /// All parameters zero: the field outputs zero everywhere.
    pub fn zeros(shape: FieldShape) -> Result<Self> {
        shape.validate()?;
        let mut f = Self::new(shape, 0)?;
        f.set_flat(&vec![T::zero(); shape.param_count()])?;
        Ok(f)
    }

    pub fn shape(&self) -> FieldShape {
        self.shape
    }

    pub fn adapter(&self) -> &PoseAdapter<T> {
        &self.adapter
    }

    pub fn mix_weights(&self) -> &[T] {
        &self.mix
    }

    /// Parameter vector θ.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.shape.param_count());
        v.extend_from_slice(&self.mix);
        v.extend_from_slice(self.w1.as_slice());
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(self.w2.as_slice());
        v.extend_from_slice(&self.b2);
        v.extend_from_slice(self.w3.as_slice());
        v.extend_from_slice(&self.b3);
        for m in &self.skip {
            v.extend_from_slice(m.as_slice());
        }
        v.extend_from_slice(self.adapter.weight.as_slice());
        v.extend_from_slice(&self.adapter.bias);
        v
    }

    pub fn set_flat(&mut self, theta: &[T]) -> Result<()> {
        check_dim("VectorField::set_flat", self.shape.param_count(), theta.len())?;
        let mut rest = theta;
        let mut take = |dst: &mut [T]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        take(&mut self.mix);
        take(self.w1.as_mut_slice());
        take(&mut self.b1);
        take(self.w2.as_mut_slice());
        take(&mut self.b2);
        take(self.w3.as_mut_slice());
        take(&mut self.b3);
        for m in &mut self.skip {
            take(m.as_mut_slice());
        }
        take(self.adapter.weight.as_mut_slice());
        take(&mut self.adapter.bias);
        Ok(())
    }

    fn check_input(&self, target: &Chunk<T>, context: &Chunk<T>) -> Result<()> {
        check_dim("VectorField: target length", self.shape.context_len, target.len())?;
        check_dim("VectorField: context length", self.shape.context_len, context.len())?;
        check_dim("VectorField: target dim", self.shape.latent_dim, target.dim())?;
        check_dim("VectorField: context dim", self.shape.latent_dim, context.dim())
    }

    fn forward(&self, target: &Chunk<T>, context: &Chunk<T>, t: T) -> Result<Trace<T>> {
        self.check_input(target, context)?;
        if !target.is_finite() || !context.is_finite() || !t.is_finite() {
            return Err(Error::Numeric {
                context: "VectorField: input",
                step: None,
                detail: "non-finite target, context or time".into(),
            });
        }
        let d = self.shape.latent_dim;
        let mut g = vec![T::zero(); d];
        for (a, c) in self.mix.iter().zip(context.frames()) {
            for (gi, ci) in g.iter_mut().zip(c) {
                *gi += *a * *ci;
            }
        }
        let temb = time_embedding(t);
        let gates = skip_gates(t);
        let mut skip_t = Matrix::zeros(d, self.shape.input_width());
        for (e, m) in gates.iter().zip(&self.skip) {
            for (a, b) in skip_t.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *a += *e * *b;
            }
        }
        let n = target.len();
        let mut trace = Trace {
            g,
            gates,
            skip_t,
            z: Vec::with_capacity(n),
            h1: Vec::with_capacity(n),
            h2: Vec::with_capacity(n),
            out: Chunk::zeros(n, d),
        };
        for i in 0..n {
            let mut z = Vec::with_capacity(self.shape.input_width());
            z.extend_from_slice(target.frame(i));
            z.extend_from_slice(context.frame(i));
            z.extend_from_slice(&trace.g);
            z.extend_from_slice(&temb);
            let h1 = tanh_layer(&self.w1, &self.b1, &z);
            let h2 = tanh_layer(&self.w2, &self.b2, &h1);
            let out = trace.out.frame_mut(i);
            for (k, o) in out.iter_mut().enumerate() {
                *o = crate::linalg::dot(self.w3.row(k), &h2) + self.b3[k] + crate::linalg::dot(trace.skip_t.row(k), &z);
            }
            trace.z.push(z);
            trace.h1.push(h1);
            trace.h2.push(h2);
        }
        Ok(trace)
    }

    /// Predicted velocity for an already pose-injected input.
    pub fn evaluate(&self, input: &ModelInput<T>) -> Result<Chunk<T>> {
        let out = self.forward(&input.target, &input.context, input.t)?.out;
        if !out.is_finite() {
            return Err(Error::Numeric {
                context: "VectorField::evaluate",
                step: None,
                detail: "non-finite output".into(),
            });
        }
        Ok(out)
    }

    /// Mean squared error over target positions and its gradient, for an
    /// already pose-injected input. Adapter gradients are zero on this path.
    pub fn loss_and_grad(&self, input: &ModelInput<T>, target_velocity: &Chunk<T>) -> Result<GradientRecord<T>> {
        let mut grad = vec![T::zero(); self.shape.param_count()];
        let loss = self.accumulate(&input.target, &input.context, input.t, None, target_velocity, T::one(), &mut grad)?;
        Ok(GradientRecord { loss, grad })
    }

    /// Loss and gradient for a raw example; the field injects pose itself.
    pub fn example_loss_and_grad(&self, ex: &FieldExample<T>) -> Result<GradientRecord<T>> {
        self.batch_loss_and_grad(std::slice::from_ref(ex))
    }

    /// Mean over examples, accumulated in order.
    pub fn batch_loss_and_grad(&self, batch: &[FieldExample<T>]) -> Result<GradientRecord<T>> {
        if batch.is_empty() {
            return Err(Error::Domain("empty batch".into()));
        }
        let mut grad = vec![T::zero(); self.shape.param_count()];
        let w = T::one() / T::count(batch.len());
        let mut loss = T::zero();
        for ex in batch {
            let injected = inject_pose(&ex.xt, &ex.poses, &self.adapter)?;
            loss += w * self.accumulate(&injected, &ex.context, ex.t, Some(&ex.poses), &ex.target, w, &mut grad)?;
        }
        Ok(GradientRecord { loss, grad })
    }

    /// Adds `weight * ∇θ L` into `grad` and returns `L` for one example.
    #[allow(clippy::too_many_arguments)]
    fn accumulate(
        &self,
        target: &Chunk<T>,
        context: &Chunk<T>,
        t: T,
        poses: Option<&Chunk<T>>,
        target_velocity: &Chunk<T>,
        weight: T,
        grad: &mut [T],
    ) -> Result<T> {
        let tr = self.forward(target, context, t)?;
        tr.out.check_shape(target_velocity, "loss_and_grad")?;
        let residual = tr.out.sub(target_velocity)?;
        let n_elems = T::count(residual.as_slice().len());
        let loss = residual.mean_square();
        if !loss.is_finite() {
            return Err(Error::Numeric {
                context: "loss_and_grad",
                step: None,
                detail: format!(
                    "non-finite loss; max |prediction| = {}, max |target| = {}",
                    tr.out.max_abs(),
                    target_velocity.max_abs()
                ),
            });
        }

        let (d, h, w) = (self.shape.latent_dim, self.shape.hidden, self.shape.input_width());
        let tz = self.shape.context_len;
        let o_mix = 0;
        let o_w1 = o_mix + tz;
        let o_b1 = o_w1 + h * w;
        let o_w2 = o_b1 + h;
        let o_b2 = o_w2 + h * h;
        let o_w3 = o_b2 + h;
        let o_b3 = o_w3 + d * h;
        let o_skip = o_b3 + d;
        let o_pw = o_skip + SKIP_GATES * d * w;
        let o_pb = o_pw + d * self.shape.pose_dim;

        let scale = weight * T::of(2.0) / n_elems;
        let mut dg = vec![T::zero(); d];
        let mut dh2 = vec![T::zero(); h];
        let mut da2 = vec![T::zero(); h];
        let mut dh1 = vec![T::zero(); h];
        let mut da1 = vec![T::zero(); h];
        let mut d_skip = vec![T::zero(); d * w];
        for i in 0..residual.len() {
            let dout: Vec<T> = residual.frame(i).iter().map(|r| *r * scale).collect();
            let (z, h1, h2) = (&tr.z[i], &tr.h1[i], &tr.h2[i]);

            dh2.iter_mut().for_each(|v| *v = T::zero());
            for (k, dk) in dout.iter().enumerate() {
                let row = self.w3.row(k);
                let g_row = &mut grad[o_w3 + k * h..o_w3 + (k + 1) * h];
                for j in 0..h {
                    g_row[j] += *dk * h2[j];
                    dh2[j] += *dk * row[j];
                }
                grad[o_b3 + k] += *dk;
            }
            for j in 0..h {
                da2[j] = dh2[j] * (T::one() - h2[j] * h2[j]);
            }
            dh1.iter_mut().for_each(|v| *v = T::zero());
            for (j, dj) in da2.iter().enumerate() {
                let row = self.w2.row(j);
                let g_row = &mut grad[o_w2 + j * h..o_w2 + (j + 1) * h];
                for k in 0..h {
                    g_row[k] += *dj * h1[k];
                    dh1[k] += *dj * row[k];
                }
                grad[o_b2 + j] += *dj;
            }
            for j in 0..h {
                da1[j] = dh1[j] * (T::one() - h1[j] * h1[j]);
            }
            let mut dz = vec![T::zero(); w];
            for (j, dj) in da1.iter().enumerate() {
                let row = self.w1.row(j);
                let g_row = &mut grad[o_w1 + j * w..o_w1 + (j + 1) * w];
                for k in 0..w {
                    g_row[k] += *dj * z[k];
                    dz[k] += *dj * row[k];
                }
                grad[o_b1 + j] += *dj;
            }
            for (k, dk) in dout.iter().enumerate() {
                let row = tr.skip_t.row(k);
                let d_row = &mut d_skip[k * w..(k + 1) * w];
                for j in 0..w {
                    d_row[j] += *dk * z[j];
                    dz[j] += *dk * row[j];
                }
            }
            for k in 0..d {
                dg[k] += dz[2 * d + k];
            }
            if let Some(p) = poses {
                let pose = p.frame(i);
                let pd = self.shape.pose_dim;
                for k in 0..d {
                    let dx = dz[k];
                    for (q, pq) in pose.iter().enumerate() {
                        grad[o_pw + k * pd + q] += dx * *pq;
                    }
                    grad[o_pb + k] += dx;
                }
            }
        }
        for (j, c) in context.frames().enumerate() {
            grad[o_mix + j] += crate::linalg::dot(&dg, c);
        }
        for (j, e) in tr.gates.iter().enumerate() {
            let block = &mut grad[o_skip + j * d * w..o_skip + (j + 1) * d * w];
            for (g, ds) in block.iter_mut().zip(&d_skip) {
                *g += *e * *ds;
            }
        }
        Ok(loss)
    }

    pub fn to_checkpoint(&self, meta: CheckpointMeta) -> Checkpoint {
        Checkpoint {
            shape: self.shape,
            meta,
            params: self.to_flat().into_iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let mut f = Self::new(ck.shape, 0)?;
        let theta: Vec<T> = ck.params.iter().map(|v| T::of(*v)).collect();
        f.set_flat(&theta)?;
        Ok(f)
    }
}

impl<T: Scalar> VelocityField<T> for VectorField<T> {
    fn pose_adapter(&self) -> &PoseAdapter<T> {
        &self.adapter
    }

    fn velocity(&self, input: &ModelInput<T>, _poses: &Chunk<T>) -> Result<Chunk<T>> {
        self.evaluate(input)
    }
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    m: Vec<T>,
    v: Vec<T>,
    steps: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_count: usize, lr: T) -> Self {
        Self {
            lr,
            beta1: T::of(0.9),
            beta2: T::of(0.999),
            eps: T::of(1e-8),
            m: vec![T::zero(); param_count],
            v: vec![T::zero(); param_count],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }
}

/// Largest relative gap between the analytic gradient and central differences
/// with step `h`, over the listed parameter indices. Pairs where both values
/// are below `floor` in magnitude count as agreeing.
pub fn gradient_check<T: Scalar>(
    field: &VectorField<T>,
    batch: &[FieldExample<T>],
    coords: &[usize],
    h: T,
    floor: T,
) -> Result<T> {
    let rec = field.batch_loss_and_grad(batch)?;
    let theta = field.to_flat();
    let mut probe = field.clone();
    let mut worst = T::zero();
    for &i in coords {
        if i >= theta.len() {
            return Err(Error::Dimension {
                context: "gradient_check: coordinate",
                expected: theta.len(),
                found: i,
            });
        }
        let mut th = theta.clone();
        th[i] = theta[i] + h;
        probe.set_flat(&th)?;
        let lp = probe.batch_loss_and_grad(batch)?.loss;
        th[i] = theta[i] - h;
        probe.set_flat(&th)?;
        let lm = probe.batch_loss_and_grad(batch)?.loss;
        let fd = (lp - lm) / (h + h);
        let scale = fd.abs().max(rec.grad[i].abs());
        if scale > floor {
            worst = worst.max((fd - rec.grad[i]).abs() / scale);
        }
    }
    Ok(worst)
}

/// One Adam update. The field is left untouched if the update is not finite.
pub fn step<T: Scalar>(field: &mut VectorField<T>, grad: &GradientRecord<T>, state: &mut AdamState<T>) -> Result<()> {
    let mut theta = field.to_flat();
    check_dim("step: gradient", theta.len(), grad.grad.len())?;
    check_dim("step: optimizer state", theta.len(), state.m.len())?;
    if let Some(i) = grad.grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            context: "step",
            step: Some(state.steps as usize),
            detail: format!("non-finite gradient at parameter {i}"),
        });
    }
    let t = state.steps + 1;
    let bc1 = T::one() - state.beta1.powi(t as i32);
    let bc2 = T::one() - state.beta2.powi(t as i32);
    let mut m = state.m.clone();
    let mut v = state.v.clone();
    for i in 0..theta.len() {
        let g = grad.grad[i];
        m[i] = state.beta1 * m[i] + (T::one() - state.beta1) * g;
        v[i] = state.beta2 * v[i] + (T::one() - state.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    if let Some(i) = theta.iter().position(|p| !p.is_finite()) {
        return Err(Error::Numeric {
            context: "step",
            step: Some(state.steps as usize),
            detail: format!("non-finite parameter {i} after update"),
        });
    }
    field.set_flat(&theta)?;
    state.m = m;
    state.v = v;
    state.steps = t;
    Ok(())
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub iterations: u64,
    pub config_hash: String,
}

/// Flat parameter dump with a versioned header.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: FieldShape,
    pub meta: CheckpointMeta,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.shape;
        let _ = writeln!(out, "# driftlab checkpoint");
        let _ = writeln!(out, "format {CHECKPOINT_FORMAT}");
        let _ = writeln!(
            out,
            "shape latent_dim={} pose_dim={} context_len={} hidden={} params={}",
            s.latent_dim,
            s.pose_dim,
            s.context_len,
            s.hidden,
            self.params.len()
        );
        let _ = writeln!(
            out,
            "meta seed={} iterations={} config_hash={}",
            self.meta.seed, self.meta.iterations, self.meta.config_hash
        );
        for p in &self.params {
            let _ = writeln!(out, "{p:?}");
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::Parse(format!("checkpoint truncated before {what}")))
        };
        let format_line = next("format")?;
        let version: u32 = format_line
            .strip_prefix("format ")
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("bad format line '{format_line}'")))?;
        if version != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "checkpoint format {version} unsupported (expected {CHECKPOINT_FORMAT})"
            )));
        }
        let shape_kv = key_values(next("shape")?, "shape")?;
        let meta_kv = key_values(next("meta")?, "meta")?;
        let get = |kv: &[(String, String)], k: &str| -> Result<String> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.clone())
                .ok_or_else(|| Error::Parse(format!("checkpoint header missing '{k}'")))
        };
        let num = |kv: &[(String, String)], k: &str| -> Result<u64> {
            get(kv, k)?
                .parse()
                .map_err(|_| Error::Parse(format!("checkpoint field '{k}' is not an integer")))
        };
        let shape = FieldShape {
            latent_dim: num(&shape_kv, "latent_dim")? as usize,
            pose_dim: num(&shape_kv, "pose_dim")? as usize,
            context_len: num(&shape_kv, "context_len")? as usize,
            hidden: num(&shape_kv, "hidden")? as usize,
        };
        let count = num(&shape_kv, "params")? as usize;
        if count != shape.param_count() {
            return Err(Error::Config(format!(
                "checkpoint declares {count} parameters but its shape needs {}",
                shape.param_count()
            )));
        }
        let meta = CheckpointMeta {
            seed: num(&meta_kv, "seed")?,
            iterations: num(&meta_kv, "iterations")?,
            config_hash: get(&meta_kv, "config_hash")?,
        };
        let params = lines
            .map(|l| {
                l.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Parse(format!("bad parameter value '{l}'")))
            })
            .collect::<Result<Vec<_>>>()?;
        check_dim("checkpoint parameters", count, params.len())?;
        Ok(Self { shape, meta, params })
    }
}

fn key_values(line: &str, tag: &str) -> Result<Vec<(String, String)>> {
    let rest = line
        .strip_prefix(tag)
        .ok_or_else(|| Error::Parse(format!("expected '{tag}' line, found '{line}'")))?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::Parse(format!("bad header entry '{kv}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::assemble_context;
    use crate::tensor::Frame;

    fn small_shape() -> FieldShape {
        FieldShape {
            latent_dim: 3,
            pose_dim: 2,
            context_len: 4,
            hidden: 5,
        }
    }

    fn example(seed: u64, shape: FieldShape) -> FieldExample<f64> {
        let mut s = rng::stream(seed, "test", "example");
        let n = shape.context_len;
        FieldExample {
            xt: rng::normal_chunk(&mut s, n, shape.latent_dim),
            poses: rng::normal_chunk(&mut s, n, shape.pose_dim),
            context: rng::normal_chunk(&mut s, n, shape.latent_dim),
            t: 0.37,
            target: rng::normal_chunk(&mut s, n, shape.latent_dim),
        }
    }

    fn input_of(field: &VectorField<f64>, ex: &FieldExample<f64>) -> ModelInput<f64> {
        ModelInput {
            target: inject_pose(&ex.xt, &ex.poses, field.adapter()).unwrap(),
            context: ex.context.clone(),
            t: ex.t,
        }
    }

    #[test]
    fn zero_field_outputs_zero() {
        let shape = small_shape();
        let f = VectorField::<f64>::zeros(shape).unwrap();
        let ex = example(1, shape);
        assert_eq!(f.evaluate(&input_of(&f, &ex)).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn evaluation_is_deterministic_and_sensitive() {
        let shape = small_shape();
        let f = VectorField::<f64>::new(shape, 3).unwrap();
        let ex = example(2, shape);
        let input = input_of(&f, &ex);
        let a = f.evaluate(&input).unwrap();
        assert_eq!(a, f.evaluate(&input).unwrap());
        assert!(a.same_shape(&ex.target));
        let mut bumped = input.clone();
        bumped.target.as_mut_slice()[1] += 1e-3;
        let b = f.evaluate(&bumped).unwrap();
        let fd = b.sub(&a).unwrap().max_abs() / 1e-3;
        assert!(fd > 1e-6, "output insensitive to its input: {fd}");
    }

    #[test]
    fn loss_vanishes_at_the_prediction() {
        let shape = small_shape();
        let f = VectorField::<f64>::new(shape, 4).unwrap();
        let ex = example(3, shape);
        let input = input_of(&f, &ex);
        let pred = f.evaluate(&input).unwrap();
        let rec = f.loss_and_grad(&input, &pred).unwrap();
        assert_eq!(rec.loss, 0.0);
        assert!(rec.grad.iter().all(|g| *g == 0.0));

        let shifted = pred.map(|v| v + 0.5);
        let doubled = pred.map(|v| v + 1.0);
        let l1 = f.loss_and_grad(&input, &shifted).unwrap().loss;
        let l2 = f.loss_and_grad(&input, &doubled).unwrap().loss;
        assert!((l2 - 4.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let shape = small_shape();
        let mut f = VectorField::<f64>::new(shape, 5).unwrap();
        // move every block (the skip path starts at zero) off its initial value
        let mut s = rng::stream(5, "test", "theta");
        let theta: Vec<f64> = f.to_flat().iter().map(|v| v + 0.1 * rng::normal::<f64>(&mut s)).collect();
        f.set_flat(&theta).unwrap();
        let batch = vec![example(4, shape), example(5, shape)];
        let rec = f.batch_loss_and_grad(&batch).unwrap();
        let theta = f.to_flat();
        let h = 1e-5;
        for i in 0..theta.len() {
            let mut p = f.clone();
            let mut th = theta.clone();
            th[i] += h;
            p.set_flat(&th).unwrap();
            let lp = p.batch_loss_and_grad(&batch).unwrap().loss;
            th[i] -= 2.0 * h;
            p.set_flat(&th).unwrap();
            let lm = p.batch_loss_and_grad(&batch).unwrap().loss;
            let fd = (lp - lm) / (2.0 * h);
            let err = (fd - rec.grad[i]).abs() / fd.abs().max(rec.grad[i].abs()).max(1e-8);
            assert!(err < 1e-4, "parameter {i}: analytic {} vs fd {fd}", rec.grad[i]);
        }
    }

    #[test]
    fn non_finite_input_is_reported() {
        let shape = small_shape();
        let f = VectorField::<f64>::new(shape, 6).unwrap();
        let ex = example(6, shape);
        let mut input = input_of(&f, &ex);
        input.target.as_mut_slice()[0] = f64::INFINITY;
        let err = f.loss_and_grad(&input, &ex.target).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn adam_edge_cases() {
        let shape = small_shape();
        let mut f = VectorField::<f64>::new(shape, 7).unwrap();
        let before = f.clone();
        let zero = GradientRecord { loss: 0.0, grad: vec![0.0; shape.param_count()] };
        let mut state = AdamState::new(shape.param_count(), 1e-2);
        step(&mut f, &zero, &mut state).unwrap();
        assert_eq!(f, before);

        let rec = f.example_loss_and_grad(&example(7, shape)).unwrap();
        let mut frozen = AdamState::new(shape.param_count(), 0.0);
        step(&mut f, &rec, &mut frozen).unwrap();
        assert_eq!(f, before);

        let mut bad = rec.clone();
        bad.grad[0] = f64::NAN;
        assert!(step(&mut f, &bad, &mut state).is_err());
        assert_eq!(f, before);
    }

    #[test]
    fn adam_decreases_loss_on_a_frozen_batch() {
        let shape = small_shape();
        let mut f = VectorField::<f64>::new(shape, 8).unwrap();
        let batch: Vec<_> = (0..4).map(|s| example(20 + s, shape)).collect();
        let mut state = AdamState::new(shape.param_count(), 1e-3);
        let mut losses = vec![];
        for _ in 0..10 {
            let rec = f.batch_loss_and_grad(&batch).unwrap();
            losses.push(rec.loss);
            step(&mut f, &rec, &mut state).unwrap();
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn adam_fits_a_linear_target() {
        let shape = FieldShape { latent_dim: 4, pose_dim: 2, context_len: 3, hidden: 16 };
        let mut f = VectorField::<f64>::new(shape, 9).unwrap();
        let mut s = rng::stream(10, "test", "linear");
        let map = rng::normal_vec::<f64>(&mut s, 16);
        let batch: Vec<FieldExample<f64>> = (0..8)
            .map(|_| {
                let xt = rng::normal_chunk::<f64>(&mut s, 3, 4);
                let mut target = Chunk::zeros(3, 4);
                for i in 0..3 {
                    for r in 0..4 {
                        target.frame_mut(i)[r] =
                            0.3 * crate::linalg::dot(&map[r * 4..(r + 1) * 4], xt.frame(i));
                    }
                }
                FieldExample {
                    xt,
                    poses: Chunk::zeros(3, 2),
                    context: rng::normal_chunk(&mut s, 3, 4),
                    t: 0.5,
                    target,
                }
            })
            .collect();
        let mut state = AdamState::new(shape.param_count(), 1e-2);
        let first = f.batch_loss_and_grad(&batch).unwrap().loss;
        for _ in 0..200 {
            let rec = f.batch_loss_and_grad(&batch).unwrap();
            step(&mut f, &rec, &mut state).unwrap();
        }
        let last = f.batch_loss_and_grad(&batch).unwrap().loss;
        assert!(last <= 0.1 * first, "loss {first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let shape = small_shape();
        let f = VectorField::<f64>::new(shape, 11).unwrap();
        let meta = CheckpointMeta { seed: 11, iterations: 3, config_hash: "abc".into() };
        let text = f.to_checkpoint(meta.clone()).to_text();
        let ck = Checkpoint::from_text(&text).unwrap();
        assert_eq!(ck.meta, meta);
        assert_eq!(VectorField::<f64>::from_checkpoint(&ck).unwrap(), f);

        let wrong = text.replacen("format 1", "format 9", 1);
        assert!(matches!(Checkpoint::from_text(&wrong), Err(Error::Config(_))));
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        assert!(Checkpoint::from_text(&truncated).is_err());
    }

    #[test]
    fn works_with_assembled_context() {
        let shape = small_shape();
        let f = VectorField::<f32>::new(shape, 12).unwrap();
        let ctx = assemble_context(vec![Frame::zeros(3)], vec![Frame::new(vec![1.0f32, 2.0, 3.0]).unwrap()], 4).unwrap();
        let input = crate::memory::concat_channels(Chunk::zeros(4, 3), &ctx, 0.5f32).unwrap();
        let out = f.evaluate(&input).unwrap();
        assert_eq!((out.len(), out.dim()), (4, 3));
    }
}

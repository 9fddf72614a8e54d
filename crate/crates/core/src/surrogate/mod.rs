//! Surrogate architectures (linear, CNN U-Net, CNN-LSTM) and the
//! physics-guided loss.
//!
//! Every model maps normalized force frames `[B, 3, X, Y, Z]` (CNN-LSTM:
//! `N_t` frames stacked frame-major as `[N_t * B, 3, X, Y, Z]`) to the
//! displacement of the latest frame in millimetres. Denormalization and the
//! zero-displacement mask are part of the graph, so losses are computed in
//! physical units.

pub mod loss;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use viscosurr_tensorad::{
    conv3d_param_count, lstm_layer, lstm_param_count, pooled_extent, Eager, LstmWeights, NodeIndex, Ops,
    Padding, Rounding, Tensor,
};

use crate::error::{CoreError, Result};
use crate::meshkit::{Field3, GridMesh};

pub use loss::{physics_loss, LossConfig, LossTerms};

/// Parameter total of the reference CNN-LSTM (N_N = 512) as published.
pub const REFERENCE_CNN_LSTM_PARAMS: usize = 11_568_931;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Linear,
    CnnUnet,
    CnnLstm,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Linear => "linear",
            ModelKind::CnnUnet => "cnn-unet",
            ModelKind::CnnLstm => "cnn-lstm",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolRounding {
    Floor,
    #[default]
    Ceil,
}

impl From<PoolRounding> for Rounding {
    fn from(r: PoolRounding) -> Self {
        match r {
            PoolRounding::Floor => Rounding::Floor,
            PoolRounding::Ceil => Rounding::Ceil,
        }
    }
}

/// Architecture hyper-parameters; parameter shapes are a pure function of
/// this and the mesh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    /// Node grid `(N_x, N_y, N_z)`.
    pub dims: [usize; 3],
    /// LSTM hidden size `N_N` (CNN-LSTM only).
    pub hidden: usize,
    /// Frames per input window `N_t` (1 for single-frame models).
    pub steps: usize,
    /// Base convolution filter count.
    pub filters: usize,
    /// Max-pool window (= stride).
    pub pool: usize,
    pub pool_rounding: PoolRounding,
    /// Nearest-neighbour upsampling factors of the decoder.
    pub upsample: [usize; 3],
    pub bidirectional: bool,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelSpec {
    /// Conv(32) → pool(3) → Bi-LSTM(N_N) → upsample(4, 4, 3) → conv(32) → merge → conv(3).
    pub fn cnn_lstm(dims: [usize; 3], hidden: usize, steps: usize) -> Self {
        ModelSpec {
            kind: ModelKind::CnnLstm,
            dims,
            hidden,
            steps,
            filters: 32,
            pool: 3,
            pool_rounding: PoolRounding::Ceil,
            upsample: [4, 4, 3],
            bidirectional: true,
            init_seed: 0,
        }
    }

    /// Two-level U-Net with `filters` base channels (64 in the reference design).
    pub fn cnn_unet(dims: [usize; 3], filters: usize) -> Self {
        ModelSpec {
            kind: ModelKind::CnnUnet,
            dims,
            hidden: 0,
            steps: 1,
            filters,
            pool: 2,
            pool_rounding: PoolRounding::Ceil,
            upsample: [2, 2, 2],
            bidirectional: false,
            init_seed: 0,
        }
    }

    pub fn linear(dims: [usize; 3]) -> Self {
        ModelSpec {
            kind: ModelKind::Linear,
            dims,
            hidden: 0,
            steps: 1,
            filters: 0,
            pool: 1,
            pool_rounding: PoolRounding::Ceil,
            upsample: [1, 1, 1],
            bidirectional: false,
            init_seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.init_seed = seed;
        self
    }

    /// Frames consumed per prediction.
    pub fn window(&self) -> usize {
        match self.kind {
            ModelKind::CnnLstm => self.steps,
            _ => 1,
        }
    }

    /// Spatial extent after the encoder's pooling.
    pub fn pooled_dims(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (o, &d) in out.iter_mut().zip(&self.dims) {
            *o = pooled_extent(d, self.pool, self.pool, self.pool_rounding.into()).ok_or_else(|| {
                CoreError::Config(format!(
                    "grid {:?} too small for {}-wide {:?} pooling",
                    self.dims, self.pool, self.pool_rounding
                ))
            })?;
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 2) {
            return Err(CoreError::Config(format!("model dims {:?} must be at least 2 per axis", self.dims)));
        }
        match self.kind {
            ModelKind::Linear => {}
            ModelKind::CnnUnet | ModelKind::CnnLstm => {
                if self.filters == 0 || self.pool == 0 || self.upsample.contains(&0) {
                    return Err(CoreError::Config("filters, pool and upsample factors must be positive".into()));
                }
                self.pooled_dims()?;
            }
        }
        if self.kind == ModelKind::CnnLstm && (self.hidden == 0 || self.steps == 0) {
            return Err(CoreError::Config(format!(
                "CNN-LSTM needs N_N >= 1 and N_t >= 1, got {} and {}",
                self.hidden, self.steps
            )));
        }
        Ok(())
    }

    /// Named parameter shapes in graph order.
    pub fn parameter_shapes(&self, active_nodes: usize) -> Result<Vec<(String, Vec<usize>)>> {
        self.validate()?;
        let f = self.filters;
        let conv = |name: &str, c_out: usize, c_in: usize, k: usize| {
            vec![(format!("{name}.w"), vec![c_out, c_in, k, k, k]), (format!("{name}.b"), vec![c_out])]
        };
        let mut shapes = Vec::new();
        match self.kind {
            ModelKind::Linear => {
                let n = 3 * active_nodes;
                shapes.push(("linear.w".to_string(), vec![n, n]));
                shapes.push(("linear.b".to_string(), vec![n]));
            }
            ModelKind::CnnUnet => {
                shapes.extend(conv("enc1", f, 3, 3));
                shapes.extend(conv("enc2", f, f, 3));
                shapes.extend(conv("mid1", 2 * f, f, 3));
                shapes.extend(conv("mid2", 2 * f, 2 * f, 3));
                shapes.extend(conv("dec1", f, 2 * f, 3));
                shapes.extend(conv("dec2", f, f, 3));
                shapes.extend(conv("dec3", f, 2 * f, 3));
                shapes.extend(conv("out", 3, f, 1));
            }
            ModelKind::CnnLstm => {
                let cells: usize = self.pooled_dims()?.iter().product();
                let d = f * cells;
                let h = self.hidden;
                shapes.extend(conv("enc", f, 3, 3));
                let dirs: &[&str] = if self.bidirectional { &["fwd", "bwd"] } else { &["fwd"] };
                for dir in dirs {
                    shapes.push((format!("lstm.{dir}.w_ih"), vec![d, 4 * h]));
                    shapes.push((format!("lstm.{dir}.w_hh"), vec![h, 4 * h]));
                    shapes.push((format!("lstm.{dir}.b"), vec![4 * h]));
                }
                let summary = dirs.len() * h;
                shapes.push(("proj.w".to_string(), vec![summary, d]));
                shapes.push(("proj.b".to_string(), vec![d]));
                shapes.extend(conv("dec", f, f, 3));
                shapes.extend(conv("out", 3, 2 * f, 1));
            }
        }
        Ok(shapes)
    }
}

/// One row of a parameter-count report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCount {
    pub layer: String,
    pub params: usize,
}

/// Per-layer trainable parameter counts of a CNN-LSTM spec, plus the total.
pub fn parameter_report(spec: &ModelSpec, active_nodes: usize) -> Result<(Vec<LayerCount>, usize)> {
    let shapes = spec.parameter_shapes(active_nodes)?;
    let mut layers: Vec<LayerCount> = Vec::new();
    for (name, shape) in &shapes {
        let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l);
        let layer = layer.split('.').next().unwrap_or(layer).to_string();
        let n: usize = shape.iter().product();
        match layers.last_mut() {
            Some(last) if last.layer == layer => last.params += n,
            _ => layers.push(LayerCount { layer, params: n }),
        }
    }
    let total = layers.iter().map(|l| l.params).sum();
    Ok((layers, total))
}

/// Checks the closed-form per-layer counts against the realized shapes.
pub fn closed_form_count(spec: &ModelSpec, active_nodes: usize) -> Result<usize> {
    let f = spec.filters;
    Ok(match spec.kind {
        ModelKind::Linear => {
            let n = 3 * active_nodes;
            n * n + n
        }
        ModelKind::CnnUnet => {
            conv3d_param_count(3, f, 3)
                + conv3d_param_count(f, f, 3)
                + conv3d_param_count(f, 2 * f, 3)
                + conv3d_param_count(2 * f, 2 * f, 3)
                + conv3d_param_count(2 * f, f, 3)
                + conv3d_param_count(f, f, 3)
                + conv3d_param_count(2 * f, f, 3)
                + conv3d_param_count(f, 3, 1)
        }
        ModelKind::CnnLstm => {
            let d = f * spec.pooled_dims()?.iter().product::<usize>();
            let dirs = if spec.bidirectional { 2 } else { 1 };
            conv3d_param_count(3, f, 3)
                + dirs * lstm_param_count(d, spec.hidden)
                + (dirs * spec.hidden + 1) * d
                + conv3d_param_count(f, f, 3)
                + conv3d_param_count(2 * f, 3, 1)
        }
    })
}

/// Per-component statistics of the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// Forces are divided by their per-component RMS (no shift, so a
    /// force-free node stays exactly zero).
    pub force_scale: [f32; 3],
    pub disp_mean: [f32; 3],
    pub disp_std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Normalization { force_scale: [1.0; 3], disp_mean: [0.0; 3], disp_std: [1.0; 3] }
    }
}

impl Normalization {
    /// Statistics over the given nodes of every `(force, displacement)` pair.
    /// The force scale is the per-component RMS over loaded nodes only, so
    /// contact forces map to order one regardless of how sparse they are.
    pub fn fit<'a>(pairs: impl IntoIterator<Item = (&'a Field3, &'a Field3)>, nodes: &[usize]) -> Self {
        let mut f_sq = [0.0f64; 3];
        let mut loaded = 0usize;
        let mut u_sum = [0.0f64; 3];
        let mut u_sq = [0.0f64; 3];
        let mut count = 0usize;
        for (f, u) in pairs {
            for &n in nodes {
                let (fv, uv) = (f.get(n), u.get(n));
                if fv != [0.0; 3] {
                    loaded += 1;
                    for c in 0..3 {
                        f_sq[c] += fv[c] * fv[c];
                    }
                }
                for c in 0..3 {
                    u_sum[c] += uv[c];
                    u_sq[c] += uv[c] * uv[c];
                }
            }
            count += nodes.len();
        }
        let mut out = Normalization::default();
        for c in 0..3 {
            if loaded > 0 {
                let rms = (f_sq[c] / loaded as f64).sqrt();
                if rms > 0.0 {
                    out.force_scale[c] = rms as f32;
                }
            }
            if count > 0 {
                let n = count as f64;
                let mean = u_sum[c] / n;
                let std = (u_sq[c] / n - mean * mean).max(0.0).sqrt();
                out.disp_mean[c] = mean as f32;
                if std > 0.0 {
                    out.disp_std[c] = std as f32;
                }
            }
        }
        out
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor<f32>>,
}

/// A concrete surrogate: spec, parameters, normalization and mesh maps.
#[derive(Debug, Clone)]
pub struct ModelInstance {
    pub spec: ModelSpec,
    pub params: Vec<Param>,
    pub norm: Normalization,
    mesh: Arc<GridMesh>,
    active: Arc<NodeIndex>,
    free: Arc<NodeIndex>,
}

/// Uniform fan-in initialization: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
fn init_param(name: &str, shape: &[usize], rng: &mut ChaCha8Rng, hidden: usize) -> Tensor<f32> {
    let n: usize = shape.iter().product();
    if name.starts_with("linear.") {
        return Tensor::zeros(shape);
    }
    if name.ends_with(".b") && name.starts_with("lstm.") {
        // Forget-gate bias 1, other gates 0 (gate order i, f, g, o).
        return Tensor::from_fn(shape, |i| if (hidden..2 * hidden).contains(&i) { 1.0 } else { 0.0 });
    }
    let fan_in = match shape.len() {
        5 => shape[1] * shape[2] * shape[3] * shape[4],
        2 => shape[0],
        _ => 0,
    };
    if fan_in == 0 {
        // Conv/projection biases: bounded by the matching weight's fan-in
        // is customary, but zero keeps the initial output centred.
        return Tensor::zeros(shape);
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as f32).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

impl ModelInstance {
    /// Builds a freshly initialized model for `mesh`.
    pub fn build(spec: ModelSpec, mesh: &GridMesh) -> Result<Self> {
        if spec.dims != mesh.dims() {
            return Err(CoreError::Config(format!("model dims {:?} vs mesh dims {:?}", spec.dims, mesh.dims())));
        }
        let active = mesh.active_nodes();
        let shapes = spec.parameter_shapes(active.len())?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.init_seed);
        let params = shapes
            .iter()
            .map(|(name, shape)| Param {
                name: name.clone(),
                value: Arc::new(init_param(name, shape, &mut rng, spec.hidden)),
            })
            .collect();
        Ok(ModelInstance {
            params,
            norm: Normalization::default(),
            active: Arc::new(NodeIndex { dims: spec.dims, nodes: active }),
            free: Arc::new(NodeIndex { dims: spec.dims, nodes: mesh.free_nodes() }),
            mesh: Arc::new(mesh.clone()),
            spec,
        })
    }

    /// Rebuilds a model from stored parameters (shapes are validated).
    pub fn from_parts(spec: ModelSpec, mesh: &GridMesh, params: Vec<Param>, norm: Normalization) -> Result<Self> {
        let mut m = ModelInstance::build(spec, mesh)?;
        if params.len() != m.params.len() {
            return Err(CoreError::Schema {
                expected: format!("{} parameter tensors", m.params.len()),
                found: format!("{}", params.len()),
            });
        }
        for (have, want) in params.iter().zip(&m.params) {
            if have.name != want.name || have.value.shape() != want.value.shape() {
                return Err(CoreError::Schema {
                    expected: format!("{} {:?}", want.name, want.value.shape()),
                    found: format!("{} {:?}", have.name, have.value.shape()),
                });
            }
        }
        m.params = params;
        m.norm = norm;
        Ok(m)
    }

    pub fn mesh(&self) -> &GridMesh {
        &self.mesh
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Replaces one parameter tensor (same shape required).
    pub fn set_param(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let p = self
            .params
            .iter_mut()
            .find(|p| p.name == name)
            .ok_or_else(|| CoreError::contract("set_param", format!("no parameter named {name}")))?;
        if p.value.shape() != value.shape() {
            return Err(CoreError::contract(
                "set_param",
                format!("{name}: shape {:?} vs {:?}", value.shape(), p.value.shape()),
            ));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Normalized network input for a batch of windows. `windows[b]` holds
    /// `window()` force fields, oldest first. Layout is frame-major
    /// `[T * B, 3, X, Y, Z]`.
    pub fn encode_inputs(&self, windows: &[&[&Field3]]) -> Result<Tensor<f32>> {
        let t = self.spec.window();
        let b = windows.len();
        let [x, y, z] = self.spec.dims;
        let vox = x * y * z;
        let mut data = vec![0.0f32; t * b * 3 * vox];
        for (bi, w) in windows.iter().enumerate() {
            if w.len() != t {
                return Err(CoreError::contract(
                    "forward_window",
                    format!("expected {t} force frames, got {}", w.len()),
                ));
            }
            for (ti, f) in w.iter().enumerate() {
                if f.dims() != self.spec.dims {
                    return Err(CoreError::contract(
                        "forward_window",
                        format!("force dims {:?} vs model dims {:?}", f.dims(), self.spec.dims),
                    ));
                }
                let slot = &mut data[(ti * b + bi) * 3 * vox..(ti * b + bi + 1) * 3 * vox];
                f.write_channels_first(slot);
                for c in 0..3 {
                    let s = self.norm.force_scale[c];
                    for v in &mut slot[c * vox..(c + 1) * vox] {
                        *v /= s;
                    }
                }
            }
        }
        Ok(Tensor::new(&[t * b, 3, x, y, z], data)?)
    }

    /// Runs the network on an encoded input. `params` must follow `self.params` order.
    pub fn forward<O: Ops<f32>>(&self, ops: &O, params: &[O::V], input: &O::V, batch: usize) -> Result<O::V> {
        let p = |name: &str| -> Result<&O::V> {
            let i = self
                .params
                .iter()
                .position(|q| q.name == name)
                .ok_or_else(|| CoreError::contract("forward", format!("missing parameter {name}")))?;
            Ok(&params[i])
        };
        let conv = |x: &O::V, name: &str, padding: Padding| -> Result<O::V> {
            Ok(ops.conv3d(x, p(&format!("{name}.w"))?, p(&format!("{name}.b"))?, 1, padding)?)
        };
        let dims = self.spec.dims;
        let raw = match self.spec.kind {
            ModelKind::Linear => {
                let flat = ops.gather_nodes(input, &self.active)?;
                let y = ops.add_bias(&ops.matmul(&flat, p("linear.w")?)?, p("linear.b")?)?;
                ops.scatter_nodes(&y, &self.active)?
            }
            ModelKind::CnnUnet => {
                let pool = self.spec.pool;
                let e1 = ops.relu(&conv(input, "enc1", Padding::Same)?);
                let skip = ops.relu(&conv(&e1, "enc2", Padding::Same)?);
                let down = ops.maxpool3d(&skip, [pool; 3], [pool; 3], self.spec.pool_rounding.into())?;
                let m1 = ops.relu(&conv(&down, "mid1", Padding::Same)?);
                let m2 = ops.relu(&conv(&m1, "mid2", Padding::Same)?);
                let up = ops.crop_or_pad3d(&ops.upsample3d(&m2, self.spec.upsample)?, dims)?;
                let d1 = ops.relu(&conv(&up, "dec1", Padding::Same)?);
                let d2 = ops.relu(&conv(&d1, "dec2", Padding::Same)?);
                let merged = ops.concat(&[d2, skip], 1)?;
                let d3 = ops.relu(&conv(&merged, "dec3", Padding::Same)?);
                conv(&d3, "out", Padding::Same)?
            }
            ModelKind::CnnLstm => {
                let (t, h, f) = (self.spec.steps, self.spec.hidden, self.spec.filters);
                let pooled = self.spec.pooled_dims()?;
                let cells: usize = pooled.iter().product();
                let pool = self.spec.pool;
                let enc = ops.relu(&conv(input, "enc", Padding::Same)?);
                let down = ops.maxpool3d(&enc, [pool; 3], [pool; 3], self.spec.pool_rounding.into())?;
                let seq = ops.reshape(&down, &[t * batch, f * cells])?;
                let weights = |dir: &str| -> Result<LstmWeights<O::V>> {
                    Ok(LstmWeights {
                        w_ih: p(&format!("lstm.{dir}.w_ih"))?.clone(),
                        w_hh: p(&format!("lstm.{dir}.w_hh"))?.clone(),
                        bias: p(&format!("lstm.{dir}.b"))?.clone(),
                    })
                };
                let fwd = weights("fwd")?;
                let bwd = if self.spec.bidirectional { Some(weights("bwd")?) } else { None };
                let states = lstm_layer(ops, &seq, t, batch, &fwd, bwd.as_ref())?;
                // Summary: forward state after the last frame, backward state after the first.
                let summary = if self.spec.bidirectional {
                    ops.concat(&[ops.narrow(&states[t - 1], 1, 0, h)?, ops.narrow(&states[0], 1, h, h)?], 1)?
                } else {
                    states[t - 1].clone()
                };
                let z = ops.add_bias(&ops.matmul(&ops.tanh(&summary), p("proj.w")?)?, p("proj.b")?)?;
                let grid = ops.reshape(&z, &[batch, f, pooled[0], pooled[1], pooled[2]])?;
                let up = ops.crop_or_pad3d(&ops.upsample3d(&grid, self.spec.upsample)?, dims)?;
                let dec = ops.relu(&conv(&up, "dec", Padding::Same)?);
                let latest = ops.narrow(&enc, 0, (t - 1) * batch, batch)?;
                let merged = ops.concat(&[dec, latest], 1)?;
                conv(&merged, "out", Padding::Same)?
            }
        };
        let denorm = ops.channel_affine(&raw, &self.norm.disp_std, &self.norm.disp_mean)?;
        Ok(ops.scatter_nodes(&ops.gather_nodes(&denorm, &self.free)?, &self.free)?)
    }

    /// Tape-free prediction for a batch of windows; returns `[B, 3, X, Y, Z]` in mm.
    pub fn predict(&self, windows: &[&[&Field3]]) -> Result<Tensor<f32>> {
        let input = Arc::new(self.encode_inputs(windows)?);
        let params: Vec<_> = self.params.iter().map(|p| p.value.clone()).collect();
        let out = self.forward(&Eager, &params, &input, windows.len())?;
        Ok(Arc::try_unwrap(out).unwrap_or_else(|a| (*a).clone()))
    }

    /// Displacement prediction for the latest of `frames` (exactly `window()` force fields).
    pub fn forward_window(&self, frames: &[&Field3]) -> Result<Field3> {
        let out = self.predict(&[frames])?;
        Field3::from_channels_first(self.spec.dims, out.data())
    }

    /// Predictions for every frame of a force sequence. Frame `j` sees the
    /// window ending at `j`; frames before the start are force-free.
    pub fn predict_sequence(&self, forces: &[&Field3], batch: usize) -> Result<Vec<Field3>> {
        let zero = Field3::zeros(self.spec.dims);
        let t = self.spec.window();
        let windows: Vec<Vec<&Field3>> = (0..forces.len()).map(|j| window_frames(forces, j, t, &zero)).collect();
        let vox = 3 * self.spec.dims.iter().product::<usize>();
        let mut out = Vec::with_capacity(forces.len());
        for chunk in windows.chunks(batch.max(1)) {
            let refs: Vec<&[&Field3]> = chunk.iter().map(|w| w.as_slice()).collect();
            let pred = self.predict(&refs)?;
            for b in 0..chunk.len() {
                out.push(Field3::from_channels_first(self.spec.dims, &pred.data()[b * vox..(b + 1) * vox])?);
            }
        }
        Ok(out)
    }
}

/// The `t` force frames ending at `frame`, oldest first, padded with `zero`
/// before the start of the sequence.
pub fn window_frames<'a>(forces: &[&'a Field3], frame: usize, t: usize, zero: &'a Field3) -> Vec<&'a Field3> {
    (0..t)
        .map(|k| {
            let back = t - 1 - k;
            if back > frame {
                zero
            } else {
                forces[frame - back]
            }
        })
        .collect()
}

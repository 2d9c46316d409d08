//! Trainable layers: convolution, batch normalization, linear, the residual
//! bottleneck block and the BN-FC-ReLU embedding head.
//!
//! Layers hold ids into a [`ParamStore`]; a [`Forward`] context binds those
//! parameters to tape leaves for one pass and carries the train/eval mode.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::{Shape, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPSILON: f64 = 1e-5;
const LOW_VARIANCE: f64 = 1e-12;

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Non-trainable state such as batch-norm running statistics.
#[derive(Debug, Clone)]
pub struct Buffer {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BufferId(usize);

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    buffers: Vec<Buffer>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn name_taken(&self, name: &str) -> bool {
        self.params.iter().any(|p| p.name == name) || self.buffers.iter().any(|b| b.name == name)
    }

    pub fn add_param(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.name_taken(&name) {
            return Err(contract(format!("duplicate parameter name {name}")));
        }
        let grad = value.zeros_like();
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor) -> Result<BufferId> {
        let name = name.into();
        if self.name_taken(&name) {
            return Err(contract(format!("duplicate buffer name {name}")));
        }
        self.buffers.push(Buffer { name, value });
        Ok(BufferId(self.buffers.len() - 1))
    }

    pub fn param(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn param_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn buffer(&self, id: BufferId) -> &Buffer {
        &self.buffers[id.0]
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[Buffer] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Buffer] {
        &mut self.buffers
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = p.value.zeros_like();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: a tape, the parameter store, and the bindings of
/// parameters to tape leaves.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    store: &'a mut ParamStore,
    mode: Mode,
    update_stats: bool,
    bound: Vec<Option<Var>>,
    warnings: Vec<String>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, store: &'a mut ParamStore, mode: Mode) -> Self {
        let n = store.params.len();
        Forward {
            tape,
            store,
            mode,
            update_stats: mode == Mode::Train,
            bound: vec![None; n],
            warnings: Vec::new(),
        }
    }

    /// Train-mode pass that does not touch running statistics.
    pub fn without_stat_updates(mut self) -> Self {
        self.update_stats = false;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape leaf for a parameter, created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf(self.store.params[id.0].value.clone());
        self.bound[id.0] = Some(v);
        v
    }

    /// Substitute an existing node for a parameter (finite-difference checks
    /// perturb parameters through this).
    pub fn bind(&mut self, id: ParamId, var: Var) {
        self.bound[id.0] = Some(var);
    }

    /// Every parameter that was used in this pass, in store order.
    pub fn bound_params(&self) -> Vec<(ParamId, Var)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }
}

fn uniform_init<R: Rng>(rng: &mut R, dims: Vec<usize>, fan_in: usize) -> Result<Tensor> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Ok(Tensor::new(dims, data)?)
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = uniform_init(
            rng,
            vec![out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        )?;
        let weight = store.add_param(format!("{name}.weight"), w)?;
        let bias = if bias {
            Some(store.add_param(
                format!("{name}.bias"),
                Tensor::zeros(&Shape::new(vec![out_channels])?),
            )?)
        } else {
            None
        };
        Ok(ConvLayer {
            weight,
            bias,
            geom: ConvGeometry::new(stride, padding),
            in_channels,
            out_channels,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let c = f.tape.shape(x).dims().get(1).copied();
        if c != Some(self.in_channels) {
            return Err(contract(format!(
                "conv expects {} input channels, got shape {}",
                self.in_channels,
                f.tape.shape(x)
            )));
        }
        let w = f.param(self.weight);
        let y = f.tape.conv2d(x, w, self.geom)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                let bb = f.tape.channel_broadcast(b, y)?;
                Ok(f.tape.add(y, bb)?)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormLayer {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let shape = Shape::new(vec![channels])?;
        Ok(BatchNormLayer {
            gamma: store.add_param(format!("{name}.gamma"), Tensor::full(&shape, 1.0))?,
            beta: store.add_param(format!("{name}.beta"), Tensor::zeros(&shape))?,
            running_mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&shape))?,
            running_var: store.add_buffer(format!("{name}.running_var"), Tensor::full(&shape, 1.0))?,
            channels,
            eps: BN_EPSILON,
            momentum: BN_MOMENTUM,
        })
    }

    /// Per-channel normalization over (N,H,W) for rank 4, over N for rank 2.
    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let dims = f.tape.shape(x).dims().to_vec();
        if !(dims.len() == 2 || dims.len() == 4) || dims[1] != self.channels {
            return Err(contract(format!(
                "batch norm over {} channels got shape {:?}",
                self.channels, dims
            )));
        }
        let count = dims.iter().product::<usize>() / self.channels;
        let gamma = f.param(self.gamma);
        let beta = f.param(self.beta);
        let tape = &mut *f.tape;
        let (centered, inv_std) = match f.mode {
            Mode::Train => {
                let sum = tape.channel_sum(x)?;
                let mean = tape.scale(sum, 1.0 / count as f64)?;
                let mean_b = tape.channel_broadcast(mean, x)?;
                let centered = tape.sub(x, mean_b)?;
                let sq = tape.mul(centered, centered)?;
                let sq_sum = tape.channel_sum(sq)?;
                let var = tape.scale(sq_sum, 1.0 / count as f64)?;
                let var_eps = tape.add_const(var, self.eps)?;
                let std = tape.sqrt(var_eps)?;
                let inv_std = tape.recip(std)?;

                let mean_v = tape.value(mean).clone();
                let var_v = tape.value(var).clone();
                if var_v.data().iter().any(|&v| v < LOW_VARIANCE) {
                    f.warnings
                        .push(format!("batch variance below {LOW_VARIANCE:e}; epsilon-guarded"));
                }
                if f.update_stats {
                    let unbias = if count > 1 {
                        count as f64 / (count as f64 - 1.0)
                    } else {
                        1.0
                    };
                    let m = self.momentum;
                    let rm = &mut f.store.buffers[self.running_mean.0].value;
                    *rm = Tensor::vector(
                        rm.data()
                            .iter()
                            .zip(mean_v.data())
                            .map(|(r, b)| (1.0 - m) * r + m * b)
                            .collect(),
                    );
                    let rv = &mut f.store.buffers[self.running_var.0].value;
                    *rv = Tensor::vector(
                        rv.data()
                            .iter()
                            .zip(var_v.data())
                            .map(|(r, b)| (1.0 - m) * r + m * b * unbias)
                            .collect(),
                    );
                }
                (centered, inv_std)
            }
            Mode::Eval => {
                let rm = f.store.buffers[self.running_mean.0].value.clone();
                let rv = &f.store.buffers[self.running_var.0].value;
                let inv = rv.map(|v| 1.0 / (v + self.eps).sqrt());
                let rm = tape.constant(rm);
                let rm_b = tape.channel_broadcast(rm, x)?;
                let centered = tape.sub(x, rm_b)?;
                (centered, tape.constant(inv))
            }
        };
        let tape = &mut *f.tape;
        let scale = tape.mul(inv_std, gamma)?;
        let scale_b = tape.channel_broadcast(scale, x)?;
        let scaled = tape.mul(centered, scale_b)?;
        let beta_b = tape.channel_broadcast(beta, x)?;
        Ok(tape.add(scaled, beta_b)?)
    }
}

#[derive(Debug, Clone)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl LinearLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = uniform_init(rng, vec![out_features, in_features], in_features)?;
        Ok(LinearLayer {
            weight: store.add_param(format!("{name}.weight"), w)?,
            bias: store.add_param(
                format!("{name}.bias"),
                Tensor::zeros(&Shape::new(vec![out_features])?),
            )?,
            in_features,
            out_features,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let dims = f.tape.shape(x).dims().to_vec();
        if dims.len() != 2 || dims[1] != self.in_features {
            return Err(contract(format!(
                "linear expects (N,{}), got {:?}",
                self.in_features, dims
            )));
        }
        let w = f.param(self.weight);
        let b = f.param(self.bias);
        let wt = f.tape.transpose(w)?;
        let y = f.tape.matmul(x, wt)?;
        let bb = f.tape.channel_broadcast(b, y)?;
        Ok(f.tape.add(y, bb)?)
    }
}

/// Convolution followed by batch norm.
#[derive(Debug, Clone)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: BatchNormLayer,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(ConvBn {
            conv: ConvLayer::new(store, &format!("{name}.conv"), cin, cout, kernel, stride, padding, false, rng)?,
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), cout)?,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let y = self.conv.forward(f, x)?;
        self.bn.forward(f, y)
    }
}

/// Residual bottleneck: 1x1 reduce, 3x3 (strided), 1x1 expand, each with
/// batch norm; projection on the skip path when the shape changes.
#[derive(Debug, Clone)]
pub struct BottleneckBlock {
    pub reduce: ConvBn,
    pub spatial: ConvBn,
    pub expand: ConvBn,
    pub projection: Option<ConvBn>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Channel reduction inside a bottleneck.
pub const BOTTLENECK_REDUCTION: usize = 4;

impl BottleneckBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mid = (out_channels / BOTTLENECK_REDUCTION).max(1);
        let reduce = ConvBn::new(store, &format!("{name}.reduce"), in_channels, mid, 1, 1, 0, rng)?;
        let spatial = ConvBn::new(store, &format!("{name}.spatial"), mid, mid, 3, stride, 1, rng)?;
        let expand = ConvBn::new(store, &format!("{name}.expand"), mid, out_channels, 1, 1, 0, rng)?;
        let projection = if in_channels != out_channels || stride != 1 {
            Some(ConvBn::new(
                store,
                &format!("{name}.proj"),
                in_channels,
                out_channels,
                1,
                stride,
                0,
                rng,
            )?)
        } else {
            None
        };
        Ok(BottleneckBlock {
            reduce,
            spatial,
            expand,
            projection,
            in_channels,
            out_channels,
            stride,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let c = f.tape.shape(x).dims().get(1).copied();
        if c != Some(self.in_channels) {
            return Err(contract(format!(
                "bottleneck expects {} channels, got shape {}",
                self.in_channels,
                f.tape.shape(x)
            )));
        }
        let h = self.reduce.forward(f, x)?;
        let h = f.tape.relu(h)?;
        let h = self.spatial.forward(f, h)?;
        let h = f.tape.relu(h)?;
        let h = self.expand.forward(f, h)?;
        let skip = match &self.projection {
            Some(p) => p.forward(f, x)?,
            None => x,
        };
        let sum = f.tape.add(h, skip)?;
        Ok(f.tape.relu(sum)?)
    }
}

/// BN -> FC -> ReLU after global pooling.
#[derive(Debug, Clone)]
pub struct EmbeddingHead {
    pub bn: BatchNormLayer,
    pub fc: LinearLayer,
}

impl EmbeddingHead {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_features: usize,
        embedding_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(EmbeddingHead {
            bn: BatchNormLayer::new(store, &format!("{name}.bn"), in_features)?,
            fc: LinearLayer::new(store, &format!("{name}.fc"), in_features, embedding_dim, rng)?,
        })
    }

    pub fn embedding_dim(&self) -> usize {
        self.fc.out_features
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        if f.tape.shape(x).rank() != 2 {
            return Err(contract(format!(
                "embedding head expects rank 2, got {}",
                f.tape.shape(x)
            )));
        }
        let h = self.bn.forward(f, x)?;
        let h = self.fc.forward(f, h)?;
        Ok(f.tape.relu(h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradCheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    fn random(dims: &[usize], seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Finite-difference check of `sum(w * layer(x))` with respect to the input
    /// and to every parameter the layer uses.
    fn check_layer<L>(store: &ParamStore, input: &Tensor, tol: f64, layer: L)
    where
        L: Fn(&mut Forward, Var) -> Result<Var>,
    {
        let probe = {
            let mut tape = Tape::new();
            let mut s = store.clone();
            let mut f = Forward::new(&mut tape, &mut s, Mode::Train);
            let x = f.tape.constant(input.clone());
            let y = layer(&mut f, x).unwrap();
            let dims = f.tape.shape(y).dims().to_vec();
            random(&dims, 99)
        };
        let run = |target: Option<ParamId>| {
            let probe = probe.clone();
            let layer = &layer;
            move |tape: &mut Tape, v: Var| -> crate::autodiff::Result<Var> {
                let mut s = store.clone();
                let mut f = Forward::new(tape, &mut s, Mode::Train);
                let x = match target {
                    Some(pid) => {
                        f.bind(pid, v);
                        f.tape.constant(input.clone())
                    }
                    None => v,
                };
                let y = layer(&mut f, x).expect("layer forward");
                let w = f.tape.constant(probe.clone());
                let yw = f.tape.mul(y, w)?;
                f.tape.sum(yw)
            }
        };
        let r = GradCheck::new(tol).run(run(None), input).unwrap();
        assert!(r.passed, "input grad: {r:?}");
        for id in store.ids() {
            let value = store.param(id).value.clone();
            let r = GradCheck::new(tol)
                .run(run(Some(id)), &value)
                .unwrap();
            assert!(r.passed, "param {}: {r:?}", store.param(id).name);
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add_param("a", Tensor::scalar(1.0)).unwrap();
        assert!(s.add_param("a", Tensor::scalar(1.0)).is_err());
        assert!(s.add_buffer("a", Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn conv_channel_shuffle_and_zero() {
        let mut s = ParamStore::new();
        let conv = ConvLayer::new(&mut s, "c", 2, 2, 1, 1, 0, true, &mut rng()).unwrap();
        s.param_mut(conv.weight).value =
            Tensor::new(vec![2, 2, 1, 1], vec![0., 1., 1., 0.]).unwrap();
        let x = random(&[1, 2, 3, 3], 1);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Eval);
        let xv = f.tape.constant(x.clone());
        let y = conv.forward(&mut f, xv).unwrap();
        let yv = f.tape.value(y).data().to_vec();
        assert_eq!(&yv[..9], &x.data()[9..]);
        assert_eq!(&yv[9..], &x.data()[..9]);

        s.param_mut(conv.weight).value = s.param(conv.weight).value.zeros_like();
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Eval);
        let xv = f.tape.constant(x);
        let y = conv.forward(&mut f, xv).unwrap();
        assert!(f.tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_layer_grad_check() {
        let mut s = ParamStore::new();
        let conv = ConvLayer::new(&mut s, "c", 2, 3, 3, 1, 1, true, &mut rng()).unwrap();
        check_layer(&s, &random(&[2, 2, 5, 4], 3), 1e-6, |f, x| conv.forward(f, x));
    }

    #[test]
    fn batchnorm_train_statistics() {
        let mut s = ParamStore::new();
        let bn = BatchNormLayer::new(&mut s, "bn", 3).unwrap();
        let x = random(&[4, 3, 5, 5], 4).map(|v| 3.0 * v + 2.0);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Train);
        let xv = f.tape.constant(x);
        let y = bn.forward(&mut f, xv).unwrap();
        let yv = f.tape.value(y).clone();
        for c in 0..3 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| yv.data()[(n * 3 + c) * 25..(n * 3 + c + 1) * 25].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-10);
            // epsilon shrinks the variance by var / (var + eps)
            assert!((v - 1.0).abs() < 1e-4, "variance {v}");
        }
    }

    #[test]
    fn batchnorm_unit_input_is_nearly_identity_and_eval_is_affine() {
        let mut s = ParamStore::new();
        let bn = BatchNormLayer::new(&mut s, "bn", 1).unwrap();
        let x = Tensor::new(vec![4, 1], vec![1.0, -1.0, 1.0, -1.0]).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Train);
        let xv = f.tape.constant(x.clone());
        let y = bn.forward(&mut f, xv).unwrap();
        assert!(f.tape.value(y).max_abs_diff(&x) < 1e-5);

        s.buffers_mut()[bn.running_mean.0].value = Tensor::vector(vec![0.5]);
        s.buffers_mut()[bn.running_var.0].value = Tensor::vector(vec![4.0]);
        let c = Tensor::full(&Shape::new(vec![3, 1]).unwrap(), 2.0);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Eval);
        let cv = f.tape.constant(c);
        let y = bn.forward(&mut f, cv).unwrap();
        let want = 1.5 / (4.0f64 + BN_EPSILON).sqrt();
        assert!(f.tape.value(y).data().iter().all(|&v| (v - want).abs() < 1e-15));
    }

    #[test]
    fn batchnorm_zero_variance_is_flagged() {
        let mut s = ParamStore::new();
        let bn = BatchNormLayer::new(&mut s, "bn", 2).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Train);
        let x = f.tape.constant(Tensor::full(&Shape::new(vec![1, 2]).unwrap(), 3.0));
        let y = bn.forward(&mut f, x).unwrap();
        assert!(f.tape.value(y).is_finite());
        assert_eq!(f.warnings().len(), 1);
    }

    #[test]
    fn batchnorm_running_stats_converge() {
        let mut s = ParamStore::new();
        let bn = BatchNormLayer::new(&mut s, "bn", 2).unwrap();
        let mut gaps = Vec::new();
        let mut r = ChaCha8Rng::seed_from_u64(77);
        let probe = random(&[512, 2, 2, 2], 78).map(|v| 2.0 * v + 1.0);
        for step in 0..100 {
            let x = Tensor::new(
                vec![16, 2, 2, 2],
                (0..128).map(|_| 2.0 * r.random_range(-1.0..1.0) + 1.0).collect(),
            )
            .unwrap();
            let mut tape = Tape::new();
            let mut f = Forward::new(&mut tape, &mut s, Mode::Train);
            let xv = f.tape.constant(x);
            bn.forward(&mut f, xv).unwrap();
            if step % 10 == 9 {
                let eval = |s: &mut ParamStore, mode| {
                    let mut tape = Tape::new();
                    let mut f = Forward::new(&mut tape, s, mode).without_stat_updates();
                    let xv = f.tape.constant(probe.clone());
                    let y = bn.forward(&mut f, xv).unwrap();
                    f.tape.value(y).clone()
                };
                let a = eval(&mut s, Mode::Train);
                let b = eval(&mut s, Mode::Eval);
                let mean_gap = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(p, q)| (p - q).abs())
                    .sum::<f64>()
                    / a.numel() as f64;
                gaps.push(mean_gap);
            }
        }
        assert!(gaps.last().unwrap() < &(gaps[0] * 0.5), "{gaps:?}");
        assert!(gaps.last().unwrap() < &0.05, "{gaps:?}");
    }

    #[test]
    fn batchnorm_grad_check() {
        let mut s = ParamStore::new();
        let bn = BatchNormLayer::new(&mut s, "bn", 3).unwrap();
        s.param_mut(bn.gamma).value = Tensor::vector(vec![0.5, 1.5, -1.0]);
        s.param_mut(bn.beta).value = Tensor::vector(vec![0.1, 0.0, -0.2]);
        check_layer(&s, &random(&[3, 3, 2, 2], 6), 1e-6, |f, x| bn.forward(f, x));
        check_layer(&s, &random(&[5, 3], 7), 1e-6, |f, x| bn.forward(f, x));
    }

    #[test]
    fn bottleneck_zero_branch_is_relu() {
        let mut s = ParamStore::new();
        let block = BottleneckBlock::new(&mut s, "b", 4, 4, 1, &mut rng()).unwrap();
        assert!(block.projection.is_none());
        let wid = block.expand.conv.weight;
        s.param_mut(wid).value = s.param(wid).value.zeros_like();
        let x = random(&[2, 4, 3, 3], 8);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Train);
        let xv = f.tape.constant(x.clone());
        let y = block.forward(&mut f, xv).unwrap();
        assert_eq!(f.tape.value(y), &x.map(|v| v.max(0.0)));
        assert_eq!(f.tape.value(y).dims(), &[2, 4, 3, 3]);
    }

    #[test]
    fn bottleneck_shapes_and_errors() {
        let mut s = ParamStore::new();
        let block = BottleneckBlock::new(&mut s, "b", 4, 8, 2, &mut rng()).unwrap();
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Train);
        let x = f.tape.constant(random(&[1, 4, 6, 4], 9));
        let y = block.forward(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(y).dims(), &[1, 8, 3, 2]);
        let bad = f.tape.constant(random(&[1, 3, 6, 4], 9));
        assert!(block.forward(&mut f, bad).is_err());
    }

    #[test]
    fn bottleneck_grad_check() {
        let mut s = ParamStore::new();
        let block = BottleneckBlock::new(&mut s, "b", 4, 8, 2, &mut rng()).unwrap();
        check_layer(&s, &random(&[2, 4, 4, 4], 10), 1e-5, |f, x| block.forward(f, x));
    }

    #[test]
    fn embedding_head_contract_and_grad_check() {
        let mut s = ParamStore::new();
        let head = EmbeddingHead::new(&mut s, "head", 6, 5, &mut rng()).unwrap();
        let x = random(&[4, 6], 12);
        let mut tape = Tape::new();
        let mut f = Forward::new(&mut tape, &mut s, Mode::Train);
        let xv = f.tape.constant(x.clone());
        let y = head.forward(&mut f, xv).unwrap();
        assert_eq!(f.tape.shape(y).dims(), &[4, 5]);
        assert!(f.tape.value(y).data().iter().all(|&v| v >= 0.0));
        let bad = f.tape.constant(random(&[4, 7], 1));
        assert!(head.forward(&mut f, bad).is_err());
        drop(f);
        check_layer(&s, &x, 1e-6, |f, x| head.forward(f, x));
    }
}

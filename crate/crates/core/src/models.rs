//! Architectures: trainable mini networks plus closed-form parameter and
//! FLOP counts for full-size WideResNets.
//!
//! A WRN-d-k follows the pre-activation layout: a 3×3 stem with 16 channels,
//! three groups of `(d − 4) / 6` basic blocks with widths `16k, 32k, 64k`
//! and strides `1, 2, 2`, then BN, activation, global average pooling and a
//! linear classifier. An MLP of depth `d` has `d` linear layers with `width`
//! hidden units between them.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{flop_cost as cost, BnMode, BnStats, FlopTally, Tape, Tensor, Var};

/// Momentum of the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

const STEM_CHANNELS: usize = 16;
const MAGIC: &[u8; 4] = b"RLAB";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Mlp,
    Wrn,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Gelu,
}

impl Activation {
    fn flops_per_element(self) -> u64 {
        match self {
            Activation::Relu => cost::RELU,
            Activation::Gelu => cost::GELU,
        }
    }

    /// Static activation-memory estimate relative to ReLU. Not measured.
    pub fn memory_factor(self) -> f64 {
        match self {
            Activation::Relu => 1.0,
            Activation::Gelu => 1.5,
        }
    }
}

/// Architecture descriptor.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ArchSpec {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    #[serde(default)]
    pub activation: Activation,
    /// `(channels, height, width)`.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
}

impl ArchSpec {
    pub fn wrn(depth: usize, width: usize, input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchSpec { family: Family::Wrn, depth, width, activation: Activation::Relu, input_shape, num_classes }
    }

    pub fn mlp(depth: usize, width: usize, input_shape: [usize; 3], num_classes: usize) -> Self {
        ArchSpec { family: Family::Mlp, depth, width, activation: Activation::Relu, input_shape, num_classes }
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    /// Parse a short name such as `wrn-28-10`, `wrn-10-1-gelu` or `mlp-2-32`.
    pub fn parse(name: &str, input_shape: [usize; 3], num_classes: usize) -> Result<Self> {
        let name: ArchName = name.parse()?;
        let arch = ArchSpec {
            family: name.family,
            depth: name.depth,
            width: name.width,
            activation: name.activation,
            input_shape,
            num_classes,
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn name(&self) -> String {
        ArchName { family: self.family, depth: self.depth, width: self.width, activation: self.activation }.to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArch(msg));
        if self.num_classes < 2 {
            return bad(format!("{} classes; need at least 2", self.num_classes));
        }
        if self.input_shape.contains(&0) {
            return bad(format!("input shape {:?}", self.input_shape));
        }
        if self.width == 0 {
            return bad("width must be positive".into());
        }
        match self.family {
            Family::Wrn if self.depth < 10 || (self.depth - 4) % 6 != 0 => {
                bad(format!("WRN depth {} must satisfy (depth - 4) % 6 == 0 and depth >= 10", self.depth))
            }
            Family::Mlp if self.depth == 0 => bad("MLP depth must be at least 1".into()),
            _ => Ok(()),
        }
    }

    pub fn input_len(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn blocks_per_group(&self) -> usize {
        (self.depth - 4) / 6
    }

    fn group_widths(&self) -> [usize; 3] {
        [16 * self.width, 32 * self.width, 64 * self.width]
    }
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Family, depth, width and activation without the data-dependent fields.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchName {
    pub family: Family,
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArch(format!("cannot parse `{s}`; expected e.g. wrn-28-10 or mlp-2-32"));
        let parts: Vec<&str> = s.trim().split('-').collect();
        let (family, rest) = match parts.split_first() {
            Some((&"wrn", rest)) => (Family::Wrn, rest),
            Some((&"mlp", rest)) => (Family::Mlp, rest),
            _ => return Err(bad()),
        };
        let (activation, nums) = match rest.split_last() {
            Some((&"gelu", nums)) => (Activation::Gelu, nums),
            Some((&"relu", nums)) => (Activation::Relu, nums),
            _ => (Activation::Relu, rest),
        };
        let [depth, width] = nums else { return Err(bad()) };
        Ok(ArchName {
            family,
            depth: depth.parse().map_err(|_| bad())?,
            width: width.parse().map_err(|_| bad())?,
            activation,
        })
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let family = match self.family {
            Family::Mlp => "mlp",
            Family::Wrn => "wrn",
        };
        write!(f, "{family}-{}-{}", self.depth, self.width)?;
        if self.activation == Activation::Gelu {
            f.write_str("-gelu")?;
        }
        Ok(())
    }
}

/// Exact trainable parameter count: conv and linear weights, linear biases
/// and batch-norm affine parameters. Running statistics are not counted.
pub fn count_params(arch: &ArchSpec) -> Result<u64> {
    arch.validate()?;
    let classes = arch.num_classes as u64;
    Ok(match arch.family {
        Family::Mlp => {
            let widths = mlp_widths(arch);
            widths.windows(2).map(|w| (w[0] * w[1] + w[1]) as u64).sum()
        }
        Family::Wrn => {
            let c_in = arch.input_shape[0] as u64;
            let mut total = 9 * c_in * STEM_CHANNELS as u64;
            let mut prev = STEM_CHANNELS as u64;
            for (g, &out) in arch.group_widths().iter().enumerate() {
                let out = out as u64;
                for b in 0..arch.blocks_per_group() {
                    let stride = if b == 0 && g > 0 { 2 } else { 1 };
                    total += 2 * prev + 9 * prev * out + 2 * out + 9 * out * out;
                    if prev != out || stride != 1 {
                        total += prev * out;
                    }
                    prev = out;
                }
            }
            total + 2 * prev + prev * classes + classes
        }
    })
}

/// Closed-form forward FLOPs for one example: 2 per multiply-accumulate in
/// convolutions (`2·k²·C_in·C_out·H_out·W_out`) and linear layers
/// (`2·in·out`), plus the per-element charges in [`cost`].
pub fn count_forward_flops(arch: &ArchSpec) -> Result<FlopTally> {
    arch.validate()?;
    let mut t = FlopTally::default();
    let act = arch.activation.flops_per_element();
    match arch.family {
        Family::Mlp => {
            let widths = mlp_widths(arch);
            let last = widths.len() - 2;
            for (i, w) in widths.windows(2).enumerate() {
                let (fan_in, fan_out) = (w[0] as u64, w[1] as u64);
                t.mac += 2 * fan_in * fan_out;
                t.elementwise += cost::BIAS * fan_out;
                if i < last {
                    t.elementwise += act * fan_out;
                }
            }
        }
        Family::Wrn => {
            let [c_in, mut h, mut w] = arch.input_shape.map(|d| d as u64);
            let conv = |k: u64, cin: u64, cout: u64, ho: u64, wo: u64| 2 * k * k * cin * cout * ho * wo;
            let mut prev = STEM_CHANNELS as u64;
            t.mac += conv(3, c_in, prev, h, w);
            for (g, &out) in arch.group_widths().iter().enumerate() {
                let out = out as u64;
                for b in 0..arch.blocks_per_group() {
                    let stride = if b == 0 && g > 0 { 2 } else { 1 };
                    let (ho, wo) = ((h - 1) / stride + 1, (w - 1) / stride + 1);
                    let in_elems = prev * h * w;
                    let out_elems = out * ho * wo;
                    t.elementwise += (cost::BATCH_NORM + act) * in_elems;
                    t.mac += conv(3, prev, out, ho, wo);
                    t.elementwise += (cost::BATCH_NORM + act) * out_elems;
                    t.mac += conv(3, out, out, ho, wo);
                    if prev != out || stride != 1 {
                        t.mac += conv(1, prev, out, ho, wo);
                    }
                    t.elementwise += cost::ADD * out_elems;
                    prev = out;
                    (h, w) = (ho, wo);
                }
            }
            let elems = prev * h * w;
            t.elementwise += (cost::BATCH_NORM + act + cost::POOL) * elems;
            let classes = arch.num_classes as u64;
            t.mac += 2 * prev * classes;
            t.elementwise += cost::BIAS * classes;
        }
    }
    Ok(t)
}

fn mlp_widths(arch: &ArchSpec) -> Vec<usize> {
    let mut widths = vec![arch.input_len()];
    widths.extend(std::iter::repeat_n(arch.width, arch.depth - 1));
    widths.push(arch.num_classes);
    widths
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Zeros,
    Ones,
}

#[derive(Clone, Debug)]
struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

/// Parameter and batch-norm layout in forward-consumption order.
fn layout(arch: &ArchSpec) -> (Vec<ParamSpec>, Vec<(String, usize)>) {
    let mut params = Vec::new();
    let mut bns = Vec::new();
    let mut p = |name: String, shape: Vec<usize>, init| params.push(ParamSpec { name, shape, init });
    match arch.family {
        Family::Mlp => {
            for (i, w) in mlp_widths(arch).windows(2).enumerate() {
                p(format!("fc{i}.weight"), vec![w[0], w[1]], Init::He(w[0]));
                p(format!("fc{i}.bias"), vec![w[1]], Init::Zeros);
            }
        }
        Family::Wrn => {
            let c_in = arch.input_shape[0];
            p("conv1.weight".into(), vec![STEM_CHANNELS, c_in, 3, 3], Init::He(9 * c_in));
            let mut prev = STEM_CHANNELS;
            let mut bn = |p: &mut dyn FnMut(String, Vec<usize>, Init), name: String, c: usize| {
                p(format!("{name}.weight"), vec![c], Init::Ones);
                p(format!("{name}.bias"), vec![c], Init::Zeros);
                bns.push((name, c));
            };
            for (g, &out) in arch.group_widths().iter().enumerate() {
                for b in 0..arch.blocks_per_group() {
                    let stride = if b == 0 && g > 0 { 2 } else { 1 };
                    let base = format!("group{}.{b}", g + 1);
                    bn(&mut p, format!("{base}.bn1"), prev);
                    p(format!("{base}.conv1.weight"), vec![out, prev, 3, 3], Init::He(9 * prev));
                    bn(&mut p, format!("{base}.bn2"), out);
                    p(format!("{base}.conv2.weight"), vec![out, out, 3, 3], Init::He(9 * out));
                    if prev != out || stride != 1 {
                        p(format!("{base}.shortcut.weight"), vec![out, prev, 1, 1], Init::He(prev));
                    }
                    prev = out;
                }
            }
            bn(&mut p, "bn_final".into(), prev);
            p("fc.weight".into(), vec![prev, arch.num_classes], Init::He(prev));
            p("fc.bias".into(), vec![arch.num_classes], Init::Zeros);
        }
    }
    (params, bns)
}

/// A named tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Batch-norm running statistics for one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnLayer {
    pub name: String,
    pub stats: BnStats,
}

/// Output of one forward pass.
pub struct ForwardPass {
    pub logits: Var,
    /// Parameter leaves, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per BN layer (train mode only).
    pub bn_batch: Vec<BnStats>,
}

/// An instantiated network.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    arch: ArchSpec,
    params: Vec<Param>,
    bn: Vec<BnLayer>,
}

impl Model {
    /// Deterministically initialize `arch`: He-normal conv and linear
    /// weights, zero biases, BN `γ = 1, β = 0`.
    pub fn build(arch: &ArchSpec, seed: u64) -> Result<Model> {
        arch.validate()?;
        let (specs, bns) = layout(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = specs
            .into_iter()
            .map(|s| {
                let n: usize = s.shape.iter().product();
                let data = match s.init {
                    Init::Zeros => vec![0.0; n],
                    Init::Ones => vec![1.0; n],
                    Init::He(fan_in) => {
                        let normal =
                            Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive standard deviation");
                        (0..n).map(|_| normal.sample(&mut rng)).collect()
                    }
                };
                Ok(Param { name: s.name, value: Tensor::new(s.shape, data)? })
            })
            .collect::<Result<_>>()?;
        let bn = bns.into_iter().map(|(name, c)| BnLayer { name, stats: BnStats::identity(c) }).collect();
        Ok(Model { arch: arch.clone(), params, bn })
    }

    pub fn arch(&self) -> &ArchSpec {
        &self.arch
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn bn_layers(&self) -> &[BnLayer] {
        &self.bn
    }

    pub fn param_count(&self) -> u64 {
        self.params.iter().map(|p| p.value.len() as u64).sum()
    }

    pub fn param_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replace every parameter value; shapes must match.
    pub fn set_param_values(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(
                "set_param_values",
                format!("{} tensors for {} parameters", values.len(), self.params.len()),
            ));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::shape(
                    "set_param_values",
                    format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape()),
                ));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    pub fn bn_stats(&self) -> Vec<BnStats> {
        self.bn.iter().map(|b| b.stats.clone()).collect()
    }

    pub fn set_bn_stats(&mut self, stats: &[BnStats]) -> Result<()> {
        if stats.len() != self.bn.len() {
            return Err(Error::shape("set_bn_stats", "layer count"));
        }
        for (layer, s) in self.bn.iter_mut().zip(stats) {
            layer.stats = s.clone();
        }
        Ok(())
    }

    /// Fold one train-mode pass worth of batch statistics into the running
    /// statistics.
    pub fn absorb_bn(&mut self, batch: &[BnStats]) {
        for (layer, b) in self.bn.iter_mut().zip(batch) {
            layer.stats.absorb(b, BN_MOMENTUM);
        }
    }

    /// Put every parameter on `tape` as a leaf, in [`Model::params`] order.
    pub fn param_leaves(&self, tape: &mut Tape, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect()
    }

    /// Record a forward pass over `input` (`[N, C, H, W]`, or `[N, D]` for an
    /// MLP). Parameters enter the tape as leaves that require gradients only
    /// when `track_params` is set.
    pub fn forward(&self, tape: &mut Tape, input: Var, mode: BnMode, track_params: bool) -> Result<ForwardPass> {
        let params = self.param_leaves(tape, track_params);
        self.forward_with(tape, input, mode, params)
    }

    /// Like [`Model::forward`] but reusing parameter leaves already on the
    /// tape, so several passes can share one set of parameter gradients.
    pub fn forward_with(&self, tape: &mut Tape, input: Var, mode: BnMode, params: Vec<Var>) -> Result<ForwardPass> {
        if params.len() != self.params.len() {
            return Err(Error::shape(
                "forward",
                format!("{} parameter leaves for {} parameters", params.len(), self.params.len()),
            ));
        }
        let shape = tape.value(input).shape().to_vec();
        let expect = self.arch.input_shape;
        let ok = match self.arch.family {
            Family::Wrn => shape.len() == 4 && shape[1..] == expect,
            Family::Mlp => shape.len() >= 2 && shape[1..].iter().product::<usize>() == self.arch.input_len(),
        };
        if !ok {
            return Err(Error::shape("forward", format!("input {shape:?} for {} expecting {expect:?}", self.arch)));
        }
        let mut ctx = Ctx { tape, model: self, params, next: 0, next_bn: 0, mode, bn_batch: Vec::new() };
        let logits = match self.arch.family {
            Family::Mlp => ctx.mlp(input)?,
            Family::Wrn => ctx.wrn(input)?,
        };
        debug_assert_eq!(ctx.next, self.params.len());
        Ok(ForwardPass { logits, params: ctx.params, bn_batch: ctx.bn_batch })
    }

    /// Logits with frozen batch norm and no gradient tracking.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.leaf(x.clone(), false);
        let pass = self.forward(&mut tape, input, BnMode::Frozen, false)?;
        Ok(tape.value(pass.logits).clone())
    }

    /// Write the RLAB binary format: magic, version, tensor count, then per
    /// tensor a length-prefixed UTF-8 name, rank, dims and little-endian f64
    /// data. Batch-norm running statistics are stored as
    /// `<layer>.running_mean` / `<layer>.running_var`.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let tensors = self.named_tensors();
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.rank() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Read an RLAB stream for a model of architecture `arch`. Every tensor
    /// the architecture needs must be present with the right shape.
    pub fn read_from(arch: &ArchSpec, mut r: impl Read, origin: &Path) -> Result<Model> {
        let bad = |detail: String| Error::format(origin, detail);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != MAGIC {
            return Err(bad(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r).map_err(|_| bad("truncated header".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let count = read_u32(&mut r).map_err(|_| bad("truncated header".into()))?;
        let mut tensors = std::collections::HashMap::new();
        for i in 0..count {
            let entry = read_entry(&mut r).map_err(|e| bad(format!("tensor {i}: {e}")))?;
            tensors.insert(entry.0, entry.1);
        }
        let mut model = Model::build(arch, 0)?;
        let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
            let t = tensors.remove(name).ok_or_else(|| bad(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(bad(format!("`{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t)
        };
        for p in &mut model.params {
            p.value = take(&p.name, p.value.shape())?;
        }
        for layer in &mut model.bn {
            let c = layer.stats.mean.len();
            layer.stats.mean = take(&format!("{}.running_mean", layer.name), &[c])?.into_data();
            layer.stats.var = take(&format!("{}.running_var", layer.name), &[c])?.into_data();
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(bad(format!("unexpected tensor `{extra}`")));
        }
        Ok(model)
    }

    pub fn load(arch: &ArchSpec, path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Model::read_from(arch, bytes.as_slice(), path)
    }

    fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for layer in &self.bn {
            out.push((format!("{}.running_mean", layer.name), Tensor::vector(layer.stats.mean.clone())));
            out.push((format!("{}.running_var", layer.name), Tensor::vector(layer.stats.var.clone())));
        }
        out
    }
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_entry(r: &mut impl Read) -> std::result::Result<(String, Tensor), String> {
    let io = |e: std::io::Error| e.to_string();
    let name_len = read_u32(r).map_err(io)? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name).map_err(io)?;
    let name = String::from_utf8(name).map_err(|e| e.to_string())?;
    let rank = read_u32(r).map_err(io)? as usize;
    let dims = (0..rank).map(|_| read_u32(r).map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>().map_err(io)?;
    let numel: usize = dims.iter().product();
    let mut raw = vec![0u8; numel * 8];
    r.read_exact(&mut raw).map_err(io)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    let tensor = Tensor::new(dims, data).map_err(|e| e.to_string())?;
    Ok((name, tensor))
}

struct Ctx<'a> {
    tape: &'a mut Tape,
    model: &'a Model,
    params: Vec<Var>,
    next: usize,
    next_bn: usize,
    mode: BnMode,
    bn_batch: Vec<BnStats>,
}

impl Ctx<'_> {
    fn param(&mut self) -> Var {
        let v = self.params[self.next];
        self.next += 1;
        v
    }

    fn act(&mut self, x: Var) -> Var {
        match self.model.arch.activation {
            Activation::Relu => self.tape.relu(x),
            Activation::Gelu => self.tape.gelu(x),
        }
    }

    fn linear(&mut self, x: Var) -> Result<Var> {
        let (w, b) = (self.param(), self.param());
        let y = self.tape.matmul(x, w)?;
        self.tape.add_bias(y, b)
    }

    fn conv(&mut self, x: Var, stride: usize, padding: usize) -> Result<Var> {
        let w = self.param();
        self.tape.conv2d(x, w, stride, padding)
    }

    fn bn(&mut self, x: Var) -> Result<Var> {
        let (g, b) = (self.param(), self.param());
        let running = &self.model.bn[self.next_bn].stats;
        self.next_bn += 1;
        let (y, stats) = self.tape.batch_norm(x, g, b, running, self.mode)?;
        self.bn_batch.extend(stats);
        Ok(y)
    }

    fn mlp(&mut self, input: Var) -> Result<Var> {
        let mut x = self.tape.flatten(input)?;
        for i in 0..self.model.arch.depth {
            x = self.linear(x)?;
            if i + 1 < self.model.arch.depth {
                x = self.act(x);
            }
        }
        Ok(x)
    }

    fn wrn(&mut self, input: Var) -> Result<Var> {
        let arch = &self.model.arch;
        let (groups, blocks) = (arch.group_widths(), arch.blocks_per_group());
        let mut x = self.conv(input, 1, 1)?;
        let mut prev = STEM_CHANNELS;
        for (g, &out) in groups.iter().enumerate() {
            for b in 0..blocks {
                let stride = if b == 0 && g > 0 { 2 } else { 1 };
                let o = self.bn(x)?;
                let o = self.act(o);
                let y = self.conv(o, stride, 1)?;
                let y = self.bn(y)?;
                let y = self.act(y);
                let y = self.conv(y, 1, 1)?;
                let shortcut = if prev != out || stride != 1 { self.conv(o, stride, 0)? } else { x };
                x = self.tape.add(y, shortcut)?;
                prev = out;
            }
        }
        let x = self.bn(x)?;
        let x = self.act(x);
        let x = self.tape.global_avg_pool(x)?;
        self.linear(x)
    }
}

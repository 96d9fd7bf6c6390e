//! Reconstruction and pose networks, their parameter stores and checkpoints.
//!
//! Both encoders are four stride-2 3×3 convolutions (32, 64, 128, 256 channels)
//! taking a 64×64 RGB image down to 4×4, followed by linear layers. The
//! reconstruction network adds a shallow color branch whose third linear
//! output is concatenated with the structure branch's third linear output.
//! Hidden layers use leaky-relu with slope 0.01.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::geometry::{PointCloud, ViewSampler, Viewpoint};
use crate::trainer::TrainConfig;

pub const IMAGE_SIZE: usize = 64;
pub const NUM_POINTS: usize = 1024;
pub const EMBEDDING_DIM: usize = 128;
const SLOPE: f64 = 0.01;

/// Ordered named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|(_, t)| t)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    /// Registers every tensor as a differentiable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Registers every tensor as a constant (no gradients).
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, grad: bool) -> Bound<'t> {
        let vars: Vec<Var<'t>> = self
            .entries
            .iter()
            .map(|(_, t)| if grad { tape.var(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let index = self.entries.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Bound { vars, index }
    }
}

/// A [`ParamSet`] living on a tape.
pub struct Bound<'t> {
    pub vars: Vec<Var<'t>>,
    index: HashMap<String, usize>,
}

impl<'t> Bound<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        self.vars[self.index[name]]
    }

    /// Substitutes the variable bound to `name`.
    pub fn set(&mut self, name: &str, v: Var<'t>) {
        let i = self.index[name];
        self.vars[i] = v;
    }
}

#[derive(Clone, Copy)]
enum Kind {
    Conv { cin: usize, cout: usize },
    Linear { fan_in: usize, fan_out: usize },
}

fn recon_layout() -> Vec<(&'static str, Kind)> {
    use Kind::*;
    vec![
        ("s.e1", Conv { cin: 3, cout: 32 }),
        ("s.e2", Conv { cin: 32, cout: 64 }),
        ("s.e3", Conv { cin: 64, cout: 128 }),
        ("s.e4", Conv { cin: 128, cout: 256 }),
        ("s.d1", Linear { fan_in: 4096, fan_out: 128 }),
        ("s.d2", Linear { fan_in: 128, fan_out: 128 }),
        ("s.d3", Linear { fan_in: 128, fan_out: 128 }),
        ("s.d4", Linear { fan_in: 128, fan_out: 3 * NUM_POINTS }),
        ("c.e1", Conv { cin: 3, cout: 32 }),
        ("c.e2", Conv { cin: 32, cout: 64 }),
        ("c.d1", Linear { fan_in: 16384, fan_out: 128 }),
        ("c.d2", Linear { fan_in: 128, fan_out: 128 }),
        ("c.d3", Linear { fan_in: 128, fan_out: 128 }),
        ("c.d4", Linear { fan_in: 256, fan_out: 128 }),
        ("c.d5", Linear { fan_in: 128, fan_out: 3 * NUM_POINTS }),
    ]
}

fn pose_layout() -> Vec<(&'static str, Kind)> {
    use Kind::*;
    vec![
        ("e1", Conv { cin: 3, cout: 32 }),
        ("e2", Conv { cin: 32, cout: 64 }),
        ("e3", Conv { cin: 64, cout: 128 }),
        ("e4", Conv { cin: 128, cout: 256 }),
        ("d1", Linear { fan_in: 4096, fan_out: 128 }),
        ("d2", Linear { fan_in: 128, fan_out: 128 }),
        ("d3", Linear { fan_in: 128, fan_out: 128 }),
        ("d4", Linear { fan_in: 128, fan_out: 2 }),
    ]
}

const OUTPUT_LAYERS: [&str; 3] = ["s.d4", "c.d5", "d4"];

/// Uniform weights with bound `√(6 / fan_in)` on hidden layers (He, leaky-relu
/// slope ignored) and `√(3 / fan_in)` on outputs; zero biases.
fn init(layout: &[(&'static str, Kind)], rng: &mut ChaCha8Rng) -> ParamSet {
    let mut entries = Vec::new();
    for &(name, kind) in layout {
        let (wshape, fan_in, bias) = match kind {
            Kind::Conv { cin, cout } => (vec![cout, cin, 3, 3], cin * 9, cout),
            Kind::Linear { fan_in, fan_out } => (vec![fan_in, fan_out], fan_in, fan_out),
        };
        let gain = if OUTPUT_LAYERS.contains(&name) { 3.0 } else { 6.0 };
        let bound = (gain / fan_in as f64).sqrt();
        let n = wshape.iter().product();
        let w = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        entries.push((format!("{name}.w"), Tensor::new(&wshape, w).expect("layout")));
        entries.push((format!("{name}.b"), Tensor::zeros(&[bias])));
    }
    ParamSet::new(entries)
}

fn conv<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>, DiffError> {
    Ok(x.conv2d(p.get(&format!("{name}.w")), p.get(&format!("{name}.b")), 2, 1)?.leaky_relu(SLOPE))
}

fn linear<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>, DiffError> {
    x.matmul(p.get(&format!("{name}.w")))?.add(p.get(&format!("{name}.b")))
}

fn hidden<'t>(p: &Bound<'t>, name: &str, x: Var<'t>) -> Result<Var<'t>, DiffError> {
    Ok(linear(p, name, x)?.leaky_relu(SLOPE))
}

fn check_images(x: Var<'_>) -> Result<usize, DiffError> {
    let s = x.shape();
    if s.len() != 4 || s[1..] != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(DiffError::ShapeMismatch {
            op: "network input",
            lhs: s,
            rhs: vec![0, 3, IMAGE_SIZE, IMAGE_SIZE],
        });
    }
    Ok(x.shape()[0])
}

/// Flattens one `[3, H, W]` image or stacks several into a `[B, 3, H, W]` tensor.
pub fn stack_images(images: &[&Tensor]) -> Result<Tensor, DiffError> {
    let mut data = Vec::with_capacity(images.len() * 3 * IMAGE_SIZE * IMAGE_SIZE);
    for img in images {
        if img.shape() != [3, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(DiffError::ShapeMismatch {
                op: "stack_images",
                lhs: img.shape().to_vec(),
                rhs: vec![3, IMAGE_SIZE, IMAGE_SIZE],
            });
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(&[images.len(), 3, IMAGE_SIZE, IMAGE_SIZE], data)
}

/// Batched reconstruction output.
#[derive(Clone, Copy, Debug)]
pub struct ReconOutput<'t> {
    /// `[B, 1024, 3]` in `[-0.5, 0.5]`.
    pub positions: Var<'t>,
    /// `[B, 1024, 3]` in `[0, 1]`.
    pub colors: Var<'t>,
    /// `[B, 128]`, the first structure linear layer after its nonlinearity.
    pub embedding: Var<'t>,
}

impl<'t> ReconOutput<'t> {
    /// `[1024, 3]` positions of sample `b`.
    pub fn positions_of(&self, b: usize) -> Result<Var<'t>, DiffError> {
        self.positions.narrow(0, b, 1)?.reshape(&[NUM_POINTS, 3])
    }

    pub fn colors_of(&self, b: usize) -> Result<Var<'t>, DiffError> {
        self.colors.narrow(0, b, 1)?.reshape(&[NUM_POINTS, 3])
    }

    pub fn cloud_of(&self, b: usize) -> Result<PointCloud, DiffError> {
        let p = self.positions_of(b)?.value();
        let c = self.colors_of(b)?.value();
        PointCloud::from_tensors(&p, Some(&c)).map_err(|e| DiffError::Invalid {
            op: "cloud_of",
            msg: e.to_string(),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconNet {
    pub params: ParamSet,
}

impl ReconNet {
    pub fn init(seed: u64) -> Self {
        Self {
            params: init(&recon_layout(), &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    fn structure_trunk<'t>(p: &Bound<'t>, x: Var<'t>) -> Result<(Var<'t>, Var<'t>), DiffError> {
        let d1 = Self::embed_var(p, x)?;
        let d3 = hidden(p, "s.d3", hidden(p, "s.d2", d1)?)?;
        Ok((d1, d3))
    }

    /// Full forward pass on a `[B, 3, 64, 64]` batch.
    pub fn forward<'t>(p: &Bound<'t>, x: Var<'t>) -> Result<ReconOutput<'t>, DiffError> {
        let b = check_images(x)?;
        let (d1, d3) = Self::structure_trunk(p, x)?;
        let positions = linear(p, "s.d4", d3)?
            .tanh()
            .mul_scalar(0.5)
            .reshape(&[b, NUM_POINTS, 3])?;

        let mut c = x.add_scalar(-0.5);
        for name in ["c.e1", "c.e2"] {
            c = conv(p, name, c)?;
        }
        let c = hidden(p, "c.d1", c.reshape(&[b, 16384])?)?;
        let c = hidden(p, "c.d3", hidden(p, "c.d2", c)?)?;
        let joint = x.tape().concat(&[d3, c], 1)?;
        let c = hidden(p, "c.d4", joint)?;
        let colors = linear(p, "c.d5", c)?.sigmoid().reshape(&[b, NUM_POINTS, 3])?;
        Ok(ReconOutput {
            positions,
            colors,
            embedding: d1,
        })
    }

    /// Positions `[B, 1024, 3]` only; skips the color branch.
    pub fn forward_structure<'t>(p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        let b = check_images(x)?;
        let (_, d3) = Self::structure_trunk(p, x)?;
        linear(p, "s.d4", d3)?.tanh().mul_scalar(0.5).reshape(&[b, NUM_POINTS, 3])
    }

    /// Embedding only; skips the decoder heads.
    pub fn embed_var<'t>(p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        let b = check_images(x)?;
        hidden(p, "s.d1", Self::encode(p, x)?.reshape(&[b, 4096])?)
    }

    fn encode<'t>(p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>, DiffError> {
        let mut h = x.add_scalar(-0.5);
        for name in ["s.e1", "s.e2", "s.e3", "s.e4"] {
            h = conv(p, name, h)?;
        }
        Ok(h)
    }

    /// Embeddings of a batch of `[3, 64, 64]` images, one row each.
    pub fn embed(&self, images: &[&Tensor]) -> Result<Vec<Vec<f64>>, DiffError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let e = Self::embed_var(&p, tape.constant(stack_images(images)?))?.value();
        Ok(e.data().chunks(EMBEDDING_DIM).map(<[f64]>::to_vec).collect())
    }

    /// Non-differentiable reconstruction of one image.
    pub fn reconstruct(&self, image: &Tensor) -> Result<PointCloud, DiffError> {
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        Self::forward(&p, tape.constant(stack_images(&[image])?))?.cloud_of(0)
    }
}

/// Batched pose output in degrees, each `[B]`.
#[derive(Clone, Copy, Debug)]
pub struct PoseOutput<'t> {
    pub azimuth: Var<'t>,
    pub elevation: Var<'t>,
}

impl<'t> PoseOutput<'t> {
    /// Scalar-shaped `[1]` azimuth and elevation of sample `b`.
    pub fn of(&self, b: usize) -> Result<(Var<'t>, Var<'t>), DiffError> {
        Ok((self.azimuth.narrow(0, b, 1)?, self.elevation.narrow(0, b, 1)?))
    }

    pub fn viewpoint(&self, b: usize) -> Viewpoint {
        Viewpoint::new(self.azimuth.value().data()[b], self.elevation.value().data()[b])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseNet {
    pub params: ParamSet,
    pub range: ViewSampler,
}

impl PoseNet {
    pub fn init(seed: u64) -> Self {
        Self {
            params: init(&pose_layout(), &mut ChaCha8Rng::seed_from_u64(seed)),
            range: ViewSampler::default(),
        }
    }

    pub fn forward<'t>(p: &Bound<'t>, range: &ViewSampler, x: Var<'t>) -> Result<PoseOutput<'t>, DiffError> {
        let b = check_images(x)?;
        let mut h = x.add_scalar(-0.5);
        for name in ["e1", "e2", "e3", "e4"] {
            h = conv(p, name, h)?;
        }
        let h = hidden(p, "d1", h.reshape(&[b, 4096])?)?;
        let h = hidden(p, "d3", hidden(p, "d2", h)?)?;
        let o = linear(p, "d4", h)?.tanh();
        let azimuth = o.narrow(1, 0, 1)?.add_scalar(1.0).mul_scalar(180.0).reshape(&[b])?;
        let elevation = o
            .narrow(1, 1, 1)?
            .mul_scalar(range.half_range())
            .add_scalar(range.mid())
            .reshape(&[b])?;
        Ok(PoseOutput { azimuth, elevation })
    }

    pub fn predict(&self, images: &[&Tensor]) -> Result<Vec<Viewpoint>, DiffError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let tape = Tape::new();
        let p = self.params.bind_frozen(&tape);
        let out = Self::forward(&p, &self.range, tape.constant(stack_images(images)?))?;
        Ok((0..images.len()).map(|b| out.viewpoint(b)).collect())
    }
}

const MAGIC: &[u8; 8] = b"PRECKPT\0";
const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("config: {0}")]
    Config(#[from] serde_json::Error),
}

/// Both networks plus the configuration that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub iteration: u64,
    pub recon: ReconNet,
    pub pose: PoseNet,
    pub config: TrainConfig,
}

impl Checkpoint {
    pub fn fresh(config: &TrainConfig) -> Self {
        let mut pose = PoseNet::init(config.seed.wrapping_add(1));
        pose.range = config.view_range;
        Self {
            iteration: 0,
            recon: ReconNet::init(config.seed),
            pose,
            config: config.clone(),
        }
    }

    /// Layout: magic, u32 version, u64 iteration, u64 config length + JSON,
    /// u32 tensor count, then per tensor u32 name length + name, u32 rank,
    /// u64 extents and f64 data, all little-endian.
    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let mut out = Vec::new();
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        out.write_all(&self.iteration.to_le_bytes())?;
        let json = serde_json::to_vec(&self.config)?;
        out.write_all(&(json.len() as u64).to_le_bytes())?;
        out.write_all(&json)?;
        let tensors: Vec<(String, &Tensor)> = self
            .recon
            .params
            .entries()
            .iter()
            .map(|(n, t)| (format!("recon.{n}"), t))
            .chain(self.pose.params.entries().iter().map(|(n, t)| (format!("pose.{n}"), t)))
            .collect();
        out.write_all(&(tensors.len() as u32).to_le_bytes())?;
        for (name, t) in tensors {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(t.ndim() as u32).to_le_bytes())?;
            for &d in t.shape() {
                out.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, CheckpointError> {
        fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N], CheckpointError> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|_| CheckpointError::Corrupt("truncated".into()))?;
            Ok(b)
        }
        let r = &mut bytes;
        if &take::<8>(r)? != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = u32::from_le_bytes(take(r)?);
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let iteration = u64::from_le_bytes(take(r)?);
        let json_len = u64::from_le_bytes(take(r)?) as usize;
        if json_len > r.len() {
            return Err(CheckpointError::Corrupt("config length".into()));
        }
        let config: TrainConfig = serde_json::from_slice(&r[..json_len])?;
        *r = &r[json_len..];
        let count = u32::from_le_bytes(take(r)?);
        let (mut recon, mut pose) = (Vec::new(), Vec::new());
        for _ in 0..count {
            let len = u32::from_le_bytes(take(r)?) as usize;
            if len > r.len() {
                return Err(CheckpointError::Corrupt("name length".into()));
            }
            let name = String::from_utf8(r[..len].to_vec()).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            *r = &r[len..];
            let rank = u32::from_le_bytes(take(r)?) as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(u64::from_le_bytes(take(r)?) as usize);
            }
            let n: usize = shape.iter().product();
            if n * 8 > r.len() {
                return Err(CheckpointError::Corrupt(format!("data of {name}")));
            }
            let data = r[..n * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *r = &r[n * 8..];
            let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            if let Some(n) = name.strip_prefix("recon.") {
                recon.push((n.to_string(), t));
            } else if let Some(n) = name.strip_prefix("pose.") {
                pose.push((n.to_string(), t));
            } else {
                return Err(CheckpointError::Corrupt(format!("unknown tensor {name}")));
            }
        }
        if !r.is_empty() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }
        let expect = |layout: Vec<(&'static str, Kind)>, got: &[(String, Tensor)]| {
            let names: Vec<String> = layout
                .iter()
                .flat_map(|(n, _)| [format!("{n}.w"), format!("{n}.b")])
                .collect();
            let have: Vec<&String> = got.iter().map(|(n, _)| n).collect();
            if names.iter().collect::<Vec<_>>() != have {
                return Err(CheckpointError::Corrupt("parameter names do not match the architecture".into()));
            }
            Ok(())
        };
        expect(recon_layout(), &recon)?;
        expect(pose_layout(), &pose)?;
        Ok(Self {
            iteration,
            recon: ReconNet {
                params: ParamSet::new(recon),
            },
            pose: PoseNet {
                params: ParamSet::new(pose),
                range: config.view_range,
            },
            config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

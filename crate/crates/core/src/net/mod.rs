//! U-Net correction model: maps simulated vertex positions plus the probe
//! centre to a bounded per-vertex displacement of the top layer.
//!
//! Grids are channels-first. The 3D model sees every vertex on a
//! `[3, X, Y, Z]` grid; the 2D model sees only the top layer on `[3, X, Y]`.
//! Vertex grids are zero-padded up to multiples of 4 so that two 2× pools
//! divide evenly; padded cells are ignored when the correction is applied.

mod rollout;
mod train;

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softcorr_autodiff::{ConvSpec, ParamSet, Tape, Tensor, Var};

use crate::error::{io_err, parse_err, Error, Result};
use crate::mesh::TetMesh;

pub use rollout::{evaluate_rollout, Feedback, RolloutFrame, RolloutReport};
pub use train::{frame_loss, train, EarlyStopping, LossGrad, TrainConfig, TrainReport, TrainSample};

pub const ENCODER_FEATURES: [usize; 3] = [64, 128, 256];

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    /// 2 (top layer) or 3 (whole mesh).
    pub dimensionality: usize,
    pub encoder_features: [usize; 3],
    pub convs_per_block: usize,
    pub pool_kernel: usize,
    pub bottleneck_extra_convs: usize,
    pub kinematics_dim: usize,
    /// Unpadded vertex grid.
    pub vertex_shape: Vec<usize>,
    /// Padded spatial grid.
    pub grid_shape: Vec<usize>,
    /// Per-axis vertex spacing (mm).
    pub voxel_spacing: [f64; 3],
    pub clamp_fraction: f64,
}

fn pad4(n: usize) -> usize {
    n.div_ceil(4) * 4
}

impl UNetConfig {
    /// Configuration for `mesh` with grids padded to multiples of 4.
    pub fn for_mesh(mesh: &TetMesh<f64>, dimensionality: usize, clamp_fraction: f64) -> Result<Self> {
        let [nx, ny, nz] = mesh.dims();
        let vertex_shape = match dimensionality {
            2 => vec![nx, ny],
            3 => vec![nx, ny, nz],
            d => return Err(Error::Config(format!("network dimensionality must be 2 or 3, got {d}"))),
        };
        let s = mesh.spacing();
        let cfg = Self {
            dimensionality,
            encoder_features: ENCODER_FEATURES,
            convs_per_block: 2,
            pool_kernel: 2,
            bottleneck_extra_convs: 4,
            kinematics_dim: 3,
            grid_shape: vertex_shape.iter().map(|&n| pad4(n)).collect(),
            vertex_shape,
            voxel_spacing: [s.x, s.y, s.z],
            clamp_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.dimensionality != 2 && self.dimensionality != 3 {
            return bad(format!("dimensionality {} is not 2 or 3", self.dimensionality));
        }
        if self.encoder_features != ENCODER_FEATURES {
            return bad(format!("encoder features must be {ENCODER_FEATURES:?}"));
        }
        if self.convs_per_block != 2 || self.pool_kernel != 2 || self.bottleneck_extra_convs != 4 || self.kinematics_dim != 3 {
            return bad("fixed architecture: 2 convs per block, pool 2, 4 bottleneck convs, 3 kinematics values".into());
        }
        if self.grid_shape.len() != self.dimensionality || self.vertex_shape.len() != self.dimensionality {
            return bad("grid rank does not match dimensionality".into());
        }
        if self.grid_shape.iter().any(|&n| n == 0 || n % 4 != 0) {
            return bad(format!("grid shape {:?} is not divisible by 4", self.grid_shape));
        }
        if self.vertex_shape.iter().zip(&self.grid_shape).any(|(v, g)| v > g) {
            return bad("vertex grid larger than padded grid".into());
        }
        if !(self.clamp_fraction > 0.0 && self.clamp_fraction <= 1.0) {
            return bad(format!("clamp fraction {} outside (0, 1]", self.clamp_fraction));
        }
        if self.voxel_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad("voxel spacing must be positive".into());
        }
        Ok(())
    }

    /// Per-axis displacement bound.
    pub fn clamp(&self) -> [f64; 3] {
        self.voxel_spacing.map(|s| self.clamp_fraction * s)
    }

    fn cells(&self) -> usize {
        self.grid_shape.iter().product()
    }

    fn bottleneck_shape(&self) -> Vec<usize> {
        self.grid_shape.iter().map(|n| n / 4).collect()
    }
}

/// Affine map of positions into roughly `[-1, 1]³`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub center: [f64; 3],
    pub half_extent: [f64; 3],
}

impl Normalization {
    pub fn for_mesh(mesh: &TetMesh<f64>) -> Self {
        let (lo, hi) = mesh.bounds();
        let c = (lo + hi) * 0.5;
        let h = (hi - lo) * 0.5;
        Self {
            center: [c.x, c.y, c.z],
            half_extent: [h.x.max(1e-12), h.y.max(1e-12), h.z.max(1e-12)],
        }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> [f64; 3] {
        [0, 1, 2].map(|a| (p[a] - self.center[a]) / self.half_extent[a])
    }
}

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: usize,
    b: usize,
    spec: ConvSpec,
}

/// A built or loaded network with its parameters.
#[derive(Clone, Debug)]
pub struct CorrectionModel {
    pub config: UNetConfig,
    pub params: ParamSet,
    pub normalization: Normalization,
    encoder: Vec<Conv>,
    bottleneck: Vec<Conv>,
    decoder: Vec<Conv>,
    head: Conv,
}

/// Layer names and shapes in construction order.
fn layer_plan(cfg: &UNetConfig) -> Vec<(String, ConvSpec)> {
    let r = cfg.dimensionality;
    let f = cfg.encoder_features;
    let mut plan = Vec::new();
    let mut c = 3;
    for (b, &fb) in f.iter().enumerate() {
        for k in 0..cfg.convs_per_block {
            plan.push((format!("enc{b}.conv{k}"), ConvSpec::new(c, fb, r)));
            c = fb;
        }
    }
    c += cfg.kinematics_dim;
    for k in 0..cfg.bottleneck_extra_convs {
        plan.push((format!("mid.conv{k}"), ConvSpec::new(c, f[2], r)));
        c = f[2];
    }
    for b in (0..2).rev() {
        c += f[b];
        for k in 0..cfg.convs_per_block {
            plan.push((format!("dec{b}.conv{k}"), ConvSpec::new(c, f[b], r)));
            c = f[b];
        }
    }
    plan.push(("head".into(), ConvSpec::new(c, 3, r)));
    plan
}

impl CorrectionModel {
    /// Glorot-initialised network. With `zero_head` the output layer starts
    /// at zero, so the initial correction is exactly zero.
    pub fn build(config: UNetConfig, normalization: Normalization, seed: u64, zero_head: bool) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (name, spec) in layer_plan(&config) {
            params.push_conv(&name, &spec, &mut rng);
        }
        if zero_head {
            let w = params.find("head.weight").expect("head");
            params.tensor_mut(w).data_mut().fill(0.0);
        }
        Self::from_params(config, normalization, params)
    }

    fn from_params(config: UNetConfig, normalization: Normalization, params: ParamSet) -> Result<Self> {
        let mut convs = Vec::new();
        for (name, spec) in layer_plan(&config) {
            let find = |suffix: &str| -> Result<usize> {
                let n = format!("{name}.{suffix}");
                params.find(&n).ok_or_else(|| Error::Config(format!("weights lack {n}")))
            };
            let (w, b) = (find("weight")?, find("bias")?);
            if params.tensor(w).shape() != spec.weight_shape().as_slice() || params.tensor(b).shape() != spec.bias_shape().as_slice() {
                return Err(Error::Shape(format!("parameter {name} has the wrong shape")));
            }
            convs.push(Conv { w, b, spec });
        }
        let n_enc = 3 * config.convs_per_block;
        let n_mid = config.bottleneck_extra_convs;
        let head = convs.pop().expect("head");
        let decoder = convs.split_off(n_enc + n_mid);
        let bottleneck = convs.split_off(n_enc);
        Ok(Self {
            config,
            params,
            normalization,
            encoder: convs,
            bottleneck,
            decoder,
            head,
        })
    }

    /// Pack vertex positions into the padded input grid.
    pub fn encode_input(&self, mesh: &TetMesh<f64>, positions: &[Vector3<f64>]) -> Result<Tensor> {
        self.check_mesh(mesh, positions.len())?;
        let mut shape = vec![3];
        shape.extend_from_slice(&self.config.grid_shape);
        let mut t = Tensor::zeros(&shape);
        let cells = self.config.cells();
        let data = t.data_mut();
        for (v, cell) in self.vertex_cells(mesh) {
            let n = self.normalization.apply(&positions[v]);
            for a in 0..3 {
                data[a * cells + cell] = n[a];
            }
        }
        Ok(t)
    }

    fn check_mesh(&self, mesh: &TetMesh<f64>, n: usize) -> Result<()> {
        let d = mesh.dims();
        if self.config.vertex_shape[..] != d[..self.config.dimensionality] || n != mesh.vertex_count() {
            return Err(Error::Shape(format!(
                "model expects a {:?} vertex grid, got mesh {:?} with {n} positions",
                self.config.vertex_shape, d
            )));
        }
        Ok(())
    }

    /// `(vertex id, grid cell)` for every vertex the network sees.
    pub fn vertex_cells(&self, mesh: &TetMesh<f64>) -> Vec<(usize, usize)> {
        let [nx, ny, nz] = mesh.dims();
        let g = &self.config.grid_shape;
        let mut out = Vec::new();
        if self.config.dimensionality == 2 {
            for j in 0..ny {
                for i in 0..nx {
                    out.push((mesh.vertex_id(i, j, nz - 1), i * g[1] + j));
                }
            }
        } else {
            for k in 0..nz {
                for j in 0..ny {
                    for i in 0..nx {
                        out.push((mesh.vertex_id(i, j, k), (i * g[1] + j) * g[2] + k));
                    }
                }
            }
        }
        out
    }

    /// `(vertex id, grid cell)` for the top-layer vertices only.
    pub fn top_cells(&self, mesh: &TetMesh<f64>) -> Vec<(usize, usize)> {
        self.vertex_cells(mesh).into_iter().filter(|&(v, _)| mesh.is_top(v)).collect()
    }

    /// Record the forward pass on `tape`; returns the `[3, grid..]`
    /// displacement node.
    pub fn forward_tape<'p>(&'p self, tape: &mut Tape<'p>, input: Tensor, probe: &Vector3<f64>) -> Result<Var> {
        let relu_conv = |tape: &mut Tape<'p>, x: Var, c: &Conv| -> Result<Var> {
            let w = tape.param(&self.params, c.w);
            let b = tape.param(&self.params, c.b);
            let y = tape.conv(x, w, b, c.spec)?;
            Ok(tape.relu(y)?)
        };
        let per_block = self.config.convs_per_block;
        let mut x = tape.leaf(input)?;
        let mut skips = Vec::new();
        for (b, block) in self.encoder.chunks(per_block).enumerate() {
            for c in block {
                x = relu_conv(tape, x, c)?;
            }
            if b < 2 {
                skips.push(x);
                x = tape.maxpool(x)?;
            }
        }
        let kin = Tensor::from_vec(&[3], self.normalization.apply(probe).to_vec())?;
        let kin = tape.leaf(kin)?;
        let kin = tape.broadcast(kin, &self.config.bottleneck_shape())?;
        x = tape.concat(&[x, kin])?;
        for c in &self.bottleneck {
            x = relu_conv(tape, x, c)?;
        }
        for (block, skip) in self.decoder.chunks(per_block).zip(skips.into_iter().rev()) {
            let target = tape.value(skip).spatial().to_vec();
            x = tape.upsample(x, &target)?;
            x = tape.concat(&[x, skip])?;
            for c in block {
                x = relu_conv(tape, x, c)?;
            }
        }
        let w = tape.param(&self.params, self.head.w);
        let b = tape.param(&self.params, self.head.b);
        let y = tape.conv(x, w, b, self.head.spec)?;
        let y = tape.tanh(y)?;
        Ok(tape.scale_channels(y, &self.config.clamp())?)
    }

    /// Displacement grid for one frame.
    pub fn forward(&self, mesh: &TetMesh<f64>, positions: &[Vector3<f64>], probe: &Vector3<f64>) -> Result<Tensor> {
        let input = self.encode_input(mesh, positions)?;
        let mut tape = Tape::new();
        let out = self.forward_tape(&mut tape, input, probe)?;
        Ok(tape.value(out).clone())
    }

    /// Simulated positions with the top layer displaced by the network.
    pub fn correct(&self, mesh: &TetMesh<f64>, positions: &[Vector3<f64>], probe: &Vector3<f64>) -> Result<Vec<Vector3<f64>>> {
        let d = self.forward(mesh, positions, probe)?;
        apply_correction(self, mesh, positions, &d)
    }

    /// Write the weights to `path` and the configuration to `path` with a
    /// `.cfg` extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(io_err(path))?;
        self.params.write_to(std::io::BufWriter::new(file))?;
        let c = &self.config;
        let n = &self.normalization;
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let joinf = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut s = String::from("# correction network\n");
        writeln!(s, "dimensionality = {}", c.dimensionality).unwrap();
        writeln!(s, "vertex_shape = {}", join(&c.vertex_shape)).unwrap();
        writeln!(s, "grid_shape = {}", join(&c.grid_shape)).unwrap();
        writeln!(s, "voxel_spacing = {}", joinf(&c.voxel_spacing)).unwrap();
        writeln!(s, "clamp_fraction = {}", c.clamp_fraction).unwrap();
        writeln!(s, "center = {}", joinf(&n.center)).unwrap();
        writeln!(s, "half_extent = {}", joinf(&n.half_extent)).unwrap();
        let cfg = path.with_extension("cfg");
        std::fs::write(&cfg, s).map_err(io_err(&cfg))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg_path = path.with_extension("cfg");
        let text = std::fs::read_to_string(&cfg_path).map_err(io_err(&cfg_path))?;
        let kv: std::collections::HashMap<&str, &str> = text
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim(), v.trim())))
            .collect();
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| parse_err(&cfg_path, format!("missing {k}")));
        let list = |k: &str| -> Result<Vec<f64>> {
            get(k)?
                .split(',')
                .map(|x| x.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| parse_err(&cfg_path, format!("bad {k}")))
        };
        let arr3 = |k: &str| -> Result<[f64; 3]> { list(k)?.try_into().map_err(|_| parse_err(&cfg_path, format!("{k} needs 3 values"))) };
        let config = UNetConfig {
            dimensionality: get("dimensionality")?.parse().map_err(|_| parse_err(&cfg_path, "bad dimensionality"))?,
            encoder_features: ENCODER_FEATURES,
            convs_per_block: 2,
            pool_kernel: 2,
            bottleneck_extra_convs: 4,
            kinematics_dim: 3,
            vertex_shape: list("vertex_shape")?.into_iter().map(|x| x as usize).collect(),
            grid_shape: list("grid_shape")?.into_iter().map(|x| x as usize).collect(),
            voxel_spacing: arr3("voxel_spacing")?,
            clamp_fraction: get("clamp_fraction")?.parse().map_err(|_| parse_err(&cfg_path, "bad clamp_fraction"))?,
        };
        config.validate()?;
        let normalization = Normalization {
            center: arr3("center")?,
            half_extent: arr3("half_extent")?,
        };
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        let params = ParamSet::read_from(std::io::BufReader::new(file))?;
        Self::from_params(config, normalization, params)
    }
}

/// Add the displacement at each top-layer vertex's cell; every other vertex
/// and every padded cell is ignored.
pub fn apply_correction(
    model: &CorrectionModel,
    mesh: &TetMesh<f64>,
    positions: &[Vector3<f64>],
    displacement: &Tensor,
) -> Result<Vec<Vector3<f64>>> {
    model.check_mesh(mesh, positions.len())?;
    let cells = model.config.cells();
    let mut expect = vec![3];
    expect.extend_from_slice(&model.config.grid_shape);
    if displacement.shape() != expect.as_slice() {
        return Err(Error::Shape(format!("displacement {:?}, expected {:?}", displacement.shape(), expect)));
    }
    let d = displacement.data();
    let mut out = positions.to_vec();
    for (v, cell) in model.top_cells(mesh) {
        out[v] += Vector3::new(d[cell], d[cells + cell], d[2 * cells + cell]);
    }
    Ok(out)
}

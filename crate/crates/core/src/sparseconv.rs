//! Forward-only sparse 3D convolution: submanifold and strided convolution,
//! the transposed (inverse) convolution used for upsampling, and a small
//! UNet-style backbone built from them.
//!
//! # Conventions
//!
//! Kernels are cubic with odd size `k`; offset `d` ranges over
//! `[-k/2, k/2]^3` and is enumerated z-major:
//! `index = ((dz + r) * k + (dy + r)) * k + (dx + r)` with `r = k / 2`.
//! Weights are laid out `(offset, in_channel, out_channel)`.
//!
//! * Submanifold: output sites are exactly the input sites;
//!   `out[o] = sum_d in[o + d] W[d]` over active neighbours.
//! * Strided: output sites are the distinct `floor(c / stride)` images of
//!   the input sites; `out[o] = sum_d in[stride * o + d] W[d]`. This is a
//!   dense zero-padded convolution restricted to the coarsened occupancy.
//! * Transposed: the pairs of the strided rulebook reversed, scattering
//!   coarse features onto a caller-supplied fine active set.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxel::SparseTensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kernel: usize,
    pub stride: [usize; 3],
    pub submanifold: bool,
    pub in_channels: usize,
    pub out_channels: usize,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
}

impl ConvSpec {
    pub fn submanifold(kernel: usize, in_channels: usize, out_channels: usize, weights: Vec<f32>) -> Self {
        Self { kernel, stride: [1; 3], submanifold: true, in_channels, out_channels, weights, bias: None }
    }

    pub fn strided(kernel: usize, stride: [usize; 3], in_channels: usize, out_channels: usize, weights: Vec<f32>) -> Self {
        Self { kernel, stride, submanifold: false, in_channels, out_channels, weights, bias: None }
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn num_offsets(&self) -> usize {
        self.kernel.pow(3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!("kernel size {} must be odd", self.kernel)));
        }
        if self.stride.contains(&0) {
            return Err(Error::InvalidConfig("stride must be >= 1".into()));
        }
        if self.submanifold && self.stride != [1; 3] {
            return Err(Error::InvalidConfig("submanifold convolution requires stride 1".into()));
        }
        let want = self.num_offsets() * self.in_channels * self.out_channels;
        if self.weights.len() != want {
            return Err(Error::DimensionMismatch(format!(
                "{}^3 x {} x {} kernel needs {want} weights, got {}",
                self.kernel,
                self.in_channels,
                self.out_channels,
                self.weights.len()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != self.out_channels {
                return Err(Error::DimensionMismatch(format!(
                    "bias has {} entries for {} output channels",
                    b.len(),
                    self.out_channels
                )));
            }
        }
        Ok(())
    }

    /// Kernel offsets in weight order.
    pub fn offsets(&self) -> Vec<[i32; 3]> {
        kernel_offsets(self.kernel)
    }
}

pub fn kernel_offsets(kernel: usize) -> Vec<[i32; 3]> {
    let r = (kernel / 2) as i32;
    let mut v = Vec::with_capacity(kernel.pow(3));
    for dz in -r..=r {
        for dy in -r..=r {
            for dx in -r..=r {
                v.push([dx, dy, dz]);
            }
        }
    }
    v
}

/// Per-offset `(input_index, output_index)` pairs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Rulebook {
    pub pairs: Vec<Vec<(u32, u32)>>,
}

impl Rulebook {
    pub fn num_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }
}

fn lookup(coords: &[[i32; 3]], c: [i32; 3]) -> Option<usize> {
    coords.binary_search(&c).ok()
}

fn coarse_dims(dims: [usize; 3], stride: [usize; 3]) -> [usize; 3] {
    [0, 1, 2].map(|a| dims[a].div_ceil(stride[a]))
}

/// Rulebook and output coordinates (sorted) for a forward convolution.
pub fn build_rulebook(input: &SparseTensor, spec: &ConvSpec) -> (Rulebook, Vec<[i32; 3]>) {
    let offsets = spec.offsets();
    let out_coords: Vec<[i32; 3]> = if spec.submanifold {
        input.coords.clone()
    } else {
        let s = spec.stride.map(|v| v as i32);
        let mut c: Vec<[i32; 3]> = input
            .coords
            .iter()
            .map(|p| [p[0].div_euclid(s[0]), p[1].div_euclid(s[1]), p[2].div_euclid(s[2])])
            .collect();
        c.sort_unstable();
        c.dedup();
        c
    };
    let s = spec.stride.map(|v| v as i32);
    let mut pairs = vec![Vec::new(); offsets.len()];
    for (o, oc) in out_coords.iter().enumerate() {
        let base = [oc[0] * s[0], oc[1] * s[1], oc[2] * s[2]];
        for (k, d) in offsets.iter().enumerate() {
            let src = [base[0] + d[0], base[1] + d[1], base[2] + d[2]];
            if let Some(i) = lookup(&input.coords, src) {
                pairs[k].push((i as u32, o as u32));
            }
        }
    }
    (Rulebook { pairs }, out_coords)
}

fn gather_scatter(
    input: &SparseTensor,
    spec: &ConvSpec,
    rulebook: &Rulebook,
    n_out: usize,
) -> Vec<f32> {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let mut acc = vec![0.0f64; n_out * cout];
    if let Some(b) = &spec.bias {
        for row in acc.chunks_exact_mut(cout) {
            for (a, v) in row.iter_mut().zip(b) {
                *a = *v as f64;
            }
        }
    }
    for (k, pairs) in rulebook.pairs.iter().enumerate() {
        let w = &spec.weights[k * cin * cout..(k + 1) * cin * cout];
        for &(i, o) in pairs {
            let x = input.feature(i as usize);
            let dst = &mut acc[o as usize * cout..(o as usize + 1) * cout];
            for (ci, &xv) in x.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let xv = xv as f64;
                let wrow = &w[ci * cout..(ci + 1) * cout];
                for (a, &wv) in dst.iter_mut().zip(wrow) {
                    *a += xv * wv as f64;
                }
            }
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

pub fn conv_forward(input: &SparseTensor, spec: &ConvSpec) -> Result<SparseTensor> {
    spec.validate()?;
    if input.channels != spec.in_channels {
        return Err(Error::ChannelMismatch { expected: spec.in_channels, actual: input.channels });
    }
    let (rulebook, out_coords) = build_rulebook(input, spec);
    let features = gather_scatter(input, spec, &rulebook, out_coords.len());
    let dims = if spec.submanifold { input.dims } else { coarse_dims(input.dims, spec.stride) };
    Ok(SparseTensor { dims, channels: spec.out_channels, coords: out_coords, features })
}

/// Transposed convolution onto the fine active set `target` (sorted, unique)
/// of a grid with `target_dims`. Coarse site `o` reaches fine site
/// `t = stride * o + d` through offset `d`.
pub fn deconv_forward(
    input: &SparseTensor,
    spec: &ConvSpec,
    target: &[[i32; 3]],
    target_dims: [usize; 3],
) -> Result<SparseTensor> {
    spec.validate()?;
    if input.channels != spec.in_channels {
        return Err(Error::ChannelMismatch { expected: spec.in_channels, actual: input.channels });
    }
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let s = spec.stride.map(|v| v as i32);
    let offsets = spec.offsets();
    let mut pairs = vec![Vec::new(); offsets.len()];
    for (t, tc) in target.iter().enumerate() {
        for (k, d) in offsets.iter().enumerate() {
            let num = [tc[0] - d[0], tc[1] - d[1], tc[2] - d[2]];
            if (0..3).any(|a| num[a].rem_euclid(s[a]) != 0) {
                continue;
            }
            let oc = [num[0] / s[0], num[1] / s[1], num[2] / s[2]];
            if let Some(i) = lookup(&input.coords, oc) {
                pairs[k].push((i as u32, t as u32));
            }
        }
    }
    let rulebook = Rulebook { pairs };
    let features = gather_scatter(input, spec, &rulebook, target.len());
    let mut coords = target.to_vec();
    coords.sort_unstable();
    if coords != target {
        return Err(Error::DimensionMismatch("target coordinates must be sorted and unique".into()));
    }
    Ok(SparseTensor { dims: target_dims, channels: spec.out_channels, coords, features })
}

pub fn relu(t: &mut SparseTensor) {
    for v in &mut t.features {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Channel concatenation of two tensors on the same active set.
pub fn concat_channels(a: &SparseTensor, b: &SparseTensor) -> Result<SparseTensor> {
    if a.coords != b.coords {
        return Err(Error::DimensionMismatch("concatenated tensors must share coordinates".into()));
    }
    let mut features = Vec::with_capacity(a.features.len() + b.features.len());
    for i in 0..a.len() {
        features.extend_from_slice(a.feature(i));
        features.extend_from_slice(b.feature(i));
    }
    Ok(SparseTensor { dims: a.dims, channels: a.channels + b.channels, coords: a.coords.clone(), features })
}

// ---------------------------------------------------------------------------
// Backbone

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channel width per encoder level; every level after the first starts
    /// with a stride-2 convolution.
    pub encoder: Vec<usize>,
    /// Width of each decoder block, deepest level first.
    pub decoder: Vec<usize>,
    /// Feature width `D` of the height-collapsed BEV volume.
    pub bev_channels: usize,
    pub subm_per_level: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            encoder: vec![16, 32, 64, 64],
            decoder: vec![64, 64, 32, 16],
            bev_channels: 64,
            subm_per_level: 2,
        }
    }
}

/// Shape of one backbone layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub kernel: usize,
    pub stride: [usize; 3],
    pub submanifold: bool,
    pub transposed: bool,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LayerShape {
    fn new(name: String, kernel: usize, stride: [usize; 3], submanifold: bool, transposed: bool, cin: usize, cout: usize) -> Self {
        Self { name, kernel, stride, submanifold, transposed, in_channels: cin, out_channels: cout }
    }

    pub fn num_weights(&self) -> usize {
        self.kernel.pow(3) * self.in_channels * self.out_channels
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder.is_empty() || self.encoder.len() != self.decoder.len() {
            return Err(Error::InvalidConfig(format!(
                "encoder ({}) and decoder ({}) need the same non-zero number of levels",
                self.encoder.len(),
                self.decoder.len()
            )));
        }
        if self.in_channels == 0 || self.bev_channels == 0 || self.encoder.contains(&0) || self.decoder.contains(&0) {
            return Err(Error::InvalidConfig("channel widths must be positive".into()));
        }
        Ok(())
    }

    /// Total stride of the deepest encoder level along x and y.
    pub fn downsample(&self) -> usize {
        1 << (self.encoder.len() - 1)
    }

    /// All layers in execution order.
    pub fn layers(&self) -> Vec<LayerShape> {
        let n = self.encoder.len();
        let mut v = Vec::new();
        let mut c = self.in_channels;
        for (lvl, &w) in self.encoder.iter().enumerate() {
            if lvl > 0 {
                v.push(LayerShape::new(format!("enc{lvl}.down"), 3, [2; 3], false, false, c, w));
                c = w;
            }
            for s in 0..self.subm_per_level {
                v.push(LayerShape::new(format!("enc{lvl}.subm{s}"), 3, [1; 3], true, false, c, w));
                c = w;
            }
        }
        v.push(LayerShape::new("bev.down".into(), 3, [1, 1, 2], false, false, c, self.bev_channels));

        let mut x = self.encoder[n - 1];
        for (b, &w) in self.decoder.iter().enumerate() {
            let lvl = n - 1 - b;
            let skip = self.encoder[lvl];
            v.push(LayerShape::new(format!("dec{lvl}.fuse"), 1, [1; 3], true, false, x + skip, w));
            v.push(LayerShape::new(format!("dec{lvl}.subm"), 3, [1; 3], true, false, w, w));
            if lvl > 0 {
                let next = self.decoder[b + 1];
                v.push(LayerShape::new(format!("dec{lvl}.up"), 3, [2; 3], false, true, w, next));
                x = next;
            } else {
                v.push(LayerShape::new("dec0.out".into(), 3, [1; 3], true, false, w, w));
            }
        }
        v
    }

    pub fn output_channels(&self) -> usize {
        *self.decoder.last().unwrap()
    }
}

/// Weights of one layer: `(offset, in, out)` kernel plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub shape: LayerShape,
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl LayerWeights {
    pub fn conv_spec(&self) -> ConvSpec {
        ConvSpec {
            kernel: self.shape.kernel,
            stride: self.shape.stride,
            submanifold: self.shape.submanifold,
            in_channels: self.shape.in_channels,
            out_channels: self.shape.out_channels,
            weights: self.weights.clone(),
            bias: Some(self.bias.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneWeights {
    pub layers: Vec<LayerWeights>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub dtype: String,
    pub layers: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    #[serde(flatten)]
    pub shape: LayerShape,
    /// Float offsets (not bytes) of the kernel and bias in the blob.
    pub weights_offset: usize,
    pub bias_offset: usize,
}

impl BackboneWeights {
    /// Uniform He-style initialization from a seeded generator.
    pub fn seeded(cfg: &BackboneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = cfg
            .layers()
            .into_iter()
            .map(|shape| {
                let fan_in = (shape.kernel.pow(3) * shape.in_channels) as f64;
                let a = (3.0 / fan_in).sqrt() as f32;
                let weights = (0..shape.num_weights()).map(|_| rng.random_range(-a..a)).collect();
                let bias = (0..shape.out_channels).map(|_| rng.random_range(-0.05f32..0.05)).collect();
                LayerWeights { shape, weights, bias }
            })
            .collect();
        Self { layers }
    }

    pub fn check(&self, cfg: &BackboneConfig) -> Result<()> {
        let want = cfg.layers();
        if want.len() != self.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "config has {} layers, weights have {}",
                want.len(),
                self.layers.len()
            )));
        }
        for (w, l) in want.iter().zip(&self.layers) {
            if *w != l.shape {
                return Err(Error::InvalidConfig(format!("layer {} does not match config: {:?}", w.name, l.shape)));
            }
            if l.weights.len() != w.num_weights() || l.bias.len() != w.out_channels {
                return Err(Error::DimensionMismatch(format!("layer {} has wrong weight count", w.name)));
            }
        }
        Ok(())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerWeights> {
        self.layers.iter().find(|l| l.shape.name == name)
    }

    /// Writes the little-endian f32 blob and returns its manifest.
    pub fn write<W: Write>(&self, mut out: W) -> Result<WeightManifest> {
        let mut offset = 0;
        let mut entries = Vec::new();
        for l in &self.layers {
            let mut buf = Vec::with_capacity((l.weights.len() + l.bias.len()) * 4);
            for v in l.weights.iter().chain(&l.bias) {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
            entries.push(ManifestEntry {
                shape: l.shape.clone(),
                weights_offset: offset,
                bias_offset: offset + l.weights.len(),
            });
            offset += l.weights.len() + l.bias.len();
        }
        Ok(WeightManifest { dtype: "f32le".into(), layers: entries })
    }

    pub fn read(blob: &[u8], manifest: &WeightManifest) -> Result<Self> {
        if blob.len() % 4 != 0 {
            return Err(Error::Format("weight blob length is not a multiple of 4".into()));
        }
        let floats: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let layers = manifest
            .layers
            .iter()
            .map(|e| {
                let wn = e.shape.num_weights();
                let bn = e.shape.out_channels;
                if e.weights_offset + wn > floats.len() || e.bias_offset + bn > floats.len() {
                    return Err(Error::Format(format!("layer {} runs past the blob", e.shape.name)));
                }
                Ok(LayerWeights {
                    shape: e.shape.clone(),
                    weights: floats[e.weights_offset..e.weights_offset + wn].to_vec(),
                    bias: floats[e.bias_offset..e.bias_offset + bn].to_vec(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }
}

/// Height-collapsed BEV feature map: dense `nx x ny x (nz * D)`, where the
/// features of the `nz` height cells above each x-y location are
/// concatenated (channel `z * D + c`).
#[derive(Debug, Clone, PartialEq)]
pub struct BevMap {
    pub dims: [usize; 2],
    pub channels: usize,
    pub data: Vec<f32>,
    pub occupied: Vec<bool>,
}

impl BevMap {
    pub fn from_volume(t: &SparseTensor) -> Self {
        let [nx, ny, nz] = t.dims;
        let d = t.channels;
        let channels = nz * d;
        let mut data = vec![0.0; nx * ny * channels];
        let mut occupied = vec![false; nx * ny];
        for (i, c) in t.coords.iter().enumerate() {
            let cell = c[0] as usize * ny + c[1] as usize;
            let base = cell * channels + c[2] as usize * d;
            data[base..base + d].copy_from_slice(t.feature(i));
            occupied[cell] = true;
        }
        Self { dims: [nx, ny], channels, data, occupied }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.dims[0], self.dims[1], self.channels]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneOutput {
    /// Full-resolution decoder features on the input active set.
    pub point_features: SparseTensor,
    pub bev: BevMap,
    /// Encoder outputs, finest level first.
    pub encoder: Vec<SparseTensor>,
}

fn run(t: &SparseTensor, w: &LayerWeights) -> Result<SparseTensor> {
    let mut out = conv_forward(t, &w.conv_spec())?;
    relu(&mut out);
    Ok(out)
}

/// Encoder (submanifold blocks, stride-2 transitions), one z-only stride-2
/// convolution feeding the BEV map, and a decoder whose blocks fuse the
/// same-level encoder output by concatenation and a 1x1x1 convolution
/// before upsampling. Every convolution is followed by ReLU.
pub fn backbone_forward(input: &SparseTensor, cfg: &BackboneConfig, weights: &BackboneWeights) -> Result<BackboneOutput> {
    cfg.validate()?;
    weights.check(cfg)?;
    if input.channels != cfg.in_channels {
        return Err(Error::ChannelMismatch { expected: cfg.in_channels, actual: input.channels });
    }
    let get = |name: &str| {
        weights.layer(name).ok_or_else(|| Error::InvalidConfig(format!("missing layer {name}")))
    };
    let n = cfg.encoder.len();
    let mut encoder = Vec::with_capacity(n);
    let mut x = input.clone();
    for lvl in 0..n {
        if lvl > 0 {
            x = run(&x, get(&format!("enc{lvl}.down"))?)?;
        }
        for s in 0..cfg.subm_per_level {
            x = run(&x, get(&format!("enc{lvl}.subm{s}"))?)?;
        }
        encoder.push(x.clone());
    }
    let bev_volume = run(&encoder[n - 1], get("bev.down")?)?;
    let bev = BevMap::from_volume(&bev_volume);

    let mut x = encoder[n - 1].clone();
    for lvl in (0..n).rev() {
        let skip = &encoder[lvl];
        let fused = concat_channels(&x, skip)?;
        let mut y = run(&fused, get(&format!("dec{lvl}.fuse"))?)?;
        y = run(&y, get(&format!("dec{lvl}.subm"))?)?;
        if lvl > 0 {
            let up = get(&format!("dec{lvl}.up"))?;
            let fine = &encoder[lvl - 1];
            x = if y.is_empty() {
                SparseTensor::empty(fine.dims, up.shape.out_channels)
            } else {
                let mut t = deconv_forward(&y, &up.conv_spec(), &fine.coords, fine.dims)?;
                relu(&mut t);
                t
            };
        } else {
            x = run(&y, get("dec0.out")?)?;
        }
    }
    Ok(BackboneOutput { point_features: x, bev, encoder })
}

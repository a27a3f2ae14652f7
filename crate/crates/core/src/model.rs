//! SHResNet and the voxel-wise MLP baseline, assembled from [`crate::nn`].
//!
//! SHResNet maps a `[15, 3, 3, 3]` SH patch to the 15 coefficients of the
//! centre voxel:
//!
//! ```text
//! p = pre(x)                       15 → 15, pad 1
//! h = p; for each ResBlock: h = h - concat(unit_0(h), unit_2(h), unit_4(h))
//! q = post(h)                      15 → 15, pad 1
//! y = reduce(p - q)                15 → 15, pad 0  → [15, 1, 1, 1]
//! ```
//!
//! A functional unit is conv(15→H) · ReLU · conv(H→H) · ReLU · conv(H→2l+1),
//! all 3×3×3 with padding. The baseline ignores spatial context:
//! 15 → H → H → 15 with ReLU on both hidden layers.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dwi::{PATCH_CENTER, PATCH_VOXELS};
use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Graph, NdTensor, Var};
use crate::sh::n_coef;

/// Samples per forward/backward shard; fixed so results do not depend on the
/// number of worker threads.
pub const SHARD: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Shresnet,
    Golkov,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Shresnet => "shresnet",
            ModelKind::Golkov => "golkov",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shresnet" => Ok(ModelKind::Shresnet),
            "golkov" => Ok(ModelKind::Golkov),
            other => Err(Error::Invalid(format!("unknown model kind {other:?}"))),
        }
    }
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub model_kind: ModelKind,
    pub n_resblocks: usize,
    /// Width of the first two convolutions of every functional unit.
    pub hidden_channels: usize,
    /// Hidden width of the baseline MLP.
    pub golkov_hidden: usize,
    pub sh_order: usize,
    #[serde(default = "one")]
    pub pre_post_depth: usize,
    #[serde(default = "one")]
    pub reduction_depth: usize,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        Self {
            model_kind: ModelKind::Shresnet,
            n_resblocks: 2,
            hidden_channels: 32,
            golkov_hidden: 150,
            sh_order: 4,
            pre_post_depth: 1,
            reduction_depth: 1,
        }
    }
}

impl NetworkSpec {
    pub fn shresnet(n_resblocks: usize, hidden_channels: usize) -> Self {
        Self {
            n_resblocks,
            hidden_channels,
            ..Self::default()
        }
    }

    pub fn golkov(hidden: usize) -> Self {
        Self {
            model_kind: ModelKind::Golkov,
            golkov_hidden: hidden,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sh_order % 2 != 0 {
            return Err(Error::Invalid(format!("SH order {} is odd", self.sh_order)));
        }
        match self.model_kind {
            ModelKind::Shresnet => {
                if self.n_resblocks == 0 {
                    return Err(Error::Invalid("need at least one ResBlock".into()));
                }
                if self.hidden_channels == 0 || self.pre_post_depth == 0 || self.reduction_depth == 0 {
                    return Err(Error::Invalid("layer widths and depths must be positive".into()));
                }
            }
            ModelKind::Golkov => {
                if self.golkov_hidden == 0 {
                    return Err(Error::Invalid("MLP hidden width must be positive".into()));
                }
            }
        }
        Ok(())
    }

    pub fn n_coef(&self) -> usize {
        n_coef(self.sh_order)
    }

    /// Output width per SH order: 1, 5, 9, ...
    pub fn order_sizes(&self) -> Vec<usize> {
        (0..=self.sh_order).step_by(2).map(|l| 2 * l + 1).collect()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn arch_hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("spec serializes");
        Sha256::digest(&json).into()
    }

    /// `(name, shape)` of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.n_coef();
        let mut out = Vec::new();
        let mut conv = |name: String, cin: usize, cout: usize| {
            out.push((format!("{name}.weight"), vec![cout, cin, 3, 3, 3]));
            out.push((format!("{name}.bias"), vec![cout]));
        };
        match self.model_kind {
            ModelKind::Shresnet => {
                let h = self.hidden_channels;
                for i in 0..self.pre_post_depth {
                    conv(format!("pre.{i}"), c, c);
                }
                for b in 0..self.n_resblocks {
                    for (l, k) in (0..=self.sh_order).step_by(2).zip(self.order_sizes()) {
                        let unit = format!("block.{b}.unit{l}");
                        conv(format!("{unit}.conv0"), c, h);
                        conv(format!("{unit}.conv1"), h, h);
                        conv(format!("{unit}.conv2"), h, k);
                    }
                }
                for i in 0..self.pre_post_depth {
                    conv(format!("post.{i}"), c, c);
                }
                for i in 0..self.reduction_depth {
                    conv(format!("reduce.{i}"), c, c);
                }
            }
            ModelKind::Golkov => {
                let h = self.golkov_hidden;
                for (i, (din, dout)) in [(c, h), (h, h), (h, c)].into_iter().enumerate() {
                    out.push((format!("fc{i}.weight"), vec![dout, din]));
                    out.push((format!("fc{i}.bias"), vec![dout]));
                }
            }
        }
        out
    }
}

/// Architecture descriptor stored next to a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    #[serde(flatten)]
    pub spec: NetworkSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub spec: NetworkSpec,
    pub seed: u64,
    pub names: Vec<String>,
    pub tensors: Vec<NdTensor>,
}

impl NetworkParams {
    /// Kaiming-uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
    ///
    /// SHResNet starts as the identity map on the centre voxel: single-layer
    /// pre and reduction convs are Dirac kernels, the post conv and the last
    /// conv of every functional unit are zero. Only the hidden convs of the
    /// functional units are random.
    pub fn build(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in spec.layout() {
            let mut t = NdTensor::zeros(&shape);
            if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = (6.0 / fan_in as f64).sqrt();
                for w in t.data_mut() {
                    *w = rng.random_range(-bound..bound);
                }
            }
            names.push(name);
            tensors.push(t);
        }
        let mut p = Self {
            spec,
            seed,
            names,
            tensors,
        };
        if p.spec.model_kind == ModelKind::Shresnet {
            p.identity_start();
        }
        Ok(p)
    }

    fn identity_start(&mut self) {
        let c = self.spec.n_coef();
        let last_post = format!("post.{}.weight", self.spec.pre_post_depth - 1);
        let mut dirac = Vec::new();
        if self.spec.pre_post_depth == 1 {
            dirac.push("pre.0.weight".to_string());
        }
        if self.spec.reduction_depth == 1 {
            dirac.push("reduce.0.weight".to_string());
        }
        for (name, t) in self.names.iter().zip(&mut self.tensors) {
            if name == &last_post || name.ends_with(".conv2.weight") {
                t.data_mut().iter_mut().for_each(|w| *w = 0.0);
            } else if dirac.contains(name) {
                let w = t.data_mut();
                w.iter_mut().for_each(|v| *v = 0.0);
                for ch in 0..c {
                    w[(ch * c + ch) * PATCH_VOXELS + PATCH_CENTER] = 1.0;
                }
            }
        }
    }

    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let (names, tensors) = spec
            .layout()
            .into_iter()
            .map(|(n, s)| (n, NdTensor::zeros(&s)))
            .unzip();
        Ok(Self {
            spec,
            seed: 0,
            names,
            tensors,
        })
    }

    /// Hand-set weights whose output is the centre voxel's coefficients.
    ///
    /// SHResNet: identity pre-conv, zero ResBlocks and post-conv, centre-tap
    /// reduction. Baseline: `[I; -I]` split through the ReLUs (needs a hidden
    /// width of at least twice the coefficient count).
    pub fn identity(spec: NetworkSpec) -> Result<Self> {
        let mut p = Self::zeros(spec)?;
        let c = p.spec.n_coef();
        match p.spec.model_kind {
            ModelKind::Shresnet => {
                if p.spec.pre_post_depth != 1 || p.spec.reduction_depth != 1 {
                    return Err(Error::Invalid(
                        "identity network needs single pre/post/reduction layers".into(),
                    ));
                }
                for name in ["pre.0.weight", "reduce.0.weight"] {
                    let w = p.get_mut(name).expect("layer exists");
                    for ch in 0..c {
                        w.data_mut()[(ch * c + ch) * PATCH_VOXELS + PATCH_CENTER] = 1.0;
                    }
                }
            }
            ModelKind::Golkov => {
                let h = p.spec.golkov_hidden;
                if h < 2 * c {
                    return Err(Error::Invalid(format!(
                        "identity MLP needs hidden width >= {}",
                        2 * c
                    )));
                }
                let w0 = p.get_mut("fc0.weight").unwrap().data_mut();
                for i in 0..c {
                    w0[i * c + i] = 1.0;
                    w0[(c + i) * c + i] = -1.0;
                }
                let w1 = p.get_mut("fc1.weight").unwrap().data_mut();
                for i in 0..2 * c {
                    w1[i * h + i] = 1.0;
                }
                let w2 = p.get_mut("fc2.weight").unwrap().data_mut();
                for i in 0..c {
                    w2[i * h + i] = 1.0;
                    w2[i * h + c + i] = -1.0;
                }
            }
        }
        Ok(p)
    }

    pub fn get(&self, name: &str) -> Option<&NdTensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut NdTensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(NdTensor::len).sum()
    }

    /// Registers every parameter on `g` as a gradient-collecting leaf.
    pub fn attach(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.param(t.clone())).collect()
    }

    /// Registers every parameter as a constant (inference).
    pub fn attach_frozen(&self, g: &mut Graph) -> Vec<Var> {
        self.tensors.iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Network input for `n` flattened `[15, 3, 3, 3]` patches: the patches
    /// themselves for SHResNet, the centre vectors `[n, 15]` for the baseline.
    pub fn input_tensor(&self, patches: &[f64], n: usize) -> Result<NdTensor> {
        let c = self.spec.n_coef();
        let plen = c * PATCH_VOXELS;
        if patches.len() != n * plen {
            return Err(Error::Shape(format!(
                "{} values is not {n} patches of [{c}, 3, 3, 3]",
                patches.len()
            )));
        }
        match self.spec.model_kind {
            ModelKind::Shresnet => NdTensor::new(vec![n, c, 3, 3, 3], patches.to_vec()),
            ModelKind::Golkov => {
                let mut centers = Vec::with_capacity(n * c);
                for p in patches.chunks_exact(plen) {
                    centers.extend((0..c).map(|ch| p[ch * PATCH_VOXELS + PATCH_CENTER]));
                }
                NdTensor::new(vec![n, c], centers)
            }
        }
    }

    /// Builds the forward pass on `g`; returns `[N, 15]`.
    pub fn forward_graph(&self, g: &mut Graph, params: &[Var], input: Var) -> Result<Var> {
        if params.len() != self.tensors.len() {
            return Err(Error::Shape("parameter handle count mismatch".into()));
        }
        let mut cur = Cursor { params, pos: 0 };
        match self.spec.model_kind {
            ModelKind::Shresnet => self.shresnet_graph(g, &mut cur, input),
            ModelKind::Golkov => {
                let mut h = input;
                for layer in 0..3 {
                    let (w, b) = cur.next_pair();
                    h = g.linear(h, w, b)?;
                    if layer < 2 {
                        h = g.relu(h);
                    }
                }
                Ok(h)
            }
        }
    }

    fn shresnet_graph(&self, g: &mut Graph, cur: &mut Cursor<'_>, x: Var) -> Result<Var> {
        let s = &self.spec;
        let shape = g.shape(x).to_vec();
        if shape.len() != 5 || shape[1..] != [s.n_coef(), 3, 3, 3] {
            return Err(Error::Shape(format!(
                "SHResNet input must be [N, {}, 3, 3, 3], got {shape:?}",
                s.n_coef()
            )));
        }
        let batch = shape[0];
        let stack = |g: &mut Graph, cur: &mut Cursor<'_>, mut h: Var, depth: usize| -> Result<Var> {
            for i in 0..depth {
                let (w, b) = cur.next_pair();
                h = g.conv3d(h, w, b, 1)?;
                if i + 1 < depth {
                    h = g.relu(h);
                }
            }
            Ok(h)
        };
        let pre = stack(g, cur, x, s.pre_post_depth)?;
        let mut h = pre;
        for _ in 0..s.n_resblocks {
            let mut outs = Vec::with_capacity(s.order_sizes().len());
            for _ in s.order_sizes() {
                let mut u = h;
                for j in 0..3 {
                    let (w, b) = cur.next_pair();
                    u = g.conv3d(u, w, b, 1)?;
                    if j < 2 {
                        u = g.relu(u);
                    }
                }
                outs.push(u);
            }
            let cat = g.concat(&outs)?;
            h = g.sub(h, cat)?;
        }
        let post = stack(g, cur, h, s.pre_post_depth)?;
        let mut r = g.sub(pre, post)?;
        for i in 0..s.reduction_depth {
            let (w, b) = cur.next_pair();
            let last = i + 1 == s.reduction_depth;
            r = g.conv3d(r, w, b, if last { 0 } else { 1 })?;
            if !last {
                r = g.relu(r);
            }
        }
        g.reshape(r, &[batch, s.n_coef()])
    }

    /// Predicted centre coefficients for one `[15, 3, 3, 3]` patch.
    pub fn forward(&self, patch: &[f64]) -> Result<Vec<f64>> {
        self.predict(patch, 1)
    }

    /// Baseline on a bare coefficient vector.
    pub fn golkov_forward(&self, center: &[f64]) -> Result<Vec<f64>> {
        if self.spec.model_kind != ModelKind::Golkov {
            return Err(Error::Invalid("golkov_forward on a SHResNet model".into()));
        }
        let c = self.spec.n_coef();
        if center.len() != c {
            return Err(Error::Shape(format!("expected {c} coefficients, got {}", center.len())));
        }
        let mut g = Graph::new();
        let params = self.attach_frozen(&mut g);
        let x = g.constant(NdTensor::new(vec![1, c], center.to_vec())?);
        let y = self.forward_graph(&mut g, &params, x)?;
        Ok(g.value(y).data().to_vec())
    }

    /// Batched inference over `n` flattened patches; `[n, 15]` row-major.
    pub fn predict(&self, patches: &[f64], n: usize) -> Result<Vec<f64>> {
        let c = self.spec.n_coef();
        let plen = c * PATCH_VOXELS;
        if patches.len() != n * plen {
            return Err(Error::Shape(format!(
                "{} values is not {n} patches of [{c}, 3, 3, 3]",
                patches.len()
            )));
        }
        let shards: Vec<Vec<f64>> = patches
            .par_chunks(SHARD * plen)
            .map(|chunk| {
                let m = chunk.len() / plen;
                let mut g = Graph::new();
                let params = self.attach_frozen(&mut g);
                let x = g.constant(self.input_tensor(chunk, m)?);
                let y = self.forward_graph(&mut g, &params, x)?;
                Ok(g.value(y).data().to_vec())
            })
            .collect::<Result<_>>()?;
        Ok(shards.concat())
    }

    pub fn descriptor(&self) -> ArchDescriptor {
        ArchDescriptor {
            spec: self.spec.clone(),
            seed: self.seed,
        }
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            arch_hash: self.spec.arch_hash(),
            params: self.names.iter().cloned().zip(self.tensors.iter().cloned()).collect(),
        }
    }

    /// Checks the header hash and every parameter name/shape against `desc`.
    pub fn from_checkpoint(ck: Checkpoint, desc: ArchDescriptor) -> Result<Self> {
        desc.spec.validate()?;
        if ck.arch_hash != desc.spec.arch_hash() {
            return Err(Error::Checkpoint(
                "architecture hash does not match the descriptor".into(),
            ));
        }
        let layout = desc.spec.layout();
        if layout.len() != ck.params.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters, architecture needs {}",
                ck.params.len(),
                layout.len()
            )));
        }
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, shape), (cn, t)) in layout.into_iter().zip(ck.params) {
            if name != cn || shape != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {cn} {:?} does not match {name} {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            spec: desc.spec,
            seed: desc.seed,
            names,
            tensors,
        })
    }

    /// Writes the checkpoint and its `.arch.json` descriptor.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)?;
        let desc = descriptor_path(path);
        let mut text = serde_json::to_string_pretty(&self.descriptor()).expect("serializes");
        text.push('\n');
        std::fs::write(&desc, text).map_err(|e| Error::io(desc, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let dp = descriptor_path(path);
        let text = std::fs::read_to_string(&dp).map_err(|e| Error::io(&dp, e))?;
        let desc: ArchDescriptor = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("bad descriptor {}: {e}", dp.display())))?;
        Self::from_checkpoint(ck, desc)
    }
}

pub fn descriptor_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".arch.json");
    PathBuf::from(s)
}

struct Cursor<'a> {
    params: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next_pair(&mut self) -> (Var, Var) {
        let p = (self.params[self.pos], self.params[self.pos + 1]);
        self.pos += 2;
        p
    }
}

/// Shared constant for signal-space losses: `Bᵀ` with shape `[n_coef, n_dirs]`.
pub fn basis_transpose(basis: &nalgebra::DMatrix<f64>) -> Arc<NdTensor> {
    let (rows, cols) = basis.shape();
    let mut data = Vec::with_capacity(rows * cols);
    for k in 0..cols {
        for j in 0..rows {
            data.push(basis[(j, k)]);
        }
    }
    Arc::new(NdTensor::new(vec![cols, rows], data).expect("consistent shape"))
}

//! Grouped, reparameterized codebooks.
//!
//! A codebook of `n` codes is split into `k` contiguous groups. Group `j` owns
//! a frozen random core of shape `n_j × r_j` and a trainable projector that
//! maps core rows to `d`-dimensional codes. Global code indices follow group
//! order, then row order within the group.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    add_row_bias, column_sums, matmul, matmul_nt, matmul_tn, sample_normal,
    sample_standard_normal, RngStream, Scalar, StreamPurpose, Tensor,
};

static NEXT_VERSION: AtomicU64 = AtomicU64::new(1);

/// Process-unique stamp identifying one state of a codebook's parameters.
pub(crate) fn fresh_version() -> u64 {
    NEXT_VERSION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation value.
    #[inline]
    fn derivative<T: Scalar>(self, pre: T) -> T {
        match self {
            Activation::Relu => {
                if pre > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => {
                let t = pre.tanh();
                T::one() - t * t
            }
        }
    }
}

/// One-hidden-layer MLP settings. `hidden = None` uses the group rank.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct MlpSpec {
    pub hidden: Option<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn hidden_for(&self, rank: usize) -> usize {
        self.hidden.unwrap_or(rank)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectorVariant {
    Linear,
    Mlp(MlpSpec),
    LinearPlusMlp(MlpSpec),
}

impl ProjectorVariant {
    pub fn has_linear(&self) -> bool {
        matches!(self, ProjectorVariant::Linear | ProjectorVariant::LinearPlusMlp(_))
    }

    pub fn mlp(&self) -> Option<MlpSpec> {
        match *self {
            ProjectorVariant::Linear => None,
            ProjectorVariant::Mlp(s) | ProjectorVariant::LinearPlusMlp(s) => Some(s),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            ProjectorVariant::Linear => "linear",
            ProjectorVariant::Mlp(_) => "mlp",
            ProjectorVariant::LinearPlusMlp(_) => "linear+mlp",
        }
    }
}

/// Trainable parameter count of one projector for rank `r` and code dimension `d`.
pub fn projector_param_count(variant: ProjectorVariant, r: usize, d: usize) -> usize {
    let linear = r * d + d;
    let mlp = |s: MlpSpec| {
        let h = s.hidden_for(r);
        (r * h + h) + (h * d + d)
    };
    match variant {
        ProjectorVariant::Linear => linear,
        ProjectorVariant::Mlp(s) => mlp(s),
        ProjectorVariant::LinearPlusMlp(s) => linear + mlp(s),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub size: usize,
    pub rank: usize,
}

impl GroupSpec {
    pub fn new(size: usize, rank: usize) -> Self {
        Self { size, rank }
    }
}

/// Projector weights. Absent parts are `None`; gradients use the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorParams<T = f32> {
    /// `r × d` linear map and its `d` bias.
    pub linear: Option<(Tensor<T>, Tensor<T>)>,
    pub mlp: Option<MlpParams<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams<T = f32> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
    pub activation: Activation,
}

impl<T: Scalar> ProjectorParams<T> {
    pub fn linear(w: Tensor<T>, b: Tensor<T>) -> Self {
        Self {
            linear: Some((w, b)),
            mlp: None,
        }
    }

    fn sample(variant: ProjectorVariant, r: usize, d: usize, rng: &mut RngStream) -> Self {
        // W ~ N(0, 1/fan_in).
        let linear = variant.has_linear().then(|| {
            let w = sample_normal(&[r, d], (1.0 / r as f64).sqrt(), rng);
            (w, Tensor::zeros(&[d]))
        });
        let mlp = variant.mlp().map(|s| {
            let h = s.hidden_for(r);
            MlpParams {
                w1: sample_normal(&[r, h], (1.0 / r as f64).sqrt(), rng),
                b1: Tensor::zeros(&[h]),
                w2: sample_normal(&[h, d], (1.0 / h as f64).sqrt(), rng),
                b2: Tensor::zeros(&[d]),
                activation: s.activation,
            }
        });
        Self { linear, mlp }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            linear: self
                .linear
                .as_ref()
                .map(|(w, b)| (Tensor::zeros(w.shape()), Tensor::zeros(b.shape()))),
            mlp: self.mlp.as_ref().map(|m| MlpParams {
                w1: Tensor::zeros(m.w1.shape()),
                b1: Tensor::zeros(m.b1.shape()),
                w2: Tensor::zeros(m.w2.shape()),
                b2: Tensor::zeros(m.b2.shape()),
                activation: m.activation,
            }),
        }
    }

    /// Tensors in a fixed order with their checkpoint name suffixes.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let mut out = Vec::new();
        if let Some((w, b)) = &self.linear {
            out.push(("W", w));
            out.push(("b", b));
        }
        if let Some(m) = &self.mlp {
            out.push(("mlp.W1", &m.w1));
            out.push(("mlp.b1", &m.b1));
            out.push(("mlp.W2", &m.w2));
            out.push(("mlp.b2", &m.b2));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        let mut out = Vec::new();
        if let Some((w, b)) = &mut self.linear {
            out.push(("W", w));
            out.push(("b", b));
        }
        if let Some(m) = &mut self.mlp {
            out.push(("mlp.W1", &mut m.w1));
            out.push(("mlp.b1", &mut m.b1));
            out.push(("mlp.W2", &mut m.w2));
            out.push(("mlp.b2", &mut m.b2));
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_all_zero(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data().iter().all(|&x| x == T::zero()))
    }

    fn output_dim(&self) -> Option<usize> {
        match (&self.linear, &self.mlp) {
            (Some((w, _)), _) => w.shape().get(1).copied(),
            (None, Some(m)) => m.w2.shape().get(1).copied(),
            (None, None) => None,
        }
    }

    fn check(&self, variant: ProjectorVariant, r: usize, d: usize) -> Result<()> {
        let bad = |what: &str| Err(Error::shape(format!("projector {what} does not fit rank {r}, dim {d}")));
        if variant.has_linear() != self.linear.is_some() || variant.mlp().is_some() != self.mlp.is_some() {
            return Err(Error::shape(format!(
                "projector parameters do not match variant {}",
                variant.label()
            )));
        }
        if let Some((w, b)) = &self.linear {
            if w.shape() != [r, d] || b.shape() != [d] {
                return bad("linear weights");
            }
        }
        if let Some(m) = &self.mlp {
            let h = m.w1.shape().get(1).copied().unwrap_or(0);
            if m.w1.shape() != [r, h] || m.b1.shape() != [h] || m.w2.shape() != [h, d] || m.b2.shape() != [d] {
                return bad("mlp weights");
            }
        }
        Ok(())
    }
}

/// Applies the projector to a core: `core·W + b`, `act(core·W1 + b1)·W2 + b2`,
/// or the elementwise sum of both.
pub fn projector_forward<T: Scalar>(
    variant: ProjectorVariant,
    core: &Tensor<T>,
    params: &ProjectorParams<T>,
) -> Result<Tensor<T>> {
    let (_, r) = core.dims2()?;
    let d = params
        .output_dim()
        .ok_or_else(|| Error::shape("projector has no parameters"))?;
    params.check(variant, r, d)?;
    let linear = match &params.linear {
        Some((w, b)) => {
            let mut y = matmul(core, w)?;
            add_row_bias(&mut y, b.data());
            Some(y)
        }
        None => None,
    };
    let mlp = match &params.mlp {
        Some(m) => Some(mlp_forward(core, m)?.1),
        None => None,
    };
    match (linear, mlp) {
        (Some(a), Some(b)) => a.add(&b),
        (Some(a), None) | (None, Some(a)) => Ok(a),
        (None, None) => unreachable!("checked above"),
    }
}

/// Returns (pre-activation, output).
fn mlp_forward<T: Scalar>(core: &Tensor<T>, m: &MlpParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut pre = matmul(core, &m.w1)?;
    add_row_bias(&mut pre, m.b1.data());
    let act = m.activation;
    let hidden = pre.map(|x| act.apply(x));
    let mut out = matmul(&hidden, &m.w2)?;
    add_row_bias(&mut out, m.b2.data());
    Ok((pre, out))
}

/// Pulls `d_codes` (gradient w.r.t. the projector output) back to the projector parameters.
pub fn projector_backward<T: Scalar>(
    core: &Tensor<T>,
    params: &ProjectorParams<T>,
    d_codes: &Tensor<T>,
) -> Result<ProjectorParams<T>> {
    let mut grads = params.zeros_like();
    if let Some((gw, gb)) = &mut grads.linear {
        *gw = matmul_tn(core, d_codes)?;
        *gb = Tensor::from_vec(&[d_codes.shape()[1]], column_sums(d_codes))?;
    }
    if let (Some(m), Some(g)) = (&params.mlp, &mut grads.mlp) {
        let (pre, _) = mlp_forward(core, m)?;
        let act = m.activation;
        let hidden = pre.map(|x| act.apply(x));
        g.w2 = matmul_tn(&hidden, d_codes)?;
        g.b2 = Tensor::from_vec(&[d_codes.shape()[1]], column_sums(d_codes))?;
        let d_hidden = matmul_nt(d_codes, &m.w2)?;
        let d_pre = d_hidden.zip_map(&pre, |g, p| g * act.derivative(p))?;
        g.w1 = matmul_tn(core, &d_pre)?;
        g.b1 = Tensor::from_vec(&[d_pre.shape()[1]], column_sums(&d_pre))?;
    }
    Ok(grads)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupParams<T = f32> {
    core: Tensor<T>,
    pub projector: ProjectorParams<T>,
}

impl<T: Scalar> GroupParams<T> {
    pub fn new(core: Tensor<T>, projector: ProjectorParams<T>) -> Self {
        Self { core, projector }
    }

    pub fn core(&self) -> &Tensor<T> {
        &self.core
    }

    pub fn size(&self) -> usize {
        self.core.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.core.shape()[1]
    }
}

/// Random streams consumed by codebook construction.
#[derive(Clone, Debug)]
pub struct CodebookStreams {
    pub core: RngStream,
    pub projector: RngStream,
}

impl CodebookStreams {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            core: RngStream::derive(seed, StreamPurpose::CodebookCore, 0),
            projector: RngStream::derive(seed, StreamPurpose::CodebookProjector, 0),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupedCodebook<T = f32> {
    d: usize,
    groups: Vec<GroupParams<T>>,
    offsets: Vec<usize>,
    variant: ProjectorVariant,
    version: u64,
}

impl<T: Scalar> PartialEq for GroupedCodebook<T> {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d && self.variant == other.variant && self.groups == other.groups
    }
}

/// Builds a codebook with one frozen N(0, 1) core per group and freshly
/// initialised projectors (weights N(0, 1/fan_in), biases zero).
pub fn init_grouped_codebook<T: Scalar>(
    d: usize,
    specs: &[GroupSpec],
    variant: ProjectorVariant,
    streams: &mut CodebookStreams,
) -> Result<GroupedCodebook<T>> {
    if specs.is_empty() {
        return Err(Error::config("a grouped codebook needs at least one group"));
    }
    if d == 0 {
        return Err(Error::config("code dimension must be at least 1"));
    }
    if let Some(s) = specs.iter().find(|s| s.size == 0 || s.rank == 0) {
        return Err(Error::config(format!(
            "group size and rank must be positive, got size {} rank {}",
            s.size, s.rank
        )));
    }
    let cores: Vec<Tensor<T>> = specs
        .iter()
        .map(|s| sample_standard_normal(&[s.size, s.rank], &mut streams.core))
        .collect();
    let groups = cores
        .into_iter()
        .zip(specs)
        .map(|(core, s)| {
            let projector = ProjectorParams::sample(variant, s.rank, d, &mut streams.projector);
            GroupParams::new(core, projector)
        })
        .collect();
    GroupedCodebook::from_groups(d, variant, groups)
}

/// `k` groups of `n / k` codes, all of rank `r`.
pub fn uniform_specs(n: usize, k: usize, r: usize) -> Result<Vec<GroupSpec>> {
    if k == 0 || n % k != 0 {
        return Err(Error::config(format!(
            "group count k={k} must divide codebook size n={n}"
        )));
    }
    Ok(vec![GroupSpec::new(n / k, r); k])
}

impl<T: Scalar> GroupedCodebook<T> {
    pub fn from_groups(d: usize, variant: ProjectorVariant, groups: Vec<GroupParams<T>>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::config("a grouped codebook needs at least one group"));
        }
        let mut offsets = Vec::with_capacity(groups.len() + 1);
        offsets.push(0);
        for g in &groups {
            let (n_j, r_j) = g.core.dims2()?;
            if n_j == 0 || r_j == 0 {
                return Err(Error::config("group size and rank must be positive"));
            }
            g.projector.check(variant, r_j, d)?;
            offsets.push(offsets.last().unwrap() + n_j);
        }
        Ok(Self {
            d,
            groups,
            offsets,
            variant,
            version: fresh_version(),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn k(&self) -> usize {
        self.groups.len()
    }

    pub fn variant(&self) -> ProjectorVariant {
        self.variant
    }

    /// Prefix sums of group sizes; length `k + 1`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn groups(&self) -> &[GroupParams<T>] {
        &self.groups
    }

    pub fn group(&self, j: usize) -> &GroupParams<T> {
        &self.groups[j]
    }

    /// Mutable access to a group's projector. Invalidates earlier quantization results.
    pub fn projector_mut(&mut self, j: usize) -> &mut ProjectorParams<T> {
        self.version = fresh_version();
        &mut self.groups[j].projector
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn specs(&self) -> Vec<GroupSpec> {
        self.groups
            .iter()
            .map(|g| GroupSpec::new(g.size(), g.rank()))
            .collect()
    }

    /// Maps a global code index to `(group, local index)`.
    pub fn group_of_index(&self, i: usize) -> Result<(usize, usize)> {
        group_of_index(&self.offsets, i)
    }

    pub fn materialize_group(&self, j: usize) -> Result<Tensor<T>> {
        let g = &self.groups[j];
        projector_forward(self.variant, &g.core, &g.projector)
    }

    /// Full `n × d` codebook, groups concatenated in order.
    pub fn materialize(&self) -> Result<Tensor<T>> {
        let parts = (0..self.k())
            .map(|j| self.materialize_group(j))
            .collect::<Result<Vec<_>>>()?;
        Tensor::vcat(&parts.iter().collect::<Vec<_>>())
    }

    /// Materialized matrix bundled with the index layout and version stamp.
    pub fn materialized(&self) -> Result<MaterializedCodebook<T>> {
        Ok(MaterializedCodebook {
            codes: self.materialize()?,
            offsets: self.offsets.clone(),
            version: self.version,
        })
    }

    pub fn trainable_param_count(&self) -> usize {
        self.groups.iter().map(|g| g.projector.param_count()).sum()
    }

    /// Named tensors for persistence: `group{j}.core`, `group{j}.W`, ...
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (j, g) in self.groups.iter().enumerate() {
            out.push((format!("group{j}.core"), &g.core));
            for (suffix, t) in g.projector.tensors() {
                out.push((format!("group{j}.{suffix}"), t));
            }
        }
        out
    }
}

/// Maps a global index to `(group, local)` given prefix-sum offsets.
pub fn group_of_index(offsets: &[usize], i: usize) -> Result<(usize, usize)> {
    let n = *offsets.last().unwrap_or(&0);
    if i >= n {
        return Err(Error::Index { index: i, len: n });
    }
    // Last offset <= i.
    let j = offsets.partition_point(|&o| o <= i) - 1;
    Ok((j, i - offsets[j]))
}

/// A codebook matrix ready for lookup, with its group layout and version.
#[derive(Clone, Debug)]
pub struct MaterializedCodebook<T = f32> {
    pub codes: Tensor<T>,
    pub offsets: Vec<usize>,
    pub version: u64,
}

impl<T: Scalar> MaterializedCodebook<T> {
    /// Every code in its own group, as in a freely trained codebook.
    pub fn ungrouped(codes: Tensor<T>, version: u64) -> Result<Self> {
        let (n, _) = codes.dims2()?;
        Ok(Self {
            codes,
            offsets: (0..=n).collect(),
            version,
        })
    }

    pub fn n(&self) -> usize {
        self.codes.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn d(&self) -> usize {
        self.codes.shape()[1]
    }
}

/// Parameters of the shared-core construction: one core for all groups and a
/// wide projector whose column blocks are the per-group projectors.
#[derive(Clone, Debug)]
pub struct SimplifiedParams<T = f32> {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    /// `(n/k) × r`
    pub core: Tensor<T>,
    /// `r × (d·k)`
    pub w: Tensor<T>,
    /// `d·k`
    pub b: Tensor<T>,
}

impl<T: Scalar> SimplifiedParams<T> {
    pub fn sample(n: usize, d: usize, k: usize, r: usize, streams: &mut CodebookStreams) -> Result<Self> {
        if k == 0 || n % k != 0 {
            return Err(Error::config(format!(
                "simplified construction needs k | n, got n={n}, k={k}"
            )));
        }
        if d == 0 || r == 0 {
            return Err(Error::config("dimension and rank must be positive"));
        }
        let core = sample_standard_normal(&[n / k, r], &mut streams.core);
        let w = sample_normal(&[r, d * k], (1.0 / r as f64).sqrt(), &mut streams.projector);
        Ok(Self {
            n,
            d,
            k,
            core,
            w,
            b: Tensor::zeros(&[d * k]),
        })
    }

    /// `core·W + b` reshaped from `(n/k, d·k)` to `(n, d)` in row-major order.
    /// Row `i·k + j` of the result is code `i` of group `j`.
    pub fn materialize_reshaped(&self) -> Result<Tensor<T>> {
        let mut wide = matmul(&self.core, &self.w)?;
        add_row_bias(&mut wide, self.b.data());
        wide.reshape(&[self.n, self.d])
    }

    /// The same parameters as an explicit grouped codebook (shared core cloned per group).
    pub fn to_grouped(&self) -> Result<GroupedCodebook<T>> {
        let groups = (0..self.k)
            .map(|j| {
                let (lo, hi) = (j * self.d, (j + 1) * self.d);
                let w = self.w.slice_cols(lo, hi);
                let b = Tensor::from_vec(&[self.d], self.b.data()[lo..hi].to_vec())?;
                Ok(GroupParams::new(self.core.clone(), ProjectorParams::linear(w, b)))
            })
            .collect::<Result<Vec<_>>>()?;
        GroupedCodebook::from_groups(self.d, ProjectorVariant::Linear, groups)
    }
}

/// Index in the group-contiguous layout of row `i` of the reshaped layout.
pub fn reshaped_to_grouped_index(i: usize, n: usize, k: usize) -> usize {
    let per = n / k;
    (i % k) * per + i / k
}

/// Shared-core construction returned in group-contiguous layout.
pub fn init_simplified<T: Scalar>(
    n: usize,
    d: usize,
    k: usize,
    r: usize,
    streams: &mut CodebookStreams,
) -> Result<GroupedCodebook<T>> {
    SimplifiedParams::sample(n, d, k, r, streams)?.to_grouped()
}

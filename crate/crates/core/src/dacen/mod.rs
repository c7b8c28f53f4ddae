//! The dual-attention channel estimation network and its ablation variants.
//!
//! Input rows are antenna pairs `r*N_T + t` holding `[Im, Re]` of the pilot
//! measurements; output rows hold `[Im, Re]` of the delay taps.

mod blocks;

pub use blocks::{
    feed_forward, linear, spatial_attention, spatial_conv, spatial_map, temporal_attention, temporal_conv, wrap,
    AttentionVars, FeedForwardVars, FfInput, NormVars,
};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{ParamKind, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DacenSpec {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_h: usize,
    pub n_sa: usize,
    pub n_ta: usize,
    /// Positional-encoding base.
    pub omega: f64,
    pub n_p: usize,
    pub n_r: usize,
    pub n_t: usize,
    /// Pilot RBs at the input.
    pub n_l: usize,
    pub ff_input: FfInput,
    pub ln_eps: f64,
    /// Whether the positional encoding is added before the temporal stack.
    pub use_pe: bool,
}

impl DacenSpec {
    /// `d_model = d_ff = 512`, two heads, eight spatial and eight temporal
    /// modules, on a 32x4 array with 64 taps.
    pub fn paper(n_l: usize) -> Self {
        Self {
            d_model: 512,
            d_ff: 512,
            n_h: 2,
            n_sa: 8,
            n_ta: 8,
            omega: 10000.0,
            n_p: 64,
            n_r: 4,
            n_t: 32,
            n_l,
            ff_input: FfInput::Normalized,
            ln_eps: 1e-5,
            use_pe: true,
        }
    }

    pub fn desk(n_l: usize) -> Self {
        Self { d_model: 64, d_ff: 64, n_sa: 2, n_ta: 2, n_p: 16, n_r: 2, n_t: 8, ..Self::paper(n_l) }
    }

    pub fn preset(name: &str, n_l: usize) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper(n_l)),
            "desk" => Ok(Self::desk(n_l)),
            other => Err(Error::config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn antenna_pairs(&self) -> usize {
        self.n_r * self.n_t
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.n_r, self.n_t, 2 * self.n_l]
    }

    pub fn output_shape(&self) -> [usize; 3] {
        [self.n_r, self.n_t, 2 * self.n_p]
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.d_model, self.d_ff, self.n_h, self.n_p, self.n_r, self.n_t, self.n_l];
        if counts.contains(&0) {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.d_model % self.n_h != 0 {
            return Err(Error::config(format!("d_model {} is not divisible by {} heads", self.d_model, self.n_h)));
        }
        if self.d_model % 2 != 0 {
            return Err(Error::config("d_model must be even for the positional encoding"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::config("layer-norm epsilon must be positive"));
        }
        Ok(())
    }
}

/// `P[p, 2i] = sin(p / w^(2i/d))`, `P[p, 2i+1] = cos(p / w^(2i/d))` for `2N_P` rows.
pub fn positional_encoding(spec: &DacenSpec) -> Result<Tensor<f64>> {
    let d = spec.d_model;
    if d % 2 != 0 {
        return Err(Error::config(format!("positional encoding needs an even width, got {d}")));
    }
    let rows = 2 * spec.n_p;
    let mut data = vec![0.0; rows * d];
    for p in 0..rows {
        for i in 0..d / 2 {
            let a = p as f64 / spec.omega.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = a.sin();
            data[p * d + 2 * i + 1] = a.cos();
        }
    }
    Tensor::new(vec![rows, d], data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Variant {
    #[default]
    Full,
    /// No spatial stack; a single linear layer maps pilots to taps.
    WithoutSams,
    /// No temporal stack; the spatial output layer emits taps directly.
    WithoutTams,
    /// Spatial modules replaced by wrapped `K_S x K_S` convolutions.
    SconvTam,
    /// Temporal modules replaced by wrapped length-`K_T` convolutions.
    SamTconv,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Self::Full, Self::WithoutSams, Self::WithoutTams, Self::SconvTam, Self::SamTconv];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "wo-sams" => Ok(Self::WithoutSams),
            "wo-tams" => Ok(Self::WithoutTams),
            "sconv-tam" => Ok(Self::SconvTam),
            "sam-tconv" => Ok(Self::SamTconv),
            other => Err(Error::config(format!(
                "unknown variant `{other}` (full, wo-sams, wo-tams, sconv-tam, sam-tconv)"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::WithoutSams => "wo-sams",
            Self::WithoutTams => "wo-tams",
            Self::SconvTam => "sconv-tam",
            Self::SamTconv => "sam-tconv",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationSpec {
    pub variant: Variant,
    pub k_s: usize,
    pub k_t: usize,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self { variant: Variant::Full, k_s: 3, k_t: 3 }
    }
}

impl AblationSpec {
    pub fn new(variant: Variant) -> Self {
        Self { variant, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_s % 2 == 0 || self.k_t % 2 == 0 {
            return Err(Error::config(format!("kernel sizes must be odd (K_S={}, K_T={})", self.k_s, self.k_t)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mixer {
    Temporal,
    Spatial,
    SpatialConv,
    TemporalConv,
}

/// Store indices of one wrapped module.
#[derive(Debug, Clone)]
pub struct Block {
    pub mixer: Mixer,
    pub name: String,
    /// Attention: wq, bq, wk, bk, wv, bv, wo, bo. Convolutions: w, b.
    mix: Vec<usize>,
    ln1: [usize; 2],
    ff: [usize; 4],
    ln2: [usize; 2],
}

impl Block {
    fn attention_vars(&self, v: &[Var]) -> AttentionVars {
        let m = &self.mix;
        AttentionVars {
            wq: v[m[0]],
            bq: v[m[1]],
            wk: v[m[2]],
            bk: v[m[3]],
            wv: v[m[4]],
            bv: v[m[5]],
            wo: v[m[6]],
            bo: v[m[7]],
        }
    }
}

/// Named linear layer: weight `[in, out]`, bias `[out]`.
#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
}

impl Dense {
    fn apply<T: Scalar>(&self, tape: &mut Tape<T>, v: &[Var], x: Var) -> Result<Var> {
        linear(tape, x, v[self.w], v[self.b])
    }
}

/// A built model: architecture plus learnable tensors.
#[derive(Debug, Clone)]
pub struct Dacen<T: Scalar> {
    spec: DacenSpec,
    ablation: AblationSpec,
    params: ParamStore<T>,
    pe: Tensor<T>,
    input: Dense,
    l2: Option<Dense>,
    l3: Option<Dense>,
    l4: Option<Dense>,
    spatial: Vec<Block>,
    temporal: Vec<Block>,
}

struct Builder<'a, T: Scalar, R: Rng + ?Sized> {
    store: ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn add(&mut self, name: String, kind: ParamKind, shape: Vec<usize>, fan_in: usize) -> Result<usize> {
        let value = match kind {
            ParamKind::LinearWeight | ParamKind::ConvWeight | ParamKind::AttentionMapConv => {
                crate::tensor::uniform_fan_in(self.rng, shape, fan_in)
            }
            ParamKind::NormGain => Tensor::filled(shape, T::one()),
            _ => Tensor::zeros(shape),
        };
        self.store.insert(name, kind, value)
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize) -> Result<Dense> {
        Ok(Dense {
            w: self.add(format!("{name}.w"), ParamKind::LinearWeight, vec![n_in, n_out], n_in)?,
            b: self.add(format!("{name}.b"), ParamKind::LinearBias, vec![n_out], n_in)?,
        })
    }

    fn norm(&mut self, name: &str, d: usize) -> Result<[usize; 2]> {
        Ok([
            self.add(format!("{name}.g"), ParamKind::NormGain, vec![d], d)?,
            self.add(format!("{name}.b"), ParamKind::NormBias, vec![d], d)?,
        ])
    }

    fn block(&mut self, name: String, mixer: Mixer, spec: &DacenSpec, ab: &AblationSpec) -> Result<Block> {
        let d = spec.d_model;
        let mix = match mixer {
            Mixer::Temporal => {
                let mut v = Vec::with_capacity(8);
                for p in ["q", "k", "v", "o"] {
                    let l = self.dense(&format!("{name}.{p}"), d, d)?;
                    v.extend([l.w, l.b]);
                }
                v
            }
            Mixer::Spatial => vec![
                self.add(format!("{name}.map.w"), ParamKind::AttentionMapConv, vec![1, 2, 1, 1], 2)?,
                self.add(format!("{name}.map.b"), ParamKind::AttentionMapConv, vec![1], 2)?,
            ],
            Mixer::SpatialConv => vec![
                self.add(format!("{name}.conv.w"), ParamKind::ConvWeight, vec![d, d, ab.k_s, ab.k_s], d * ab.k_s * ab.k_s)?,
                self.add(format!("{name}.conv.b"), ParamKind::ConvBias, vec![d], d)?,
            ],
            Mixer::TemporalConv => vec![
                self.add(format!("{name}.conv.w"), ParamKind::ConvWeight, vec![d, d, ab.k_t], d * ab.k_t)?,
                self.add(format!("{name}.conv.b"), ParamKind::ConvBias, vec![d], d)?,
            ],
        };
        let ln1 = self.norm(&format!("{name}.ln1"), d)?;
        let f1 = self.dense(&format!("{name}.ff1"), d, spec.d_ff)?;
        let f2 = self.dense(&format!("{name}.ff2"), spec.d_ff, d)?;
        let ln2 = self.norm(&format!("{name}.ln2"), d)?;
        Ok(Block { mixer, name, mix, ln1, ff: [f1.w, f1.b, f2.w, f2.b], ln2 })
    }
}

/// Name of the input layer whose width depends on the pilot count.
pub fn input_layer_name(variant: Variant) -> &'static str {
    match variant {
        Variant::WithoutSams => "l12",
        _ => "l1",
    }
}

impl<T: Scalar> Dacen<T> {
    pub fn new<R: Rng + ?Sized>(spec: DacenSpec, rng: &mut R) -> Result<Self> {
        Self::build(spec, AblationSpec::default(), rng)
    }

    pub fn build<R: Rng + ?Sized>(spec: DacenSpec, ablation: AblationSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        ablation.validate()?;
        let v = ablation.variant;
        let (s, d, taps) = (spec.antenna_pairs(), spec.d_model, 2 * spec.n_p);
        let mut b = Builder { store: ParamStore::new(), rng };

        let spatial_mixer = match v {
            Variant::WithoutSams => None,
            Variant::SconvTam => Some(Mixer::SpatialConv),
            _ => Some(Mixer::Spatial),
        };
        let temporal_mixer = match v {
            Variant::WithoutTams => None,
            Variant::SamTconv => Some(Mixer::TemporalConv),
            _ => Some(Mixer::Temporal),
        };

        let input = match spatial_mixer {
            Some(_) => b.dense("l1", 2 * spec.n_l, d)?,
            None => b.dense("l12", 2 * spec.n_l, taps)?,
        };
        let mut spatial = Vec::new();
        let mut l2 = None;
        if let Some(m) = spatial_mixer {
            for i in 0..spec.n_sa {
                spatial.push(b.block(format!("sam{i}"), m, &spec, &ablation)?);
            }
            l2 = Some(b.dense("l2", d, taps)?);
        }
        let mut temporal = Vec::new();
        let (mut l3, mut l4) = (None, None);
        if let Some(m) = temporal_mixer {
            l3 = Some(b.dense("l3", s, d)?);
            for i in 0..spec.n_ta {
                temporal.push(b.block(format!("tam{i}"), m, &spec, &ablation)?);
            }
            l4 = Some(b.dense("l4", d, s)?);
        }
        let pe = positional_encoding(&spec)?.cast();
        Ok(Self { spec, ablation, params: b.store, pe, input, l2, l3, l4, spatial, temporal })
    }

    pub fn spec(&self) -> &DacenSpec {
        &self.spec
    }

    pub fn ablation(&self) -> &AblationSpec {
        &self.ablation
    }

    pub fn variant(&self) -> Variant {
        self.ablation.variant
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn spatial_blocks(&self) -> &[Block] {
        &self.spatial
    }

    pub fn temporal_blocks(&self) -> &[Block] {
        &self.temporal
    }

    pub fn positional(&self) -> &Tensor<T> {
        &self.pe
    }

    /// Output of the mixing stage of one module, before its wrapping.
    pub fn mix(&self, tape: &mut Tape<T>, v: &[Var], block: &Block, x: Var) -> Result<Var> {
        let sp = &self.spec;
        match block.mixer {
            Mixer::Temporal => temporal_attention(tape, x, &block.attention_vars(v), sp.n_h),
            Mixer::Spatial => spatial_attention(tape, x, v[block.mix[0]], v[block.mix[1]], sp.n_r, sp.n_t),
            Mixer::SpatialConv => spatial_conv(tape, x, v[block.mix[0]], v[block.mix[1]], sp.n_r, sp.n_t),
            Mixer::TemporalConv => temporal_conv(tape, x, v[block.mix[0]], v[block.mix[1]]),
        }
    }

    /// Sigmoid map of a spatial attention module.
    pub fn map(&self, tape: &mut Tape<T>, v: &[Var], block: &Block, x: Var) -> Result<Var> {
        if block.mixer != Mixer::Spatial {
            return Err(Error::config(format!("module {} has no attention map", block.name)));
        }
        spatial_map(tape, x, v[block.mix[0]], v[block.mix[1]], self.spec.n_r, self.spec.n_t)
    }

    pub fn block_forward(&self, tape: &mut Tape<T>, v: &[Var], block: &Block, x: Var) -> Result<Var> {
        let mixed = self.mix(tape, v, block, x)?;
        let ln1 = NormVars { g: v[block.ln1[0]], b: v[block.ln1[1]] };
        let ln2 = NormVars { g: v[block.ln2[0]], b: v[block.ln2[1]] };
        let ff = FeedForwardVars { w1: v[block.ff[0]], b1: v[block.ff[1]], w2: v[block.ff[2]], b2: v[block.ff[3]] };
        wrap(tape, x, mixed, &ln1, &ff, &ln2, self.spec.ff_input, T::from_f64_lossy(self.spec.ln_eps))
    }

    /// `x: [B, N_R*N_T, 2N_L]` (or `[B, N_R, N_T, 2N_L]`) to `[B, N_R*N_T, 2N_P]`.
    /// `v` are the parameter vars in store order.
    pub fn forward(&self, tape: &mut Tape<T>, v: &[Var], x: Var) -> Result<Var> {
        let sp = &self.spec;
        let s = sp.antenna_pairs();
        let shape = tape.shape(x).to_vec();
        let batch = shape.first().copied().unwrap_or(0);
        let width = 2 * sp.n_l;
        if shape.iter().skip(1).product::<usize>() != s * width || shape.last() != Some(&width) {
            return Err(Error::shape("dacen input", &shape, &[batch, s, width]).in_stage("input"));
        }
        if v.len() != self.params.len() {
            return Err(Error::shape("dacen parameter vars", &[v.len()], &[self.params.len()]));
        }
        let x = tape.reshape(x, &[batch, s, width])?;
        let mut h = self.input.apply(tape, v, x).map_err(|e| e.in_stage(input_layer_name(self.variant())))?;
        for b in &self.spatial {
            h = self.block_forward(tape, v, b, h).map_err(|e| e.in_stage(b.name.clone()))?;
        }
        if let Some(l2) = &self.l2 {
            h = l2.apply(tape, v, h).map_err(|e| e.in_stage("l2"))?;
        }
        if let (Some(l3), Some(l4)) = (&self.l3, &self.l4) {
            h = tape.transpose_last2(h)?;
            h = l3.apply(tape, v, h).map_err(|e| e.in_stage("l3"))?;
            if sp.use_pe {
                let pe = tape.constant(self.pe.clone());
                h = tape.add_broadcast(h, pe)?;
            }
            for b in &self.temporal {
                h = self.block_forward(tape, v, b, h).map_err(|e| e.in_stage(b.name.clone()))?;
            }
            h = l4.apply(tape, v, h).map_err(|e| e.in_stage("l4"))?;
            h = tape.transpose_last2(h)?;
        }
        Ok(h)
    }

    /// Inference on a flat batch of inputs laid out as `[B, N_R*N_T, 2N_L]`.
    pub fn predict(&self, inputs: &[T], chunk: usize) -> Result<Vec<T>> {
        let per_in = self.spec.antenna_pairs() * 2 * self.spec.n_l;
        if inputs.len() % per_in != 0 {
            return Err(Error::shape("predict", &[inputs.len()], &[per_in]));
        }
        let n = inputs.len() / per_in;
        let mut out = Vec::with_capacity(n * self.spec.antenna_pairs() * 2 * self.spec.n_p);
        for block in inputs.chunks(per_in * chunk.max(1)) {
            let b = block.len() / per_in;
            let mut tape = Tape::new();
            let v = self.params.bind_frozen(&mut tape);
            let x = tape.constant(Tensor::from_parts(vec![b, self.spec.antenna_pairs(), 2 * self.spec.n_l], block.to_vec()));
            let y = self.forward(&mut tape, &v, x)?;
            out.extend_from_slice(tape.value(y));
        }
        Ok(out)
    }

    /// Copies every tensor except the input layer from `source`, which must
    /// share the architecture apart from the pilot count. Returns the copied names.
    pub fn copy_backbone_from(&mut self, source: &Dacen<T>) -> Result<Vec<String>> {
        let skip = input_layer_name(self.variant());
        let is_input = |n: &str| n.strip_prefix(skip).is_some_and(|r| r.starts_with('.'));
        let mut mismatched = Vec::new();
        if source.variant() != self.variant() {
            mismatched.push(format!("variant {} vs {}", source.variant().as_str(), self.variant().as_str()));
        }
        for p in self.params.iter().filter(|p| !is_input(&p.name)) {
            match source.params.get(&p.name) {
                Some(q) if q.value.shape() == p.value.shape() => {}
                Some(q) => mismatched.push(format!("{} {:?} vs {:?}", p.name, q.value.shape(), p.value.shape())),
                None => mismatched.push(format!("{} missing in source", p.name)),
            }
        }
        for q in source.params.iter().filter(|q| !is_input(&q.name)) {
            if self.params.get(&q.name).is_none() {
                mismatched.push(format!("{} missing in target", q.name));
            }
        }
        if !mismatched.is_empty() {
            return Err(Error::Incompatible(mismatched));
        }
        let mut copied = Vec::new();
        for p in self.params.iter_mut().filter(|p| !is_input(&p.name)) {
            p.value = source.params.get(&p.name).map(|q| q.value.clone()).unwrap_or_else(|| p.value.clone());
            copied.push(p.name.clone());
        }
        Ok(copied)
    }

    pub fn cast<U: Scalar>(&self) -> Dacen<U> {
        let mut params = ParamStore::new();
        for p in self.params.iter() {
            params.insert(p.name.clone(), p.kind, p.value.cast()).expect("names are unique");
        }
        Dacen {
            spec: self.spec.clone(),
            ablation: self.ablation,
            params,
            pe: self.pe.cast(),
            input: self.input,
            l2: self.l2,
            l3: self.l3,
            l4: self.l4,
            spatial: self.spatial.clone(),
            temporal: self.temporal.clone(),
        }
    }
}

/// Convenience alias for [`Dacen::build`].
pub fn build_variant<T: Scalar, R: Rng + ?Sized>(spec: DacenSpec, ablation: AblationSpec, rng: &mut R) -> Result<Dacen<T>> {
    Dacen::build(spec, ablation, rng)
}

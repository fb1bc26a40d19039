//! Encoder and aggregator.
//!
//! Per round the encoder fuses the witness's relevance, the shown candidate's
//! attributes and the candidate's image features into `r_t`; the aggregator
//! feeds `r_t` through a GRU and projects the cell output to the query `s_t`
//! that the retriever compares against gallery features.
//!
//! ```text
//! x_t = W_A (o_t ⊕ a_t) + b_A        indication layer, 2A → E
//! f_t = W_I m_t + b_I                F → E
//! r_t = W_M (x_t ⊕ f_t) + b_M        2E → E
//! g_t, h_t = GRU(r_t, h_{t-1})       h_0 = 0
//! s_t = W_G g_t + b_G                H → E
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::feedback_sim::{DisclosureMode, RelevanceVector};
use crate::rng::SeedStream;
use crate::tensor_ops::{
    affine_backward, affine_forward, gru_backward, gru_forward, init_uniform, GruCache, GruGrads,
    GruWeights, MatRef, Tensor1,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelDims {
    pub attrs: usize,
    pub features: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl ModelDims {
    /// Queries are compared directly against gallery features, so the
    /// embedding width equals the feature width.
    pub fn new(attrs: usize, features: usize, hidden: usize) -> Result<Self> {
        let dims = Self {
            attrs,
            features,
            embed: features,
            hidden,
        };
        dims.validate()?;
        Ok(dims)
    }

    pub fn validate(&self) -> Result<()> {
        if self.attrs == 0 || self.features == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if self.embed != self.features {
            return Err(Error::Config(format!(
                "embedding width {} must equal feature width {}",
                self.embed, self.features
            )));
        }
        Ok(())
    }
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            attrs: 40,
            features: 256,
            embed: 256,
            hidden: 256,
        }
    }
}

/// Named parameter tensors, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamBlock {
    IndicationWeight,
    IndicationBias,
    ImageWeight,
    ImageBias,
    FusionWeight,
    FusionBias,
    UpdateInput,
    UpdateHidden,
    UpdateBias,
    ResetInput,
    ResetHidden,
    ResetBias,
    CandidateInput,
    CandidateHidden,
    CandidateBias,
    OutputWeight,
    OutputBias,
}

impl ParamBlock {
    pub const ALL: [ParamBlock; 17] = [
        Self::IndicationWeight,
        Self::IndicationBias,
        Self::ImageWeight,
        Self::ImageBias,
        Self::FusionWeight,
        Self::FusionBias,
        Self::UpdateInput,
        Self::UpdateHidden,
        Self::UpdateBias,
        Self::ResetInput,
        Self::ResetHidden,
        Self::ResetBias,
        Self::CandidateInput,
        Self::CandidateHidden,
        Self::CandidateBias,
        Self::OutputWeight,
        Self::OutputBias,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::IndicationWeight => "indication.weight",
            Self::IndicationBias => "indication.bias",
            Self::ImageWeight => "image.weight",
            Self::ImageBias => "image.bias",
            Self::FusionWeight => "fusion.weight",
            Self::FusionBias => "fusion.bias",
            Self::UpdateInput => "gru.update.input",
            Self::UpdateHidden => "gru.update.hidden",
            Self::UpdateBias => "gru.update.bias",
            Self::ResetInput => "gru.reset.input",
            Self::ResetHidden => "gru.reset.hidden",
            Self::ResetBias => "gru.reset.bias",
            Self::CandidateInput => "gru.candidate.input",
            Self::CandidateHidden => "gru.candidate.hidden",
            Self::CandidateBias => "gru.candidate.bias",
            Self::OutputWeight => "output.weight",
            Self::OutputBias => "output.bias",
        }
    }

    /// `(rows, cols)`; biases have one column.
    pub fn shape(self, d: &ModelDims) -> (usize, usize) {
        let (a, f, e, h) = (d.attrs, d.features, d.embed, d.hidden);
        match self {
            Self::IndicationWeight => (e, 2 * a),
            Self::ImageWeight => (e, f),
            Self::FusionWeight => (e, 2 * e),
            Self::UpdateInput | Self::ResetInput | Self::CandidateInput => (h, e),
            Self::UpdateHidden | Self::ResetHidden | Self::CandidateHidden => (h, h),
            Self::OutputWeight => (e, h),
            Self::IndicationBias | Self::ImageBias | Self::FusionBias | Self::OutputBias => (e, 1),
            Self::UpdateBias | Self::ResetBias | Self::CandidateBias => (h, 1),
        }
    }

    pub fn is_bias(self) -> bool {
        matches!(
            self,
            Self::IndicationBias
                | Self::ImageBias
                | Self::FusionBias
                | Self::OutputBias
                | Self::UpdateBias
                | Self::ResetBias
                | Self::CandidateBias
        )
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&b| b == self).expect("listed")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Layout {
    offsets: [usize; 18],
}

impl Layout {
    fn new(d: &ModelDims) -> Self {
        let mut offsets = [0; 18];
        for (i, b) in ParamBlock::ALL.iter().enumerate() {
            let (r, c) = b.shape(d);
            offsets[i + 1] = offsets[i] + r * c;
        }
        Self { offsets }
    }

    fn range(&self, b: ParamBlock) -> std::ops::Range<usize> {
        let i = b.index();
        self.offsets[i]..self.offsets[i + 1]
    }

    fn total(&self) -> usize {
        self.offsets[17]
    }
}

/// All trainable tensors, stored as one flat vector. Gradients use the same
/// type and layout.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    dims: ModelDims,
    layout: Layout,
    data: Vec<f64>,
}

pub type Gradients = ModelParameters;

impl PartialEq for ModelParameters {
    fn eq(&self, other: &Self) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Mutable views of every block, for backward passes.
struct BlocksMut<'a> {
    indication: (&'a mut [f64], &'a mut [f64]),
    image: (&'a mut [f64], &'a mut [f64]),
    fusion: (&'a mut [f64], &'a mut [f64]),
    gru: GruGrads<'a>,
    output: (&'a mut [f64], &'a mut [f64]),
}

impl ModelParameters {
    pub fn zeros(dims: ModelDims) -> Self {
        let layout = Layout::new(&dims);
        let data = vec![0.0; layout.total()];
        Self { dims, layout, data }
    }

    /// Weights uniform on `±1/√fan_in`, biases zero.
    pub fn init(dims: ModelDims, seed: SeedStream) -> Self {
        let mut p = Self::zeros(dims);
        for b in ParamBlock::ALL {
            if b.is_bias() {
                continue;
            }
            let (_, fan_in) = b.shape(&dims);
            let mut rng = seed.rng_for(b.name());
            init_uniform(p.block_mut(b), fan_in, &mut rng);
        }
        p
    }

    pub fn from_flat(dims: ModelDims, data: Vec<f64>) -> Result<Self> {
        let layout = Layout::new(&dims);
        check_len("parameter vector", layout.total(), data.len())?;
        Ok(Self { dims, layout, data })
    }

    pub fn dims(&self) -> ModelDims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn block(&self, b: ParamBlock) -> &[f64] {
        &self.data[self.layout.range(b)]
    }

    pub fn block_mut(&mut self, b: ParamBlock) -> &mut [f64] {
        let r = self.layout.range(b);
        &mut self.data[r]
    }

    pub fn block_range(&self, b: ParamBlock) -> std::ops::Range<usize> {
        self.layout.range(b)
    }

    pub fn mat(&self, b: ParamBlock) -> MatRef<'_> {
        let (rows, cols) = b.shape(&self.dims);
        MatRef {
            rows,
            cols,
            data: self.block(b),
        }
    }

    pub fn gru(&self) -> GruWeights<'_> {
        use ParamBlock::*;
        GruWeights {
            u_z: self.mat(UpdateInput),
            v_z: self.mat(UpdateHidden),
            b_z: self.block(UpdateBias),
            u_r: self.mat(ResetInput),
            v_r: self.mat(ResetHidden),
            b_r: self.block(ResetBias),
            u_h: self.mat(CandidateInput),
            v_h: self.mat(CandidateHidden),
            b_h: self.block(CandidateBias),
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.data.fill(value);
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for a in &mut self.data {
            *a *= k;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn blocks_mut(&mut self) -> BlocksMut<'_> {
        let mut rest: &mut [f64] = &mut self.data;
        let mut parts: Vec<&mut [f64]> = Vec::with_capacity(17);
        for w in self.layout.offsets.windows(2) {
            let (head, tail) = rest.split_at_mut(w[1] - w[0]);
            parts.push(head);
            rest = tail;
        }
        let mut it = parts.into_iter();
        let mut next = || it.next().expect("17 blocks");
        BlocksMut {
            indication: (next(), next()),
            image: (next(), next()),
            fusion: (next(), next()),
            gru: GruGrads {
                u_z: next(),
                v_z: next(),
                b_z: next(),
                u_r: next(),
                v_r: next(),
                b_r: next(),
                u_h: next(),
                v_h: next(),
                b_h: next(),
            },
            output: (next(), next()),
        }
    }
}

/// Recurrent state of one dialog.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogState {
    pub h: Tensor1,
    pub round: usize,
    /// Gallery indices of candidates shown so far.
    pub history: Vec<usize>,
}

impl DialogState {
    pub fn new(hidden: usize) -> Self {
        Self {
            h: vec![0.0; hidden],
            round: 0,
            history: Vec::new(),
        }
    }
}

/// What the encoder sees in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundInput {
    pub relevance: RelevanceVector,
    pub cand_attrs: Vec<i8>,
    pub cand_features: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodeCache {
    indication_in: Tensor1,
    image_in: Tensor1,
    fusion_in: Tensor1,
    pub r: Tensor1,
}

pub fn encode_round_cached(
    p: &ModelParameters,
    relevance: &[i8],
    cand_attrs: &[i8],
    cand_features: &[f32],
    mode: DisclosureMode,
) -> Result<EncodeCache> {
    use ParamBlock::*;
    let d = p.dims;
    check_len("relevance", d.attrs, relevance.len())?;
    check_len("candidate attributes", d.attrs, cand_attrs.len())?;
    check_len("candidate features", d.features, cand_features.len())?;

    let mut indication_in = Vec::with_capacity(2 * d.attrs);
    indication_in.extend(relevance.iter().map(|&v| f64::from(v)));
    match mode {
        DisclosureMode::FullNoAttr => indication_in.extend(std::iter::repeat_n(0.0, d.attrs)),
        _ => indication_in.extend(cand_attrs.iter().map(|&v| f64::from(v))),
    }
    let image_in: Tensor1 = cand_features.iter().map(|&v| f64::from(v)).collect();

    let x = affine_forward(p.mat(IndicationWeight), p.block(IndicationBias), &indication_in)?;
    let f = affine_forward(p.mat(ImageWeight), p.block(ImageBias), &image_in)?;
    let fusion_in = [x, f].concat();
    let r = affine_forward(p.mat(FusionWeight), p.block(FusionBias), &fusion_in)?;
    Ok(EncodeCache {
        indication_in,
        image_in,
        fusion_in,
        r,
    })
}

/// `r_t` for one round of feedback.
pub fn encode_round(
    p: &ModelParameters,
    relevance: &[i8],
    cand_attrs: &[i8],
    cand_features: &[f32],
    mode: DisclosureMode,
) -> Result<Tensor1> {
    Ok(encode_round_cached(p, relevance, cand_attrs, cand_features, mode)?.r)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateCache {
    pub gru: GruCache,
    pub s: Tensor1,
}

pub fn aggregate_cached(p: &ModelParameters, r: &[f64], h_prev: &[f64]) -> Result<AggregateCache> {
    let gru = gru_forward(&p.gru(), r, h_prev)?;
    let s = affine_forward(
        p.mat(ParamBlock::OutputWeight),
        p.block(ParamBlock::OutputBias),
        gru.output(),
    )?;
    Ok(AggregateCache { gru, s })
}

/// Advance the dialog state by one round and return `s_t`.
pub fn aggregate(p: &ModelParameters, r: &[f64], state: &DialogState) -> Result<(Tensor1, DialogState)> {
    check_len("hidden state", p.dims.hidden, state.h.len())?;
    let cache = aggregate_cached(p, r, &state.h)?;
    let next = DialogState {
        h: cache.gru.h,
        round: state.round + 1,
        history: state.history.clone(),
    };
    Ok((cache.s, next))
}

/// Forward record of a whole dialog, sufficient for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub encode: Vec<EncodeCache>,
    pub aggregate: Vec<AggregateCache>,
}

impl EpisodeTrace {
    pub fn representations(&self) -> Vec<Tensor1> {
        self.aggregate.iter().map(|a| a.s.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.aggregate.len()
    }

    pub fn is_empty(&self) -> bool {
        self.aggregate.is_empty()
    }
}

/// Single step used by both the batch forward pass and live sessions.
pub fn step(
    p: &ModelParameters,
    input: &RoundInput,
    h_prev: &[f64],
    mode: DisclosureMode,
) -> Result<(EncodeCache, AggregateCache)> {
    let enc = encode_round_cached(p, &input.relevance, &input.cand_attrs, &input.cand_features, mode)?;
    let agg = aggregate_cached(p, &enc.r, h_prev)?;
    Ok((enc, agg))
}

pub fn episode_forward_traced(
    p: &ModelParameters,
    rounds: &[RoundInput],
    mode: DisclosureMode,
) -> Result<EpisodeTrace> {
    if rounds.is_empty() {
        return Err(Error::Contract("an episode needs at least one round".into()));
    }
    let mut h = vec![0.0; p.dims.hidden];
    let mut trace = EpisodeTrace {
        encode: Vec::with_capacity(rounds.len()),
        aggregate: Vec::with_capacity(rounds.len()),
    };
    for input in rounds {
        let (enc, agg) = step(p, input, &h, mode)?;
        h.clone_from(&agg.gru.h);
        trace.encode.push(enc);
        trace.aggregate.push(agg);
    }
    Ok(trace)
}

/// `s_1 … s_T` for a dialog starting from `h_0 = 0`.
pub fn episode_forward(p: &ModelParameters, rounds: &[RoundInput], mode: DisclosureMode) -> Result<Vec<Tensor1>> {
    Ok(episode_forward_traced(p, rounds, mode)?.representations())
}

/// Backpropagation through time. `grad_s[t]` is `∂L/∂s_t`; parameter
/// gradients are accumulated into `grads`.
pub fn episode_backward(
    p: &ModelParameters,
    trace: &EpisodeTrace,
    grad_s: &[Tensor1],
    grads: &mut Gradients,
) -> Result<()> {
    use ParamBlock::*;
    check_len("episode gradients", trace.len(), grad_s.len())?;
    if grads.dims != p.dims {
        return Err(Error::Contract("gradient buffer has different dimensions".into()));
    }
    let gru_w = p.gru();
    let e = p.dims.embed;
    let mut g = grads.blocks_mut();
    let mut grad_h_next = vec![0.0; p.dims.hidden];
    for t in (0..trace.len()).rev() {
        let agg = &trace.aggregate[t];
        let enc = &trace.encode[t];
        let mut grad_out = affine_backward(
            p.mat(OutputWeight),
            agg.gru.output(),
            &grad_s[t],
            g.output.0,
            g.output.1,
        )?;
        for (a, b) in grad_out.iter_mut().zip(&grad_h_next) {
            *a += b;
        }
        let (grad_r, grad_h_prev) = gru_backward(&gru_w, &agg.gru, &grad_out, &mut g.gru)?;
        grad_h_next = grad_h_prev;

        let grad_fusion_in = affine_backward(p.mat(FusionWeight), &enc.fusion_in, &grad_r, g.fusion.0, g.fusion.1)?;
        let (grad_x, grad_f) = grad_fusion_in.split_at(e);
        affine_backward(p.mat(IndicationWeight), &enc.indication_in, grad_x, g.indication.0, g.indication.1)?;
        affine_backward(p.mat(ImageWeight), &enc.image_in, grad_f, g.image.0, g.image.1)?;
    }
    Ok(())
}

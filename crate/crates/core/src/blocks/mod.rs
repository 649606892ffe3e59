//! Building blocks of the backbone: the Multi-Kernel Aggregator (a gated
//! token mixer over three dilated depthwise convolutions), the
//! Multi-Frequency Aggregator (a feed-forward channel mixer with learnable
//! DC/high-frequency rebalancing), downsampling stems, and a
//! squeeze-excitation block kept around as an ablation baseline.

use serde::{Deserialize, Serialize};

use crate::tensor::{
    Activation, ConvSpec, ParamId, ParamStore, Result, Scalar, SeededRng, Shape, Tape, Tensor,
    TensorError, Var,
};

/// Per-location channel normalization epsilon used everywhere.
pub const NORM_EPS: f64 = 1e-6;

/// Token-mixer variants for the ablation harness. The full model uses
/// `MultiDw7`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMixerKind {
    /// Gating branch only: the multi-kernel features degenerate to the
    /// normalized input.
    GatingOnly,
    /// One depthwise 7×7 (dilation 1) over all channels.
    SingleDw7,
    /// Three depthwise 7×7 convolutions with dilations 1, 2, 3 on channel
    /// slabs.
    MultiDw7,
}

/// Channel-mixer variants for the ablation harness. The full model uses
/// `FfnMf`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMixerKind {
    /// Plain depthwise-3×3 FFN, no frequency rebalancing.
    FfnOnly,
    /// FFN with a squeeze-excitation gate on the hidden features.
    FfnSe,
    /// FFN with the multi-frequency scaling.
    FfnMf,
}

/// Interpretation of the multi-frequency scaling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MfVariant {
    /// DC = spatial mean (broadcast), HC = Y − DC, output DC + γ⊙HC.
    LiteralDc,
    /// Adds a second learnable per-channel weight on the DC term:
    /// output z⊙DC + γ⊙HC, z initialized to ones.
    TwoParam,
}

/// Weight + bias of one convolution.
#[derive(Clone, Debug)]
pub struct ConvParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl ConvParams {
    /// Registers a Cout×Cin_g×K×K convolution with fan-in-scaled truncated
    /// normal weights and zero bias.
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        cout: usize,
        cin_g: usize,
        k: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let fan_in = cin_g * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        let weight = trunc_normal(Shape([cout, cin_g, k, k]), std, rng);
        Ok(ConvParams {
            weight: store.register(format!("{prefix}.weight"), weight, true)?,
            bias: store.register(format!("{prefix}.bias"), Tensor::zeros(Shape([1, cout, 1, 1])), true)?,
        })
    }
}

/// Per-channel affine of the normalization.
#[derive(Clone, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize) -> Result<Self> {
        Ok(NormParams {
            gamma: store.register(format!("{prefix}.gamma"), Tensor::full(Shape([1, c, 1, 1]), S::ONE), true)?,
            beta: store.register(format!("{prefix}.beta"), Tensor::zeros(Shape([1, c, 1, 1])), true)?,
        })
    }
}

fn trunc_normal<S: Scalar>(shape: Shape, std: f64, rng: &mut SeededRng) -> Tensor<S> {
    let mut data = Vec::with_capacity(shape.numel());
    for _ in 0..shape.numel() {
        data.push(S::from_f64(rng.truncated_normal(std)));
    }
    Tensor::from_vec(shape, data).unwrap()
}

/// Channel slab sizes from proportions; floor for the first two slabs, the
/// rounding remainder goes to the high-dilation slab.
pub fn split_sizes(c: usize, proportions: [f64; 3]) -> Result<[usize; 3]> {
    let c_l = (c as f64 * proportions[0]).floor() as usize;
    let c_m = (c as f64 * proportions[1]).floor() as usize;
    if c_l == 0 || c_m == 0 || c_l + c_m >= c {
        return Err(TensorError::InvalidArgument {
            op: "split_sizes",
            detail: format!("{c} channels cannot be split as {proportions:?}: a slab would be empty"),
        });
    }
    Ok([c_l, c_m, c - c_l - c_m])
}

/// Multi-kernel feature extraction weights.
#[derive(Clone, Debug)]
pub enum MkaMixerParams {
    GatingOnly,
    SingleDw7 {
        dw: ConvParams,
    },
    MultiDw7 {
        splits: [usize; 3],
        dw_low: ConvParams,
        dw_mid: ConvParams,
        dw_high: ConvParams,
    },
}

/// Multi-Kernel Aggregator block: norm, gate branch F_φ (pointwise conv +
/// SiLU), multi-kernel branch (dilated depthwise 7×7 trio feeding a
/// pointwise conv G_ψ + SiLU), Hadamard product, residual.
#[derive(Clone, Debug)]
pub struct MkaBlockParams {
    pub channels: usize,
    pub norm: NormParams,
    pub gate: ConvParams,
    pub mixer: MkaMixerParams,
    pub feature: ConvParams,
}

impl MkaBlockParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c: usize,
        proportions: [f64; 3],
        kind: TokenMixerKind,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let norm = NormParams::init(store, &format!("{prefix}.norm"), c)?;
        let gate = ConvParams::init(store, &format!("{prefix}.gate"), c, c, 1, rng)?;
        let mixer = match kind {
            TokenMixerKind::GatingOnly => MkaMixerParams::GatingOnly,
            TokenMixerKind::SingleDw7 => MkaMixerParams::SingleDw7 {
                dw: ConvParams::init(store, &format!("{prefix}.dw"), c, 1, 7, rng)?,
            },
            TokenMixerKind::MultiDw7 => {
                let splits = split_sizes(c, proportions)?;
                MkaMixerParams::MultiDw7 {
                    splits,
                    dw_low: ConvParams::init(store, &format!("{prefix}.dw_low"), splits[0], 1, 7, rng)?,
                    dw_mid: ConvParams::init(store, &format!("{prefix}.dw_mid"), splits[1], 1, 7, rng)?,
                    dw_high: ConvParams::init(store, &format!("{prefix}.dw_high"), splits[2], 1, 7, rng)?,
                }
            }
        };
        let feature = ConvParams::init(store, &format!("{prefix}.feature"), c, c, 1, rng)?;
        Ok(MkaBlockParams {
            channels: c,
            norm,
            gate,
            mixer,
            feature,
        })
    }
}

/// Multi-Frequency Aggregator block: norm, pointwise expansion C→rC,
/// depthwise 3×3, GELU, frequency scaling, pointwise projection, residual.
#[derive(Clone, Debug)]
pub struct MfaBlockParams {
    pub channels: usize,
    pub hidden: usize,
    pub norm: NormParams,
    pub expand: ConvParams,
    pub dw: ConvParams,
    pub scaling: ChannelScalingParams,
    pub project: ConvParams,
}

/// What happens between the FFN hidden activation and the projection.
#[derive(Clone, Debug)]
pub enum ChannelScalingParams {
    None,
    Se(SeBlockParams),
    Mf { gamma: ParamId, dc_scale: Option<ParamId> },
}

impl MfaBlockParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        c: usize,
        ratio: usize,
        kind: ChannelMixerKind,
        mf_variant: MfVariant,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let hidden = c * ratio;
        let norm = NormParams::init(store, &format!("{prefix}.norm"), c)?;
        let expand = ConvParams::init(store, &format!("{prefix}.expand"), hidden, c, 1, rng)?;
        let dw = ConvParams::init(store, &format!("{prefix}.dw"), hidden, 1, 3, rng)?;
        let scaling = match kind {
            ChannelMixerKind::FfnOnly => ChannelScalingParams::None,
            ChannelMixerKind::FfnSe => {
                ChannelScalingParams::Se(SeBlockParams::init(store, &format!("{prefix}.se"), hidden, rng)?)
            }
            ChannelMixerKind::FfnMf => {
                // γ starts at zero: a fresh block passes only the DC band.
                let gamma = store.register(
                    format!("{prefix}.mf.gamma"),
                    Tensor::zeros(Shape([1, hidden, 1, 1])),
                    true,
                )?;
                let dc_scale = match mf_variant {
                    MfVariant::LiteralDc => None,
                    MfVariant::TwoParam => Some(store.register(
                        format!("{prefix}.mf.dc_scale"),
                        Tensor::full(Shape([1, hidden, 1, 1]), S::ONE),
                        true,
                    )?),
                };
                ChannelScalingParams::Mf { gamma, dc_scale }
            }
        };
        let project = ConvParams::init(store, &format!("{prefix}.project"), c, hidden, 1, rng)?;
        Ok(MfaBlockParams {
            channels: c,
            hidden,
            norm,
            expand,
            dw,
            scaling,
            project,
        })
    }
}

/// Squeeze-excitation: spatial mean, C→C/4→C pointwise maps, sigmoid gate.
#[derive(Clone, Debug)]
pub struct SeBlockParams {
    pub channels: usize,
    pub reduce: ConvParams,
    pub expand: ConvParams,
}

impl SeBlockParams {
    pub fn init<S: Scalar>(store: &mut ParamStore<S>, prefix: &str, c: usize, rng: &mut SeededRng) -> Result<Self> {
        if c % 4 != 0 {
            return Err(TensorError::InvalidArgument {
                op: "se_block",
                detail: format!("{c} channels not divisible by 4"),
            });
        }
        Ok(SeBlockParams {
            channels: c,
            reduce: ConvParams::init(store, &format!("{prefix}.reduce"), c / 4, c, 1, rng)?,
            expand: ConvParams::init(store, &format!("{prefix}.expand"), c, c / 4, 1, rng)?,
        })
    }
}

/// Downsampling stem. Stage 1 halves twice (3→C/2→C), later stages halve
/// once; each convolution is followed by the channel normalization.
#[derive(Clone, Debug)]
pub enum StemParams {
    Stage1 {
        conv1: ConvParams,
        norm1: NormParams,
        conv2: ConvParams,
        norm2: NormParams,
        out_channels: usize,
    },
    Later {
        conv: ConvParams,
        norm: NormParams,
        out_channels: usize,
    },
}

impl StemParams {
    pub fn init_stage1<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let mid = out_c / 2;
        Ok(StemParams::Stage1 {
            conv1: ConvParams::init(store, &format!("{prefix}.conv1"), mid, in_c, 3, rng)?,
            norm1: NormParams::init(store, &format!("{prefix}.norm1"), mid)?,
            conv2: ConvParams::init(store, &format!("{prefix}.conv2"), out_c, mid, 3, rng)?,
            norm2: NormParams::init(store, &format!("{prefix}.norm2"), out_c)?,
            out_channels: out_c,
        })
    }

    pub fn init_later<S: Scalar>(
        store: &mut ParamStore<S>,
        prefix: &str,
        in_c: usize,
        out_c: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        Ok(StemParams::Later {
            conv: ConvParams::init(store, &format!("{prefix}.conv"), out_c, in_c, 3, rng)?,
            norm: NormParams::init(store, &format!("{prefix}.norm"), out_c)?,
            out_channels: out_c,
        })
    }

    pub fn out_channels(&self) -> usize {
        match self {
            StemParams::Stage1 { out_channels, .. } | StemParams::Later { out_channels, .. } => *out_channels,
        }
    }
}

fn conv1x1<S: Scalar>(store: &ParamStore<S>, tape: &mut Tape<S>, x: Var, p: &ConvParams) -> Result<Var> {
    let w = tape.param(store, p.weight);
    let b = tape.param(store, p.bias);
    tape.conv2d(x, w, Some(b), ConvSpec::pointwise())
}

fn apply_norm<S: Scalar>(store: &ParamStore<S>, tape: &mut Tape<S>, x: Var, p: &NormParams) -> Result<Var> {
    let gamma = tape.param(store, p.gamma);
    let beta = tape.param(store, p.beta);
    tape.norm_channels(x, gamma, beta, NORM_EPS)
}

/// Multi-kernel feature extraction: channel slabs through depthwise 7×7
/// convolutions with dilations 1, 2, 3 ("same" padding 3d), concatenated
/// back in order. Shape-preserving.
pub fn multi_kernel_features<S: Scalar>(
    store: &ParamStore<S>,
    tape: &mut Tape<S>,
    x: Var,
    p: &MkaBlockParams,
) -> Result<Var> {
    match &p.mixer {
        MkaMixerParams::GatingOnly => Ok(x),
        MkaMixerParams::SingleDw7 { dw } => {
            let w = tape.param(store, dw.weight);
            let b = tape.param(store, dw.bias);
            tape.conv2d(x, w, Some(b), ConvSpec::depthwise_same(p.channels, 7, 1))
        }
        MkaMixerParams::MultiDw7 {
            splits,
            dw_low,
            dw_mid,
            dw_high,
        } => {
            let slabs = tape.split_channels(x, splits)?;
            let mut outs = Vec::with_capacity(3);
            for (slab, (conv, dilation)) in slabs
                .into_iter()
                .zip([(dw_low, 1usize), (dw_mid, 2), (dw_high, 3)])
            {
                let w = tape.param(store, conv.weight);
                let b = tape.param(store, conv.bias);
                let c_slab = tape.value(slab).shape().c();
                outs.push(tape.conv2d(slab, w, Some(b), ConvSpec::depthwise_same(c_slab, 7, dilation))?);
            }
            tape.concat_channels(&outs)
        }
    }
}

/// Gated aggregation: SiLU(Conv₁ₓ₁(x_normed)) ⊙ SiLU(Conv₁ₓ₁(y_c)).
pub fn gated_aggregate<S: Scalar>(
    store: &ParamStore<S>,
    tape: &mut Tape<S>,
    x_normed: Var,
    y_c: Var,
    p: &MkaBlockParams,
) -> Result<Var> {
    if tape.value(x_normed).shape() != tape.value(y_c).shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gated_aggregate",
            detail: format!(
                "{} vs {}",
                tape.value(x_normed).shape(),
                tape.value(y_c).shape()
            ),
        });
    }
    let gate_pre = conv1x1(store, tape, x_normed, &p.gate)?;
    let gate = tape.activation(Activation::Silu, gate_pre)?;
    let feat_pre = conv1x1(store, tape, y_c, &p.feature)?;
    let feat = tape.activation(Activation::Silu, feat_pre)?;
    tape.mul(gate, feat)
}

/// Full MKA block: residual sum of the input and the gated aggregation of
/// multi-kernel features of the normalized input.
pub fn mka_forward<S: Scalar>(
    store: &ParamStore<S>,
    tape: &mut Tape<S>,
    x: Var,
    p: &MkaBlockParams,
) -> Result<Var> {
    let xn = apply_norm(store, tape, x, &p.norm)?;
    let yc = multi_kernel_features(store, tape, xn, p)?;
    let z = gated_aggregate(store, tape, xn, yc, p)?;
    tape.add(x, z)
}

/// Frequency rebalancing: DC = spatial mean (broadcast), HC = y − DC,
/// output DC + γ⊙HC (plus an optional learnable DC weight).
pub fn mf_scale<S: Scalar>(
    tape: &mut Tape<S>,
    y: Var,
    gamma: Var,
    dc_scale: Option<Var>,
) -> Result<Var> {
    let c = tape.value(y).shape().c();
    if tape.value(gamma).shape() != Shape([1, c, 1, 1]) {
        return Err(TensorError::ShapeMismatch {
            op: "mf_scale",
            detail: format!("gamma {} for {c} channels", tape.value(gamma).shape()),
        });
    }
    let dc = tape.spatial_mean(y)?;
    let hc = tape.sub(y, dc)?;
    let hc_scaled = tape.mul(hc, gamma)?;
    let dc_term = match dc_scale {
        None => dc,
        Some(z) => tape.mul(dc, z)?,
    };
    tape.add(hc_scaled, dc_term)
}

/// Squeeze-excitation gate: x ⊙ sigmoid(W₂·relu(W₁·mean(x))).
pub fn se_forward<S: Scalar>(
    store: &ParamStore<S>,
    tape: &mut Tape<S>,
    x: Var,
    p: &SeBlockParams,
) -> Result<Var> {
    if tape.value(x).shape().c() != p.channels {
        return Err(TensorError::ShapeMismatch {
            op: "se_forward",
            detail: format!("{} input channels, block has {}", tape.value(x).shape().c(), p.channels),
        });
    }
    let s = tape.spatial_mean(x)?;
    let r = conv1x1(store, tape, s, &p.reduce)?;
    let r = tape.activation(Activation::Relu, r)?;
    let e = conv1x1(store, tape, r, &p.expand)?;
    let g = tape.activation(Activation::Sigmoid, e)?;
    tape.mul(x, g)
}

/// Full MFA block: Y = GELU(DW₃ₓ₃(Conv₁ₓ₁(Norm(X)))), then frequency
/// scaling, projection and residual.
pub fn mfa_forward<S: Scalar>(
    store: &ParamStore<S>,
    tape: &mut Tape<S>,
    x: Var,
    p: &MfaBlockParams,
) -> Result<Var> {
    let xn = apply_norm(store, tape, x, &p.norm)?;
    let h = conv1x1(store, tape, xn, &p.expand)?;
    let w = tape.param(store, p.dw.weight);
    let b = tape.param(store, p.dw.bias);
    let h = tape.conv2d(h, w, Some(b), ConvSpec::depthwise_same(p.hidden, 3, 1))?;
    let y = tape.activation(Activation::Gelu, h)?;
    let scaled = match &p.scaling {
        ChannelScalingParams::None => y,
        ChannelScalingParams::Se(se) => se_forward(store, tape, y, se)?,
        ChannelScalingParams::Mf { gamma, dc_scale } => {
            let g = tape.param(store, *gamma);
            let z = dc_scale.map(|id| tape.param(store, id));
            mf_scale(tape, y, g, z)?
        }
    };
    let z = conv1x1(store, tape, scaled, &p.project)?;
    tape.add(z, x)
}

#[cfg(test)]
mod tests;

/// Downsampling stem. Rejects odd or too-small spatial extents.
pub fn stem_forward<S: Scalar>(
    store: &ParamStore<S>,
    tape: &mut Tape<S>,
    x: Var,
    p: &StemParams,
) -> Result<Var> {
    let s = tape.value(x).shape();
    let (h, w) = (s.h(), s.w());
    let min = match p {
        StemParams::Stage1 { .. } => 4,
        StemParams::Later { .. } => 2,
    };
    if h % 2 != 0 || w % 2 != 0 || h < min || w < min {
        return Err(TensorError::InvalidArgument {
            op: "stem_forward",
            detail: format!("spatial extents {h}x{w} must be even and at least {min}"),
        });
    }
    match p {
        StemParams::Stage1 {
            conv1,
            norm1,
            conv2,
            norm2,
            ..
        } => {
            let wv = tape.param(store, conv1.weight);
            let bv = tape.param(store, conv1.bias);
            let x = tape.conv2d(x, wv, Some(bv), ConvSpec::strided(2, 1))?;
            let x = apply_norm(store, tape, x, norm1)?;
            let wv = tape.param(store, conv2.weight);
            let bv = tape.param(store, conv2.bias);
            let x = tape.conv2d(x, wv, Some(bv), ConvSpec::strided(2, 1))?;
            apply_norm(store, tape, x, norm2)
        }
        StemParams::Later { conv, norm, .. } => {
            let wv = tape.param(store, conv.weight);
            let bv = tape.param(store, conv.bias);
            let x = tape.conv2d(x, wv, Some(bv), ConvSpec::strided(2, 1))?;
            apply_norm(store, tape, x, norm)
        }
    }
}

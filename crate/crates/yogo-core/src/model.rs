//! The network graph: per-frame feature extraction, synthesis of features
//! for the in-between time steps, a backward recurrent sweep followed by a
//! forward sweep whose cells align hidden states with deformable
//! convolutions before fusing them, a fusion stage over the two directions,
//! and three reconstruction heads emitting each frame together with its
//! structure and detail components.
//!
//! `n+1` low-resolution input frames produce `2n+1` outputs of each kind at
//! 4x spatial resolution. All per-timestep sub-networks share weights, so
//! sequence length is free.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::layers::{
    ChannelFuse, Conv2d, DeformConv2d, OffsetEstimator, ResidualBlock, ResidualBranch,
    SqueezeExcite,
};
use crate::nn::param::{stream_rng, ParamStore};
use crate::nn::LEAKY_SLOPE;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Scalar, Tensor};

/// Ablation variant selector.
///
/// * `A` — single-direction propagation, direct fusion
/// * `B` — bidirectional propagation, direct fusion
/// * `C` — bidirectional propagation, hybrid (structure/detail) fusion
/// * `D` — bidirectional interactive propagation, direct fusion
/// * `E` — bidirectional interactive propagation, hybrid fusion (full model)
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    A,
    B,
    C,
    D,
    E,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Variant::A),
            "b" => Ok(Variant::B),
            "c" => Ok(Variant::C),
            "d" => Ok(Variant::D),
            "e" => Ok(Variant::E),
            other => Err(Error::config(format!(
                "unknown variant {other:?}, expected one of a..e"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::A => "a",
            Variant::B => "b",
            Variant::C => "c",
            Variant::D => "d",
            Variant::E => "e",
        }
    }

    /// Whether the forward sweep exists and whether it consumes the backward
    /// hidden state.
    fn propagation(self) -> PropagationKind {
        match self {
            Variant::A => PropagationKind::BackwardOnly,
            Variant::B | Variant::C => PropagationKind::Bidirectional,
            Variant::D | Variant::E => PropagationKind::Interactive,
        }
    }

    fn hybrid_fusion(self) -> bool {
        matches!(self, Variant::C | Variant::E)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropagationKind {
    BackwardOnly,
    Bidirectional,
    Interactive,
}

/// Order of the two sub-units inside each recurrent cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellOrder {
    /// Align each hidden state to the current feature, then fuse and refine.
    AlignThenFuse,
    /// Fuse and refine first, then align the fused state once.
    FuseThenAlign,
}

impl CellOrder {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dfu_then_fru" => Ok(CellOrder::AlignThenFuse),
            "fru_then_dfu" => Ok(CellOrder::FuseThenAlign),
            other => Err(Error::config(format!(
                "unknown cell_order {other:?}, expected dfu_then_fru or fru_then_dfu"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellOrder::AlignThenFuse => "dfu_then_fru",
            CellOrder::FuseThenAlign => "fru_then_dfu",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub channels: usize,
    /// Residual blocks refining the backward cell's fusion.
    pub frb_backward: usize,
    /// Residual blocks refining the forward cell's fusion.
    pub frb_forward: usize,
    /// Chained hybrid fusion blocks (variants c and e).
    pub hfb_count: usize,
    /// Residual blocks in the per-frame feature extractor.
    pub fe_resblocks: usize,
    /// Spatial upscale factor; the reconstruction heads implement exactly 4.
    pub scale_spatial: usize,
    /// Temporal upscale factor; the graph implements exactly 2.
    pub scale_temporal: usize,
    pub variant: Variant,
    pub cell_order: CellOrder,
    pub kernel_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 56,
            frb_backward: 4,
            frb_forward: 6,
            hfb_count: 9,
            fe_resblocks: 5,
            scale_spatial: 4,
            scale_temporal: 2,
            variant: Variant::E,
            cell_order: CellOrder::AlignThenFuse,
            kernel_k: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::config("channels must be >= 1"));
        }
        if self.scale_spatial != 4 {
            return Err(Error::config("scale_spatial is fixed at 4"));
        }
        if self.scale_temporal != 2 {
            return Err(Error::config("scale_temporal is fixed at 2"));
        }
        if self.kernel_k % 2 == 0 || self.kernel_k == 0 {
            return Err(Error::config("kernel_k must be odd and >= 1"));
        }
        if self.variant.hybrid_fusion() && self.hfb_count == 0 {
            return Err(Error::config("hfb_count must be >= 1 for variants c and e"));
        }
        Ok(())
    }
}

/// One recurrent cell: offset-guided deformable alignment of its hidden
/// inputs plus 1x1 fusion with the current feature refined by residual
/// blocks, in either order.
pub struct RecurrentCell {
    estimators: Vec<OffsetEstimator>,
    aligners: Vec<DeformConv2d>,
    fusion: FusionUnit,
    order: CellOrder,
    n_hidden: usize,
}

impl RecurrentCell {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        k: usize,
        n_hidden: usize,
        refine_blocks: usize,
        order: CellOrder,
    ) -> Self {
        let n_align = match order {
            CellOrder::AlignThenFuse => n_hidden,
            CellOrder::FuseThenAlign => 1,
        };
        let estimators = (0..n_align)
            .map(|i| OffsetEstimator::new(store, rng, &format!("{name}.est{i}"), channels, k))
            .collect();
        let aligners = (0..n_align)
            .map(|i| {
                DeformConv2d::new(store, rng, &format!("{name}.align{i}"), channels, channels, k)
            })
            .collect();
        let fusion = FusionUnit::new(
            store,
            rng,
            &format!("{name}.fru"),
            (n_hidden + 1) * channels,
            channels,
            refine_blocks,
            k,
        );
        RecurrentCell {
            estimators,
            aligners,
            fusion,
            order,
            n_hidden,
        }
    }

    /// Offset estimation plus deformable alignment of one hidden state
    /// against the current feature.
    pub fn align_hidden<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        branch: usize,
        hidden: NodeId,
        feature: NodeId,
    ) -> Result<NodeId> {
        let offsets = self.estimators[branch].forward(tape, store, hidden, feature)?;
        self.aligners[branch].forward(tape, store, hidden, offsets)
    }

    pub fn fusion_unit(&self) -> &FusionUnit {
        &self.fusion
    }

    /// New hidden state from `hiddens` (length fixed at construction) and the
    /// current feature.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        hiddens: &[NodeId],
        feature: NodeId,
    ) -> Result<NodeId> {
        if hiddens.len() != self.n_hidden {
            return Err(Error::shape(format!(
                "recurrent cell expects {} hidden states, got {}",
                self.n_hidden,
                hiddens.len()
            )));
        }
        match self.order {
            CellOrder::AlignThenFuse => {
                let mut parts = Vec::with_capacity(hiddens.len() + 1);
                for (i, &h) in hiddens.iter().enumerate() {
                    parts.push(self.align_hidden(tape, store, i, h, feature)?);
                }
                parts.push(feature);
                self.fusion.forward(tape, store, &parts)
            }
            CellOrder::FuseThenAlign => {
                let mut parts = hiddens.to_vec();
                parts.push(feature);
                let fused = self.fusion.forward(tape, store, &parts)?;
                self.align_hidden(tape, store, 0, fused, feature)
            }
        }
    }
}

/// 1x1 channel fusion followed by residual refinement blocks.
pub struct FusionUnit {
    fuse: ChannelFuse,
    blocks: Vec<ResidualBlock>,
}

impl FusionUnit {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in_total: usize,
        c_out: usize,
        blocks: usize,
        k: usize,
    ) -> Self {
        FusionUnit {
            fuse: ChannelFuse::new(store, rng, &format!("{name}.fuse"), c_in_total, c_out),
            blocks: (0..blocks)
                .map(|i| ResidualBlock::new(store, rng, &format!("{name}.block{i}"), c_out, k))
                .collect(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        parts: &[NodeId],
    ) -> Result<NodeId> {
        let mut h = self.fuse.forward(tape, store, parts)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

/// Three-stream fusion block: each direction is refined by its own residual
/// branch and re-added, while the center stream gains both branches
/// cross-gated by squeeze-excite weights computed from the opposite branch.
pub struct HybridFusionBlock {
    r1: ResidualBranch,
    r2: ResidualBranch,
    se1: SqueezeExcite,
    se2: SqueezeExcite,
}

impl HybridFusionBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        HybridFusionBlock {
            r1: ResidualBranch::new(store, rng, &format!("{name}.r1"), channels, k),
            r2: ResidualBranch::new(store, rng, &format!("{name}.r2"), channels, k),
            se1: SqueezeExcite::new(store, rng, &format!("{name}.se1"), channels),
            se2: SqueezeExcite::new(store, rng, &format!("{name}.se2"), channels),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_b: NodeId,
        h_f: NodeId,
        f: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let r1 = self.r1.forward(tape, store, h_b)?;
        let r2 = self.r2.forward(tape, store, h_f)?;
        let h_b_out = tape.add(h_b, r1)?;
        let h_f_out = tape.add(h_f, r2)?;
        let g1 = self.se1.forward(tape, store, r1)?;
        let g2 = self.se2.forward(tape, store, r2)?;
        let cross1 = tape.channel_scale(g1, r2)?;
        let cross2 = tape.channel_scale(g2, r1)?;
        let f_out = tape.add(f, cross1)?;
        let f_out = tape.add(f_out, cross2)?;
        Ok((h_b_out, h_f_out, f_out))
    }
}

/// Ablation baseline for the fusion stage: concatenate the three streams,
/// fuse 1x1 and refine with two residual blocks.
pub struct DirectFusion {
    fuse: ChannelFuse,
    blocks: Vec<ResidualBlock>,
}

impl DirectFusion {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        DirectFusion {
            fuse: ChannelFuse::new(store, rng, &format!("{name}.fuse"), 3 * channels, channels),
            blocks: (0..2)
                .map(|i| ResidualBlock::new(store, rng, &format!("{name}.block{i}"), channels, k))
                .collect(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h_b: NodeId,
        h_f: NodeId,
        f: NodeId,
    ) -> Result<NodeId> {
        let mut h = self.fuse.forward(tape, store, &[h_b, h_f, f])?;
        for block in &self.blocks {
            h = block.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

enum FusionStage {
    Hybrid(Vec<HybridFusionBlock>),
    Direct(DirectFusion),
}

/// 4x upsampling head: two conv + pixel-shuffle stages, then conv,
/// leaky-rectifier, conv projecting to RGB.
pub struct ReconHead {
    up1: Conv2d,
    up2: Conv2d,
    conv3: Conv2d,
    out: Conv2d,
}

impl ReconHead {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        k: usize,
        output_bias: f64,
    ) -> Self {
        let head = ReconHead {
            up1: Conv2d::new(store, rng, &format!("{name}.up1"), channels, 4 * channels, k),
            up2: Conv2d::new(store, rng, &format!("{name}.up2"), channels, 4 * channels, k),
            conv3: Conv2d::new(store, rng, &format!("{name}.conv3"), channels, channels, k),
            out: Conv2d::new(store, rng, &format!("{name}.out"), channels, 3, k),
        };
        // Start the output at the target mean so early steps do not chase the
        // DC level.
        *store.value_mut(head.out.bias) = Tensor::full(&[3], T::from_f64(output_bias));
        head
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: NodeId,
    ) -> Result<NodeId> {
        let h = self.up1.forward(tape, store, x)?;
        let h = tape.pixel_shuffle(h, 2)?;
        let h = self.up2.forward(tape, store, h)?;
        let h = tape.pixel_shuffle(h, 2)?;
        let h = self.conv3.forward(tape, store, h)?;
        let h = tape.leaky_relu(h, LEAKY_SLOPE);
        self.out.forward(tape, store, h)
    }
}

/// Per-frame feature extractor: one conv then residual blocks, weights
/// shared across frames.
pub struct FeatureExtractor {
    conv_in: Conv2d,
    blocks: Vec<ResidualBlock>,
}

impl FeatureExtractor {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        resblocks: usize,
        k: usize,
    ) -> Self {
        FeatureExtractor {
            conv_in: Conv2d::new(store, rng, &format!("{name}.conv_in"), 3, channels, k),
            blocks: (0..resblocks)
                .map(|i| ResidualBlock::new(store, rng, &format!("{name}.block{i}"), channels, k))
                .collect(),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        frame: NodeId,
    ) -> Result<NodeId> {
        let mut h = self.conv_in.forward(tape, store, frame)?;
        for block in &self.blocks {
            h = block.forward(tape, store, h)?;
        }
        Ok(h)
    }
}

/// Builds the feature for an in-between time step from its two neighbors.
pub struct SynthUnit {
    fuse: ChannelFuse,
    block: ResidualBlock,
}

impl SynthUnit {
    pub(crate) fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        k: usize,
    ) -> Self {
        SynthUnit {
            fuse: ChannelFuse::new(store, rng, &format!("{name}.fuse"), 2 * channels, channels),
            block: ResidualBlock::new(store, rng, &format!("{name}.block"), channels, k),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        f_prev: NodeId,
        f_next: NodeId,
    ) -> Result<NodeId> {
        if !tape.value(f_prev).same_shape(tape.value(f_next)) {
            return Err(Error::shape("synth: neighbor features differ in shape"));
        }
        let fused = self.fuse.forward(tape, store, &[f_prev, f_next])?;
        self.block.forward(tape, store, fused)
    }
}

/// Hidden states and features for one sequence, all at LR resolution and
/// indexed by time step `0..2n+1`.
pub struct SequenceState {
    pub features: Vec<NodeId>,
    pub backward_hidden: Vec<NodeId>,
    pub forward_hidden: Vec<NodeId>,
}

/// Output node handles of one forward pass; all lists have length `2n+1`.
pub struct ForwardNodes {
    pub frames: Vec<NodeId>,
    pub structures: Vec<NodeId>,
    pub details: Vec<NodeId>,
}

impl ForwardNodes {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

pub struct Model<T> {
    cfg: ModelConfig,
    pub store: ParamStore<T>,
    pub fe: FeatureExtractor,
    pub synth: SynthUnit,
    pub backward_cell: RecurrentCell,
    pub forward_cell: Option<RecurrentCell>,
    fusion: FusionStage,
    pub recon_frame: ReconHead,
    pub recon_structure: ReconHead,
    pub recon_detail: ReconHead,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, 0x494e_4954); // init stream
        let c = cfg.channels;
        let k = cfg.kernel_k;

        let fe = FeatureExtractor::new(&mut store, &mut rng, "fe", c, cfg.fe_resblocks, k);
        let synth = SynthUnit::new(&mut store, &mut rng, "synth", c, k);
        let backward_cell = RecurrentCell::new(
            &mut store,
            &mut rng,
            "prop.bwd",
            c,
            k,
            1,
            cfg.frb_backward,
            cfg.cell_order,
        );
        let forward_cell = match cfg.variant.propagation() {
            PropagationKind::BackwardOnly => None,
            PropagationKind::Bidirectional => Some(RecurrentCell::new(
                &mut store,
                &mut rng,
                "prop.fwd",
                c,
                k,
                1,
                cfg.frb_forward,
                cfg.cell_order,
            )),
            PropagationKind::Interactive => Some(RecurrentCell::new(
                &mut store,
                &mut rng,
                "prop.fwd",
                c,
                k,
                2,
                cfg.frb_forward,
                cfg.cell_order,
            )),
        };
        let fusion = if cfg.variant.hybrid_fusion() {
            FusionStage::Hybrid(
                (0..cfg.hfb_count)
                    .map(|i| {
                        HybridFusionBlock::new(&mut store, &mut rng, &format!("hfm.block{i}"), c, k)
                    })
                    .collect(),
            )
        } else {
            FusionStage::Direct(DirectFusion::new(&mut store, &mut rng, "direct", c, k))
        };
        let recon_frame = ReconHead::new(&mut store, &mut rng, "recon.frame", c, k, 0.5);
        let recon_structure = ReconHead::new(&mut store, &mut rng, "recon.structure", c, k, 0.5);
        let recon_detail = ReconHead::new(&mut store, &mut rng, "recon.detail", c, k, 0.0);

        Ok(Model {
            cfg,
            store,
            fe,
            synth,
            backward_cell,
            forward_cell,
            fusion,
            recon_frame,
            recon_structure,
            recon_detail,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn hybrid_blocks(&self) -> Option<&[HybridFusionBlock]> {
        match &self.fusion {
            FusionStage::Hybrid(blocks) => Some(blocks),
            FusionStage::Direct(_) => None,
        }
    }

    pub fn direct_fusion(&self) -> Option<&DirectFusion> {
        match &self.fusion {
            FusionStage::Direct(d) => Some(d),
            FusionStage::Hybrid(_) => None,
        }
    }

    /// Shared feature extraction over the input frames (time steps
    /// `0, 2, 4, ...` of the output grid).
    pub fn extract_features(
        &self,
        tape: &mut Tape<T>,
        lr_frames: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        if lr_frames.len() < 2 {
            return Err(Error::shape("need at least 2 input frames (n >= 1)"));
        }
        let first_shape = tape.value(lr_frames[0]).shape().to_vec();
        for &f in lr_frames {
            if tape.value(f).shape() != first_shape {
                return Err(Error::shape("input frames differ in resolution"));
            }
        }
        lr_frames
            .iter()
            .map(|&f| self.fe.forward(tape, &self.store, f))
            .collect()
    }

    /// Fill the full time grid: extracted features at even steps, synthesized
    /// features in between.
    pub fn fill_time_grid(&self, tape: &mut Tape<T>, extracted: &[NodeId]) -> Result<Vec<NodeId>> {
        let total = 2 * extracted.len() - 1;
        let mut features = Vec::with_capacity(total);
        for t in 0..total {
            if t % 2 == 0 {
                features.push(extracted[t / 2]);
            } else {
                let f =
                    self.synth
                        .forward(tape, &self.store, extracted[t / 2], extracted[t / 2 + 1])?;
                features.push(f);
            }
        }
        Ok(features)
    }

    /// Backward sweep then (except for the single-direction variant) forward
    /// sweep over all time steps. Boundary hidden states are zero.
    pub fn propagate(&self, tape: &mut Tape<T>, features: &[NodeId]) -> Result<SequenceState> {
        let total = features.len();
        let shape = tape.value(features[0]).shape().to_vec();
        let zero = tape.leaf(Tensor::zeros(&shape));

        let mut backward_hidden = vec![zero; total];
        for t in (0..total).rev() {
            let next = if t + 1 < total {
                backward_hidden[t + 1]
            } else {
                zero
            };
            backward_hidden[t] =
                self.backward_cell
                    .forward(tape, &self.store, &[next], features[t])?;
        }

        let forward_hidden = match (self.cfg.variant.propagation(), &self.forward_cell) {
            (PropagationKind::BackwardOnly, _) => backward_hidden.clone(),
            (PropagationKind::Bidirectional, Some(cell)) => {
                let mut hf = vec![zero; total];
                for t in 0..total {
                    let prev = if t > 0 { hf[t - 1] } else { zero };
                    hf[t] = cell.forward(tape, &self.store, &[prev], features[t])?;
                }
                hf
            }
            (PropagationKind::Interactive, Some(cell)) => {
                let mut hf = vec![zero; total];
                for t in 0..total {
                    let prev = if t > 0 { hf[t - 1] } else { zero };
                    let next_b = if t + 1 < total {
                        backward_hidden[t + 1]
                    } else {
                        zero
                    };
                    hf[t] = cell.forward(tape, &self.store, &[prev, next_b], features[t])?;
                }
                hf
            }
            _ => unreachable!("forward cell presence follows the variant"),
        };

        Ok(SequenceState {
            features: features.to_vec(),
            backward_hidden,
            forward_hidden,
        })
    }

    /// Fusion stage for one time step: either the chained hybrid blocks or
    /// the direct-fusion baseline. Returns `(h_b_final, h_f_final, f_final)`.
    pub fn fuse_step(
        &self,
        tape: &mut Tape<T>,
        h_b: NodeId,
        h_f: NodeId,
        f: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        match &self.fusion {
            FusionStage::Hybrid(blocks) => {
                let (mut hb, mut hf, mut fc) = (h_b, h_f, f);
                for block in blocks {
                    let (nb, nf, nc) = block.forward(tape, &self.store, hb, hf, fc)?;
                    hb = nb;
                    hf = nf;
                    fc = nc;
                }
                Ok((hb, hf, fc))
            }
            FusionStage::Direct(direct) => {
                let fused = direct.forward(tape, &self.store, h_b, h_f, f)?;
                Ok((h_b, h_f, fused))
            }
        }
    }

    /// Reconstruction heads: frame from the fused stream, structure from the
    /// backward stream, detail from the forward stream.
    pub fn reconstruct(
        &self,
        tape: &mut Tape<T>,
        f_final: NodeId,
        h_b_final: NodeId,
        h_f_final: NodeId,
    ) -> Result<(NodeId, NodeId, NodeId)> {
        let frame = self.recon_frame.forward(tape, &self.store, f_final)?;
        let structure = self.recon_structure.forward(tape, &self.store, h_b_final)?;
        let detail = self.recon_detail.forward(tape, &self.store, h_f_final)?;
        Ok((frame, structure, detail))
    }

    /// Full pass: `n+1` LR frames in, `2n+1` frames plus structure and
    /// detail images out, at 4x resolution.
    pub fn forward(&self, tape: &mut Tape<T>, lr_frames: &[Tensor<T>]) -> Result<ForwardNodes> {
        let frame_nodes: Vec<NodeId> = lr_frames.iter().map(|f| tape.leaf(f.clone())).collect();
        self.forward_nodes(tape, &frame_nodes)
    }

    /// Like [`Model::forward`] but over frames already on the tape.
    pub fn forward_nodes(&self, tape: &mut Tape<T>, lr_frames: &[NodeId]) -> Result<ForwardNodes> {
        let extracted = self.extract_features(tape, lr_frames)?;
        let features = self.fill_time_grid(tape, &extracted)?;
        let state = self.propagate(tape, &features)?;

        let total = features.len();
        let mut frames = Vec::with_capacity(total);
        let mut structures = Vec::with_capacity(total);
        let mut details = Vec::with_capacity(total);
        for t in 0..total {
            let (hb, hf, fc) = self.fuse_step(
                tape,
                state.backward_hidden[t],
                state.forward_hidden[t],
                state.features[t],
            )?;
            let (frame, structure, detail) = self.reconstruct(tape, fc, hb, hf)?;
            frames.push(frame);
            structures.push(structure);
            details.push(detail);
        }
        Ok(ForwardNodes {
            frames,
            structures,
            details,
        })
    }

    /// Trainable scalar totals grouped by top-level component.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut groups: Vec<(String, usize)> = Vec::new();
        for (_, name, value) in self.store.iter() {
            let prefix = name.split('.').next().unwrap_or(name).to_string();
            match groups.iter_mut().find(|(p, _)| *p == prefix) {
                Some((_, count)) => *count += value.len(),
                None => groups.push((prefix, value.len())),
            }
        }
        groups
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_cfg(variant: Variant) -> ModelConfig {
        ModelConfig {
            channels: 8,
            frb_backward: 1,
            frb_forward: 1,
            hfb_count: 2,
            fe_resblocks: 1,
            variant,
            ..ModelConfig::default()
        }
    }

    fn rand_frames(count: usize, h: usize, w: usize, seed: u64) -> Vec<Tensor<f64>> {
        use rand::Rng;
        let mut rng = stream_rng(seed, 0xF0);
        (0..count)
            .map(|_| Tensor::from_fn(&[3, h, w], |_| rng.gen::<f64>()))
            .collect()
    }

    #[test]
    fn output_count_law_holds_for_all_sizes() {
        let model = Model::<f64>::new(tiny_cfg(Variant::E), 3).unwrap();
        for n_in in 2..=4 {
            let frames = rand_frames(n_in, 6, 6, n_in as u64);
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &frames).unwrap();
            assert_eq!(out.frames.len(), 2 * n_in - 1);
            assert_eq!(out.structures.len(), 2 * n_in - 1);
            assert_eq!(out.details.len(), 2 * n_in - 1);
            for &f in &out.frames {
                assert_eq!(tape.value(f).shape(), &[3, 24, 24]);
                assert!(tape.value(f).all_finite());
            }
        }
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let model = Model::<f64>::new(tiny_cfg(Variant::E), 9).unwrap();
        let frames = rand_frames(2, 8, 8, 42);
        let run = || {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &frames).unwrap();
            out.frames
                .iter()
                .map(|&f| tape.value(f).clone())
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn zero_weights_give_zero_features_and_hiddens() {
        let mut model = Model::<f64>::new(tiny_cfg(Variant::E), 1).unwrap();
        for id in model.store.ids().collect::<Vec<_>>() {
            let shape = model.store.value(id).shape().to_vec();
            *model.store.value_mut(id) = Tensor::zeros(&shape);
        }
        let frames = rand_frames(2, 6, 6, 5);
        let mut tape = Tape::new();
        let frame_nodes: Vec<NodeId> = frames.iter().map(|f| tape.leaf(f.clone())).collect();
        let extracted = model.extract_features(&mut tape, &frame_nodes).unwrap();
        let features = model.fill_time_grid(&mut tape, &extracted).unwrap();
        let state = model.propagate(&mut tape, &features).unwrap();
        let zero = Tensor::zeros(&[8, 6, 6]);
        for t in 0..3 {
            assert_eq!(tape.value(state.features[t]).max_abs_diff(&zero), 0.0);
            assert_eq!(tape.value(state.backward_hidden[t]).max_abs_diff(&zero), 0.0);
            assert_eq!(tape.value(state.forward_hidden[t]).max_abs_diff(&zero), 0.0);
        }
    }

    #[test]
    fn identical_inputs_share_extracted_features() {
        let model = Model::<f64>::new(tiny_cfg(Variant::E), 21).unwrap();
        let frame = rand_frames(1, 6, 6, 77).pop().unwrap();
        let mut tape = Tape::new();
        let a = tape.leaf(frame.clone());
        let b = tape.leaf(frame);
        let feats = model.extract_features(&mut tape, &[a, b]).unwrap();
        assert_eq!(
            tape.value(feats[0]).max_abs_diff(tape.value(feats[1])),
            0.0
        );
    }

    #[test]
    fn mixed_resolutions_rejected() {
        let model = Model::<f64>::new(tiny_cfg(Variant::E), 3).unwrap();
        let mut frames = rand_frames(2, 6, 6, 1);
        frames[1] = Tensor::zeros(&[3, 8, 8]);
        let mut tape = Tape::new();
        assert!(model.forward(&mut tape, &frames).is_err());
    }

    #[test]
    fn variant_b_and_e_differ_with_shared_weights() {
        // interaction feeds future backward states into the forward sweep,
        // so generic weights must produce different outputs
        let model_e = Model::<f64>::new(tiny_cfg(Variant::E), 7).unwrap();
        let mut model_b = Model::<f64>::new(tiny_cfg(Variant::B), 7).unwrap();
        model_b.store.copy_matching_from(&model_e.store);
        let frames = rand_frames(3, 6, 6, 11);

        let run = |model: &Model<f64>| {
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &frames).unwrap();
            out.frames
                .iter()
                .map(|&f| tape.value(f).clone())
                .collect::<Vec<_>>()
        };
        let (ea, eb) = (run(&model_e), run(&model_b));
        for t in 0..5 {
            assert!(
                ea[t].max_abs_diff(&eb[t]) > 1e-9,
                "step {t}: variants should differ"
            );
        }
    }

    #[test]
    fn variant_validation() {
        let mut cfg = tiny_cfg(Variant::E);
        cfg.hfb_count = 0;
        assert!(cfg.validate().is_err());
        cfg.variant = Variant::D;
        assert!(cfg.validate().is_ok());
        cfg.scale_spatial = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn config_parsing_round_trips() {
        for v in ["a", "b", "c", "d", "e"] {
            assert_eq!(Variant::parse(v).unwrap().as_str(), v);
        }
        assert!(Variant::parse("x").is_err());
        for o in ["dfu_then_fru", "fru_then_dfu"] {
            assert_eq!(CellOrder::parse(o).unwrap().as_str(), o);
        }
        assert!(CellOrder::parse("fru").is_err());
    }

    #[test]
    fn param_count_is_deterministic_and_quadratic_in_width() {
        let count = |channels: usize| {
            let cfg = ModelConfig {
                channels,
                ..tiny_cfg(Variant::E)
            };
            Model::<f64>::new(cfg, 0).unwrap().store.scalar_count()
        };
        assert_eq!(count(8), count(8));
        let (c8, c16) = (count(8), count(16));
        let ratio = c16 as f64 / c8 as f64;
        assert!(
            (3.0..4.2).contains(&ratio),
            "conv-dominated width scaling should be near-quadratic, got {ratio}"
        );
    }
}

//! Hierarchical window-attention semantic codec: a shared encoder that can
//! condition its features on the intended receiver through learned target
//! embeddings, and two mirrored decoders of unequal capacity that restore
//! full-resolution images.

use crate::autodiff::{Scalar, Tape, Var};
use crate::imaging::ImageTensor;
use crate::nn::{
    patch_group_indices, patch_ungroup_permutation, Init, LayerNorm, Linear, ParamGroup, ParamId,
    ParamStore, ParamTape, SwinBlock,
};
use ndarray::Array3;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("patch size {0} must be a positive perfect square (e.g. 4 for 2x2 patches)")]
    BadPatch(usize),
    #[error("{0} must be non-empty and stage counts must line up")]
    BadStageLayout(&'static str),
    #[error("stage widths must stay equal or double between stages; violated at index {0}")]
    WidthProgression(usize),
    #[error("stage width {width} does not divide into {heads} heads")]
    HeadMismatch { width: usize, heads: usize },
    #[error("decoder upsampling restores a factor of {got}, encoder downsamples by {expected}")]
    UpsampleMismatch { expected: usize, got: usize },
    #[error("image dimension {dim} is not divisible by the downsampling factor {factor}")]
    Indivisible { dim: usize, factor: usize },
    #[error("expected a {expected:?} image, got {got:?}")]
    ImageShape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("expected a {expected:?} feature grid, got {got:?}")]
    FeatureShape {
        expected: (usize, usize, usize),
        got: (usize, usize, usize),
    },
    #[error("target user index {0} is out of range (two receivers supported)")]
    BadUser(u8),
}

/// Intended receiver of an encoded image.
///
/// User `0` is served by the low-capacity decoder, user `1` by the
/// high-capacity decoder. `Broadcast` addresses both at once, in which case
/// no target embedding is injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TargetId {
    User(u8),
    Broadcast,
}

impl TargetId {
    pub fn user_index(self) -> Option<usize> {
        match self {
            TargetId::User(u) => Some(u as usize),
            TargetId::Broadcast => None,
        }
    }

    pub fn validate(self) -> Result<(), CodecError> {
        match self {
            TargetId::User(u) if u > 1 => Err(CodecError::BadUser(u)),
            _ => Ok(()),
        }
    }
}

/// Decoder capacity class. User 0 runs the low-capacity decoder, user 1 the
/// high-capacity one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderCapacity {
    Low,
    High,
}

impl DecoderCapacity {
    pub fn for_user(user: u8) -> Self {
        if user == 0 {
            DecoderCapacity::Low
        } else {
            DecoderCapacity::High
        }
    }
}

/// Spatial token grid produced by the semantic encoder.
#[derive(Debug, Clone)]
pub struct SemanticFeatures<T: Scalar> {
    /// Shape `(h_t, w_t, c_f)`.
    pub tokens: Array3<T>,
}

impl<T: Scalar> SemanticFeatures<T> {
    pub fn from_rows(rows: &ndarray::ArrayD<T>, grid: (usize, usize)) -> Self {
        let c = rows.shape()[1];
        let tokens = rows
            .to_shape((grid.0, grid.1, c))
            .expect("row count must match the token grid")
            .to_owned();
        SemanticFeatures { tokens }
    }

    /// Tokens flattened to `(h_t * w_t, c_f)` rows in raster order.
    pub fn to_rows(&self) -> ndarray::ArrayD<T> {
        let (h, w, c) = self.tokens.dim();
        self.tokens
            .to_shape((h * w, c))
            .expect("contiguous")
            .to_owned()
            .into_dyn()
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        self.tokens.dim()
    }
}

// ---------------------------------------------------------------------------
// Geometry.
// ---------------------------------------------------------------------------

/// Architectural hyperparameters shared by the encoder and both decoders.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelGeometry {
    /// Pixels per square patch (4 means 2x2 pixels become one token).
    pub patch: usize,
    /// Attention window side, in tokens.
    pub window: usize,
    /// Encoder blocks per stage.
    pub enc_depths: Vec<usize>,
    /// High-capacity decoder blocks per stage.
    pub hcd_depths: Vec<usize>,
    /// Low-capacity decoder blocks per stage.
    pub lcd_depths: Vec<usize>,
    /// Encoder channel width per stage, low resolution last.
    pub widths: Vec<usize>,
    /// Channels per attention head (a stage uses `max(1, width/head_dim)` heads).
    pub head_dim: usize,
}

impl Default for ModelGeometry {
    fn default() -> Self {
        ModelGeometry {
            patch: 4,
            window: 4,
            enc_depths: vec![2, 2, 6, 2],
            hcd_depths: vec![2, 6, 1, 1],
            lcd_depths: vec![1, 1],
            widths: vec![48, 96, 192, 192],
            head_dim: 16,
        }
    }
}

impl ModelGeometry {
    /// Side of one pixel patch (`patch` must be a perfect square).
    pub fn patch_side(&self) -> Result<usize, CodecError> {
        let side = (self.patch as f64).sqrt().round() as usize;
        if side == 0 || side * side != self.patch {
            return Err(CodecError::BadPatch(self.patch));
        }
        Ok(side)
    }

    /// Number of token-merging steps implied by the width progression.
    pub fn merge_count(&self) -> usize {
        self.widths
            .windows(2)
            .filter(|pair| pair[1] == 2 * pair[0])
            .count()
    }

    /// Total spatial downsampling from pixels to final tokens.
    pub fn downsample_factor(&self) -> Result<usize, CodecError> {
        Ok(self.patch_side()? << self.merge_count())
    }

    /// Channel width of the final token grid.
    pub fn feature_channels(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn heads_for(&self, width: usize) -> usize {
        (width / self.head_dim).max(1)
    }

    /// Token grid for an image of the given size.
    pub fn token_grid(&self, height: usize, width: usize) -> Result<(usize, usize), CodecError> {
        let factor = self.downsample_factor()?;
        for dim in [height, width] {
            if dim == 0 || dim % factor != 0 {
                return Err(CodecError::Indivisible { dim, factor });
            }
        }
        Ok((height / factor, width / factor))
    }

    pub fn validate(&self) -> Result<(), CodecError> {
        self.patch_side()?;
        if self.window == 0 {
            return Err(CodecError::BadStageLayout("window"));
        }
        let stages = self.widths.len();
        if stages == 0
            || self.enc_depths.len() != stages
            || self.hcd_depths.len() != stages
            || self.lcd_depths.is_empty()
            || self.lcd_depths.len() > stages
            || self.enc_depths.iter().any(|&d| d == 0)
            || self.hcd_depths.iter().any(|&d| d == 0)
            || self.lcd_depths.iter().any(|&d| d == 0)
        {
            return Err(CodecError::BadStageLayout("stage depths/widths"));
        }
        for (i, pair) in self.widths.windows(2).enumerate() {
            if pair[1] != pair[0] && pair[1] != 2 * pair[0] {
                return Err(CodecError::WidthProgression(i));
            }
        }
        for &w in &self.widths {
            let heads = self.heads_for(w);
            if w % heads != 0 {
                return Err(CodecError::HeadMismatch { width: w, heads });
            }
        }
        // Both decoders must undo exactly the encoder's merges.
        let merges = self.merge_count();
        for plan in [self.decoder_plan(DecoderCapacity::High), self.decoder_plan(DecoderCapacity::Low)]
        {
            let splits = plan.split_before.iter().filter(|&&s| s).count();
            if splits != merges {
                return Err(CodecError::UpsampleMismatch {
                    expected: 1 << merges,
                    got: 1 << splits,
                });
            }
            for (i, pair) in plan.stage_widths.windows(2).enumerate() {
                if pair[1] != pair[0] && 2 * pair[1] != pair[0] {
                    return Err(CodecError::WidthProgression(i));
                }
            }
        }
        Ok(())
    }

    /// Stage layout of one decoder: widths from coarse to fine, and whether a
    /// token split precedes each stage. The low-capacity decoder keeps only
    /// the finest stages, entered through an immediate split.
    pub(crate) fn decoder_plan(&self, capacity: DecoderCapacity) -> DecoderPlan {
        let (depths, stage_widths): (Vec<usize>, Vec<usize>) = match capacity {
            DecoderCapacity::High => (
                self.hcd_depths.clone(),
                self.widths.iter().rev().copied().collect(),
            ),
            DecoderCapacity::Low => {
                let l = self.lcd_depths.len();
                (
                    self.lcd_depths.clone(),
                    self.widths[..l].iter().rev().copied().collect(),
                )
            }
        };
        let mut split_before = Vec::with_capacity(stage_widths.len());
        let mut current = self.feature_channels();
        for &w in &stage_widths {
            split_before.push(w != current);
            current = w;
        }
        DecoderPlan {
            depths,
            stage_widths,
            split_before,
        }
    }
}

pub(crate) struct DecoderPlan {
    pub depths: Vec<usize>,
    pub stage_widths: Vec<usize>,
    pub split_before: Vec<bool>,
}

// ---------------------------------------------------------------------------
// Patch-level layers.
// ---------------------------------------------------------------------------

/// Groups `side x side` pixel patches into tokens and projects them to the
/// first stage width.
struct PatchEmbed {
    groups: Vec<Arc<Vec<usize>>>,
    proj: Linear,
    norm: LayerNorm,
}

impl PatchEmbed {
    fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        group: ParamGroup,
        h: usize,
        w: usize,
        side: usize,
        out_dim: usize,
    ) -> Self {
        let groups = patch_group_indices(h, w, side)
            .into_iter()
            .map(Arc::new)
            .collect();
        PatchEmbed {
            groups,
            proj: Linear::new(init, &format!("{name}.proj"), group, 3 * side * side, out_dim, true),
            norm: LayerNorm::new(init, &format!("{name}.norm"), group, out_dim),
        }
    }

    fn forward<T: Scalar>(&self, pt: &ParamTape<'_, T>, pixel_rows: Var) -> Var {
        let tape = pt.tape;
        let parts: Vec<Var> = self
            .groups
            .iter()
            .map(|g| tape.gather_rows(pixel_rows, Arc::clone(g)))
            .collect();
        let packed = tape.concat_cols(&parts);
        let projected = self.proj.forward(pt, packed);
        self.norm.forward(pt, projected)
    }
}

/// Halves the token grid in each direction, doubling the channel width.
struct PatchMerge {
    groups: Vec<Arc<Vec<usize>>>,
    norm: LayerNorm,
    reduce: Linear,
}

impl PatchMerge {
    fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        group: ParamGroup,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
    ) -> Self {
        let groups = patch_group_indices(grid_h, grid_w, 2)
            .into_iter()
            .map(Arc::new)
            .collect();
        PatchMerge {
            groups,
            norm: LayerNorm::new(init, &format!("{name}.norm"), group, 4 * channels),
            reduce: Linear::new(init, &format!("{name}.reduce"), group, 4 * channels, 2 * channels, false),
        }
    }

    fn forward<T: Scalar>(&self, pt: &ParamTape<'_, T>, x: Var) -> Var {
        let tape = pt.tape;
        let parts: Vec<Var> = self
            .groups
            .iter()
            .map(|g| tape.gather_rows(x, Arc::clone(g)))
            .collect();
        let packed = tape.concat_cols(&parts);
        let normed = self.norm.forward(pt, packed);
        self.reduce.forward(pt, normed)
    }
}

/// Doubles the token grid in each direction, halving the channel width
/// (inverse of [`PatchMerge`]).
struct PatchSplit {
    norm: LayerNorm,
    expand: Linear,
    perm: Arc<Vec<usize>>,
    half: usize,
}

impl PatchSplit {
    fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        group: ParamGroup,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
    ) -> Self {
        PatchSplit {
            norm: LayerNorm::new(init, &format!("{name}.norm"), group, channels),
            expand: Linear::new(init, &format!("{name}.expand"), group, channels, 2 * channels, false),
            perm: Arc::new(patch_ungroup_permutation(grid_h, grid_w, 2)),
            half: channels / 2,
        }
    }

    fn forward<T: Scalar>(&self, pt: &ParamTape<'_, T>, x: Var) -> Var {
        let tape = pt.tape;
        let normed = self.norm.forward(pt, x);
        let expanded = self.expand.forward(pt, normed);
        let parts: Vec<Var> = (0..4)
            .map(|k| tape.slice_cols(expanded, k * self.half, (k + 1) * self.half))
            .collect();
        let stacked = tape.concat_rows(&parts);
        tape.gather_rows(stacked, Arc::clone(&self.perm))
    }
}

/// Projects final-stage tokens back to pixel patches and squashes to [0,1].
struct Unpatch {
    norm: LayerNorm,
    proj: Linear,
    perm: Arc<Vec<usize>>,
    side: usize,
    out_h: usize,
    out_w: usize,
}

impl Unpatch {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        init: &mut Init<'_, T>,
        name: &str,
        group: ParamGroup,
        grid_h: usize,
        grid_w: usize,
        channels: usize,
        side: usize,
    ) -> Self {
        Unpatch {
            norm: LayerNorm::new(init, &format!("{name}.norm"), group, channels),
            proj: Linear::new(init, &format!("{name}.proj"), group, channels, 3 * side * side, true),
            perm: Arc::new(patch_ungroup_permutation(grid_h, grid_w, side)),
            side,
            out_h: grid_h * side,
            out_w: grid_w * side,
        }
    }

    fn forward<T: Scalar>(&self, pt: &ParamTape<'_, T>, x: Var) -> Var {
        let tape = pt.tape;
        let normed = self.norm.forward(pt, x);
        let projected = self.proj.forward(pt, normed);
        let parts: Vec<Var> = (0..self.side * self.side)
            .map(|k| tape.slice_cols(projected, 3 * k, 3 * (k + 1)))
            .collect();
        let stacked = tape.concat_rows(&parts);
        let raster = tape.gather_rows(stacked, Arc::clone(&self.perm));
        let image = tape.reshape(raster, &[self.out_h, self.out_w, 3]);
        tape.sigmoid(image)
    }
}

// ---------------------------------------------------------------------------
// Encoder.
// ---------------------------------------------------------------------------

struct EncoderStage<T: Scalar> {
    blocks: Vec<SwinBlock<T>>,
    /// One learned conditioning vector per target user, of the stage width.
    target_embeddings: [ParamId; 2],
    merge: Option<PatchMerge>,
}

/// Shared semantic encoder built for one image size.
pub struct SemanticEncoder<T: Scalar> {
    patch_embed: PatchEmbed,
    stages: Vec<EncoderStage<T>>,
    final_norm: LayerNorm,
    in_h: usize,
    in_w: usize,
    token_grid: (usize, usize),
    feature_channels: usize,
}

impl<T: Scalar> SemanticEncoder<T> {
    /// Builds encoder parameters (group `Alpha`) for images of `h x w`.
    pub fn build(
        init: &mut Init<'_, T>,
        geometry: &ModelGeometry,
        h: usize,
        w: usize,
    ) -> Result<Self, CodecError> {
        geometry.validate()?;
        let side = geometry.patch_side()?;
        let token_grid = geometry.token_grid(h, w)?;
        let group = ParamGroup::Alpha;
        let patch_embed = PatchEmbed::new(init, "enc.embed", group, h, w, side, geometry.widths[0]);
        let (mut gh, mut gw) = (h / side, w / side);
        let mut stages = Vec::new();
        for (s, (&depth, &width)) in geometry.enc_depths.iter().zip(&geometry.widths).enumerate() {
            let window = geometry.window.min(gh).min(gw);
            let heads = geometry.heads_for(width);
            let blocks = (0..depth)
                .map(|b| {
                    SwinBlock::new(
                        init,
                        &format!("enc.s{s}.b{b}"),
                        group,
                        width,
                        heads,
                        gh,
                        gw,
                        window,
                        b % 2 == 1,
                    )
                })
                .collect();
            let target_embeddings = [
                init.weight(format!("enc.s{s}.target0"), group, &[width]),
                init.weight(format!("enc.s{s}.target1"), group, &[width]),
            ];
            let merge = match geometry.widths.get(s + 1) {
                Some(&next) if next == 2 * width => {
                    let m = PatchMerge::new(init, &format!("enc.s{s}.merge"), group, gh, gw, width);
                    gh /= 2;
                    gw /= 2;
                    Some(m)
                }
                _ => None,
            };
            stages.push(EncoderStage {
                blocks,
                target_embeddings,
                merge,
            });
        }
        debug_assert_eq!((gh, gw), token_grid);
        let feature_channels = geometry.feature_channels();
        let final_norm = LayerNorm::new(init, "enc.norm", group, feature_channels);
        Ok(SemanticEncoder {
            patch_embed,
            stages,
            final_norm,
            in_h: h,
            in_w: w,
            token_grid,
            feature_channels,
        })
    }

    pub fn token_grid(&self) -> (usize, usize) {
        self.token_grid
    }

    pub fn token_count(&self) -> usize {
        self.token_grid.0 * self.token_grid.1
    }

    pub fn feature_channels(&self) -> usize {
        self.feature_channels
    }

    pub fn input_size(&self) -> (usize, usize) {
        (self.in_h, self.in_w)
    }

    /// Tape forward: `image` is an `(h, w, 3)` node; returns `(tokens, c_f)`.
    pub fn forward(&self, pt: &ParamTape<'_, T>, image: Var, target: TargetId) -> Var {
        let tape = pt.tape;
        let rows = tape.reshape(image, &[self.in_h * self.in_w, 3]);
        let mut x = self.patch_embed.forward(pt, rows);
        for stage in &self.stages {
            let inject = target
                .user_index()
                .map(|u| pt.var(stage.target_embeddings[u]));
            for block in &stage.blocks {
                x = block.forward(pt, x, inject);
            }
            if let Some(merge) = &stage.merge {
                x = merge.forward(pt, x);
            }
        }
        self.final_norm.forward(pt, x)
    }

    /// Convenience non-training forward from an image in unit range.
    pub fn encode(
        &self,
        store: &ParamStore<T>,
        image: &ImageTensor,
        target: TargetId,
    ) -> Result<SemanticFeatures<T>, CodecError> {
        target.validate()?;
        let (h, w) = (image.height(), image.width());
        if (h, w) != (self.in_h, self.in_w) {
            return Err(CodecError::ImageShape {
                expected: (self.in_h, self.in_w),
                got: (h, w),
            });
        }
        let tape = Tape::new();
        let pt = ParamTape::new(store, &tape);
        let leaf = tape.leaf(image.to_scalar_array());
        let out = self.forward(&pt, leaf, target);
        Ok(SemanticFeatures::from_rows(&tape.value_owned(out), self.token_grid))
    }

    /// Sets every target embedding of one user to zero (useful to verify the
    /// broadcast path is exactly the no-injection path).
    pub fn zero_target_embeddings(&self, store: &mut ParamStore<T>, user: u8) {
        for stage in &self.stages {
            store.value_mut(stage.target_embeddings[user as usize]).fill(T::zero());
        }
    }
}

// ---------------------------------------------------------------------------
// Decoders.
// ---------------------------------------------------------------------------

struct DecoderStage<T: Scalar> {
    split: Option<PatchSplit>,
    blocks: Vec<SwinBlock<T>>,
}

/// Semantic decoder mirroring the encoder; capacity decides the stage layout.
pub struct SemanticDecoder<T: Scalar> {
    stages: Vec<DecoderStage<T>>,
    unpatch: Unpatch,
    capacity: DecoderCapacity,
    in_tokens: usize,
    feature_channels: usize,
    token_grid: (usize, usize),
    out_h: usize,
    out_w: usize,
}

impl<T: Scalar> SemanticDecoder<T> {
    /// Builds decoder parameters in `group` for images of `h x w`.
    pub fn build(
        init: &mut Init<'_, T>,
        geometry: &ModelGeometry,
        h: usize,
        w: usize,
        capacity: DecoderCapacity,
        group: ParamGroup,
    ) -> Result<Self, CodecError> {
        geometry.validate()?;
        let side = geometry.patch_side()?;
        let token_grid = geometry.token_grid(h, w)?;
        let plan = geometry.decoder_plan(capacity);
        let prefix = match capacity {
            DecoderCapacity::Low => "lcd",
            DecoderCapacity::High => "hcd",
        };
        let prefix = format!("{}.{prefix}", group.label());
        let (mut gh, mut gw) = token_grid;
        let mut stages = Vec::new();
        let mut channels = geometry.feature_channels();
        for (s, (&depth, &width)) in plan.depths.iter().zip(&plan.stage_widths).enumerate() {
            let split = if plan.split_before[s] {
                let sp = PatchSplit::new(init, &format!("{prefix}.s{s}.split"), group, gh, gw, channels);
                gh *= 2;
                gw *= 2;
                channels /= 2;
                Some(sp)
            } else {
                None
            };
            debug_assert_eq!(channels, width);
            let window = geometry.window.min(gh).min(gw);
            let heads = geometry.heads_for(width);
            let blocks = (0..depth)
                .map(|b| {
                    SwinBlock::new(
                        init,
                        &format!("{prefix}.s{s}.b{b}"),
                        group,
                        width,
                        heads,
                        gh,
                        gw,
                        window,
                        b % 2 == 1,
                    )
                })
                .collect();
            stages.push(DecoderStage { split, blocks });
        }
        let unpatch = Unpatch::new(init, &format!("{prefix}.unpatch"), group, gh, gw, channels, side);
        Ok(SemanticDecoder {
            stages,
            unpatch,
            capacity,
            in_tokens: token_grid.0 * token_grid.1,
            feature_channels: geometry.feature_channels(),
            token_grid,
            out_h: h,
            out_w: w,
        })
    }

    pub fn capacity(&self) -> DecoderCapacity {
        self.capacity
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.out_h, self.out_w)
    }

    /// Tape forward: `(tokens, c_f)` features to an `(h, w, 3)` image node in
    /// unit range.
    pub fn forward(&self, pt: &ParamTape<'_, T>, features: Var) -> Var {
        let mut x = features;
        for stage in &self.stages {
            if let Some(split) = &stage.split {
                x = split.forward(pt, x);
            }
            for block in &stage.blocks {
                x = block.forward(pt, x, None);
            }
        }
        self.unpatch.forward(pt, x)
    }

    /// Convenience non-training decode to an image.
    pub fn decode(
        &self,
        store: &ParamStore<T>,
        features: &SemanticFeatures<T>,
    ) -> Result<ImageTensor, CodecError> {
        let got = features.grid();
        let expected = (self.token_grid.0, self.token_grid.1, self.feature_channels);
        if got != expected {
            return Err(CodecError::FeatureShape { expected, got });
        }
        let tape = Tape::new();
        let pt = ParamTape::new(store, &tape);
        let leaf = tape.leaf(features.to_rows());
        let out = self.forward(&pt, leaf);
        let value = tape.value_owned(out);
        let pixels = Array3::from_shape_fn((self.out_h, self.out_w, 3), |(y, x, c)| {
            value[[y, x, c]].to_f64() as f32
        });
        Ok(ImageTensor::from_clamped(pixels))
    }

    pub fn expected_tokens(&self) -> usize {
        self.in_tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::ArrayD;

    fn tiny_geometry() -> ModelGeometry {
        ModelGeometry {
            patch: 4,
            window: 2,
            enc_depths: vec![1, 1, 1, 1],
            hcd_depths: vec![1, 1, 1, 1],
            lcd_depths: vec![1, 1],
            widths: vec![8, 16, 32, 32],
            head_dim: 16,
        }
    }

    fn build_encoder(
        geometry: &ModelGeometry,
        h: usize,
        w: usize,
        seed: u64,
    ) -> (ParamStore<f64>, SemanticEncoder<f64>) {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, seed);
        let enc = SemanticEncoder::build(&mut init, geometry, h, w).unwrap();
        (store, enc)
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let arr = crate::autodiff::testutil::rand_array(&[h, w, 3], seed, 0.05, 0.95);
        let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| arr[[y, x, c]] as f32);
        ImageTensor::new(pixels).unwrap()
    }

    #[test]
    fn default_geometry_maps_64x64_to_8x8_tokens() {
        let g = ModelGeometry::default();
        g.validate().unwrap();
        assert_eq!(g.patch_side().unwrap(), 2);
        assert_eq!(g.merge_count(), 2);
        assert_eq!(g.downsample_factor().unwrap(), 8);
        assert_eq!(g.token_grid(64, 64).unwrap(), (8, 8));
        assert_eq!(g.feature_channels(), 192);
    }

    #[test]
    fn indivisible_dimensions_are_rejected() {
        let g = ModelGeometry::default();
        assert!(matches!(
            g.token_grid(60, 64),
            Err(CodecError::Indivisible { dim: 60, factor: 8 })
        ));
    }

    #[test]
    fn geometry_validation_catches_bad_layouts() {
        let mut g = ModelGeometry::default();
        g.patch = 3;
        assert!(matches!(g.validate(), Err(CodecError::BadPatch(3))));

        let mut g = ModelGeometry::default();
        g.widths = vec![48, 144, 192, 192];
        assert!(matches!(g.validate(), Err(CodecError::WidthProgression(0))));

        let mut g = ModelGeometry::default();
        g.enc_depths = vec![2, 2];
        assert!(matches!(g.validate(), Err(CodecError::BadStageLayout(_))));

        let mut g = ModelGeometry::default();
        g.widths = vec![100, 200, 400, 400];
        assert!(matches!(g.validate(), Err(CodecError::HeadMismatch { .. })));
    }

    #[test]
    fn encoder_produces_expected_token_grid() {
        // Real stage depths, reduced widths to keep the test quick.
        let geometry = ModelGeometry {
            widths: vec![8, 16, 32, 32],
            window: 4,
            head_dim: 16,
            ..ModelGeometry::default()
        };
        let (store, enc) = build_encoder(&geometry, 64, 64, 11);
        let features = enc
            .encode(&store, &random_image(64, 64, 1), TargetId::Broadcast)
            .unwrap();
        assert_eq!(features.grid(), (8, 8, 32));
    }

    #[test]
    fn encoder_is_deterministic() {
        let (store, enc) = build_encoder(&tiny_geometry(), 16, 16, 5);
        let img = random_image(16, 16, 2);
        let a = enc.encode(&store, &img, TargetId::User(1)).unwrap();
        let b = enc.encode(&store, &img, TargetId::User(1)).unwrap();
        assert_eq!(a.tokens, b.tokens);
    }

    #[test]
    fn target_zero_and_one_produce_different_features() {
        let (store, enc) = build_encoder(&tiny_geometry(), 16, 16, 5);
        let img = random_image(16, 16, 3);
        let f0 = enc.encode(&store, &img, TargetId::User(0)).unwrap();
        let f1 = enc.encode(&store, &img, TargetId::User(1)).unwrap();
        let max_diff = f0
            .tokens
            .iter()
            .zip(f1.tokens.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff > 0.0, "distinct embeddings must separate outputs");
    }

    #[test]
    fn broadcast_equals_target_with_zeroed_embeddings() {
        let (mut store, enc) = build_encoder(&tiny_geometry(), 16, 16, 5);
        enc.zero_target_embeddings(&mut store, 0);
        let img = random_image(16, 16, 4);
        let f0 = enc.encode(&store, &img, TargetId::User(0)).unwrap();
        let fb = enc.encode(&store, &img, TargetId::Broadcast).unwrap();
        assert_eq!(f0.tokens, fb.tokens, "zero injection must be a no-op");
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let (store, enc) = build_encoder(&tiny_geometry(), 16, 16, 5);
        let err = enc
            .encode(&store, &random_image(32, 32, 1), TargetId::Broadcast)
            .unwrap_err();
        assert!(matches!(err, CodecError::ImageShape { .. }));
    }

    #[test]
    fn decoders_restore_image_shape_in_unit_range() {
        let geometry = tiny_geometry();
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 9);
        let enc = SemanticEncoder::build(&mut init, &geometry, 16, 16).unwrap();
        let lcd = SemanticDecoder::build(
            &mut init,
            &geometry,
            16,
            16,
            DecoderCapacity::Low,
            ParamGroup::Theta(0),
        )
        .unwrap();
        let hcd = SemanticDecoder::build(
            &mut init,
            &geometry,
            16,
            16,
            DecoderCapacity::High,
            ParamGroup::Theta(1),
        )
        .unwrap();
        let img = random_image(16, 16, 6);
        let features = enc.encode(&store, &img, TargetId::User(0)).unwrap();
        for dec in [&lcd, &hcd] {
            let out = dec.decode(&store, &features).unwrap();
            assert_eq!(out.pixels().dim(), (16, 16, 3));
            assert!(out
                .pixels()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Determinism of the high-capacity path.
        let a = hcd.decode(&store, &features).unwrap();
        let b = hcd.decode(&store, &features).unwrap();
        assert_eq!(a.pixels(), b.pixels());
    }

    #[test]
    fn feature_shape_mismatch_is_rejected() {
        let geometry = tiny_geometry();
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 9);
        let lcd = SemanticDecoder::build(
            &mut init,
            &geometry,
            16,
            16,
            DecoderCapacity::Low,
            ParamGroup::Theta(0),
        )
        .unwrap();
        let bad = SemanticFeatures {
            tokens: Array3::<f64>::zeros((4, 4, 8)),
        };
        assert!(matches!(
            lcd.decode(&store, &bad),
            Err(CodecError::FeatureShape { .. })
        ));
    }

    #[test]
    fn high_capacity_decoder_has_more_parameters() {
        let geometry = ModelGeometry {
            widths: vec![8, 16, 32, 32],
            window: 4,
            ..ModelGeometry::default()
        };
        let mut store = ParamStore::<f32>::new();
        let mut init = Init::new(&mut store, 1);
        SemanticDecoder::build(&mut init, &geometry, 64, 64, DecoderCapacity::Low, ParamGroup::Theta(0))
            .unwrap();
        SemanticDecoder::build(&mut init, &geometry, 64, 64, DecoderCapacity::High, ParamGroup::Theta(1))
            .unwrap();
        let lcd = store.group_element_count(ParamGroup::Theta(0));
        let hcd = store.group_element_count(ParamGroup::Theta(1));
        assert!(hcd > lcd, "high-capacity {hcd} must exceed low-capacity {lcd}");
    }

    #[test]
    fn roundtrip_gradients_reach_every_engaged_parameter() {
        let geometry = tiny_geometry();
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(&mut store, 21);
        let enc = SemanticEncoder::build(&mut init, &geometry, 16, 16).unwrap();
        let lcd = SemanticDecoder::build(
            &mut init,
            &geometry,
            16,
            16,
            DecoderCapacity::Low,
            ParamGroup::Theta(0),
        )
        .unwrap();
        let hcd = SemanticDecoder::build(
            &mut init,
            &geometry,
            16,
            16,
            DecoderCapacity::High,
            ParamGroup::Theta(1),
        )
        .unwrap();
        let img = random_image(16, 16, 8);

        let mut seen_nonzero = vec![false; store.len()];
        for (target, dec) in [(TargetId::User(0), &lcd), (TargetId::User(1), &hcd)] {
            let tape = Tape::new();
            let pt = ParamTape::new(&store, &tape);
            let leaf = tape.leaf(img.to_scalar_array::<f64>());
            let features = enc.forward(&pt, leaf, target);
            let recon = dec.forward(&pt, features);
            let diff = tape.sub(recon, leaf);
            let sq = tape.square(diff);
            let loss = tape.mean(sq);
            assert!(tape.scalar_value(loss).is_finite());
            let mut grads = tape.backward(loss);
            for (id, g) in pt.collect_gradients(&mut grads) {
                let norm: f64 = g.iter().map(|&v| v * v).sum::<f64>();
                if norm > 0.0 {
                    seen_nonzero[id.index()] = true;
                }
            }
        }
        for id in store.ids() {
            assert!(
                seen_nonzero[id.index()],
                "no gradient reached {}",
                store.name(id)
            );
        }
    }

    #[test]
    fn feature_rows_roundtrip_through_grid() {
        let rows = ArrayD::from_shape_fn(ndarray::IxDyn(&[6, 4]), |ix| (ix[0] * 10 + ix[1]) as f64);
        let feats = SemanticFeatures::from_rows(&rows, (2, 3));
        assert_eq!(feats.grid(), (2, 3, 4));
        assert_eq!(feats.to_rows(), rows);
        assert_eq!(feats.tokens[(1, 2, 3)], 53.0);
    }
}

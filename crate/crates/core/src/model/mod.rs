//! Dual-pathway backbone, detection head, loss, and training.
//!
//! For blocks `l = 0..N`:
//!
//! ```text
//! F_d^{l+1} = CNN_l(F_d^l)
//! F_s^{l+1} = B_l(A_l(F_d^l, F_s^l))
//! ```
//!
//! `CNN_l` is a downsampling conv followed by `block_depth` stride-1 convs;
//! `A_l` is an NCA block (or a concat-conv for `cnn_only`) that already
//! matches `CNN_l` in output size; `B_l` repeats the stride-1 tail of
//! `CNN_l`, with its own weights (`dual`) or the dynamic ones
//! (`single_shared`). After the last block the two branches are combined by
//! DSI (`nca_dsi`) or a concat-conv, and the result feeds the head.
//!
//! Parameter names:
//! `vfe.dyn`, `vfe.sta`, `match` (static channel matcher, only when the VFE
//! widths differ), `dyn.block{l}.down`, `dyn.block{l}.tail{j}`,
//! `sta.nca{l}` or `sta.fuse{l}`, `sta.block{l}.tail{j}` (dual only),
//! `dsi` or `combine`, `head.conv`, `head.out`.

mod checkpoint;
mod head;
mod loss;
mod train;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointManifest, PARAMS_FILE, MANIFEST_FILE};
pub use head::{
    assign_targets, decode_box, decode_detections, detection_head, dir_target, encode_box,
    head_on, init_head, FOREGROUND_PRIOR, DenseHead, DetectionBox, HeadGrid, Targets, REG_DIMS,
};
pub use loss::{
    compute_loss, focal_term, loss_on, LossBreakdown, FOCAL_ALPHA, FOCAL_GAMMA, LOSS_WEIGHTS,
};
pub use train::{
    augment, bev_inputs_on, predict, sample_loss_on, train, train_step, Sample, SgdMomentum, TrainLog,
    TrainOptions,
};

use crate::dsi::{dsi_on, init_dsi};
use crate::error::{Error, Result};
use crate::nca::{init_nca, nca_on, AttentionConfig, NcaConfig};
use crate::pillars::{init_vfe, BevFeatureMap, GridConfig};
use crate::tensor::{conv_layout, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionVariant {
    /// Multi-sweep branch alone; no static path.
    DynamicOnly,
    /// Concat-conv fusion units and concat-conv combine.
    CnnOnly,
    /// NCA fusion units and concat-conv combine.
    NcaOnly,
    /// NCA fusion units and DSI combine.
    NcaDsi,
}

impl FusionVariant {
    pub const ALL: [FusionVariant; 4] = [
        FusionVariant::DynamicOnly,
        FusionVariant::CnnOnly,
        FusionVariant::NcaOnly,
        FusionVariant::NcaDsi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionVariant::DynamicOnly => "dynamic_only",
            FusionVariant::CnnOnly => "cnn_only",
            FusionVariant::NcaOnly => "nca_only",
            FusionVariant::NcaDsi => "nca_dsi",
        }
    }

    pub fn has_static_path(self) -> bool {
        self != FusionVariant::DynamicOnly
    }

    pub fn uses_nca(self) -> bool {
        matches!(self, FusionVariant::NcaOnly | FusionVariant::NcaDsi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathway {
    /// Static `B_l` reuses the dynamic block weights.
    SingleShared,
    /// Static `B_l` has its own weights.
    Dual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_blocks: usize,
    /// Output channels of each block.
    pub block_channels: Vec<usize>,
    /// Downsampling factor of each block.
    pub block_strides: Vec<usize>,
    /// Stride-1 3×3 convs after each block's downsampling conv.
    pub block_depth: usize,
    /// Dynamic VFE width; the backbone input channels.
    pub vfe_channels: usize,
    /// Static VFE width; a matcher conv is added when it differs.
    pub static_vfe_channels: usize,
    pub fusion_variant: FusionVariant,
    pub pathway: Pathway,
    /// Window and heads; token dims follow each block's channels.
    pub attention: AttentionConfig,
    pub grid: GridConfig,
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Three blocks on the 128×128 desk grid, k = 7, 8 heads.
    pub fn desk() -> Self {
        Self {
            n_blocks: 3,
            block_channels: vec![32, 64, 64],
            block_strides: vec![2, 2, 1],
            block_depth: 1,
            vfe_channels: 32,
            static_vfe_channels: 16,
            fusion_variant: FusionVariant::NcaDsi,
            pathway: Pathway::Dual,
            attention: AttentionConfig::default(),
            grid: GridConfig::desk(),
            classes: crate::synthlidar::NUM_CLASSES,
        }
    }

    /// Small enough to train in seconds: 32×32 grid at 0.4 m, 16 channels.
    pub fn smoke() -> Self {
        Self {
            n_blocks: 3,
            block_channels: vec![16, 16, 16],
            block_strides: vec![2, 1, 1],
            block_depth: 1,
            vfe_channels: 16,
            static_vfe_channels: 8,
            fusion_variant: FusionVariant::NcaDsi,
            pathway: Pathway::Dual,
            attention: AttentionConfig::new(3, 2, 8),
            grid: GridConfig::square(6.4, 0.4),
            classes: crate::synthlidar::NUM_CLASSES,
        }
    }

    pub fn with_variant(mut self, variant: FusionVariant) -> Self {
        self.fusion_variant = variant;
        self
    }

    pub fn with_pathway(mut self, pathway: Pathway) -> Self {
        self.pathway = pathway;
        self
    }

    /// Input channels of block `l`.
    pub fn block_in_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.vfe_channels
        } else {
            self.block_channels[l - 1]
        }
    }

    pub fn out_channels(&self) -> usize {
        self.block_channels.last().copied().unwrap_or(self.vfe_channels)
    }

    pub fn total_stride(&self) -> usize {
        self.block_strides.iter().product()
    }

    pub fn nca_config(&self, l: usize) -> NcaConfig {
        NcaConfig {
            in_channels: self.block_in_channels(l),
            out_channels: self.block_channels[l],
            stride: self.block_strides[l],
            attention: self.attention.clone(),
        }
    }

    /// Head output channels: class logits (background first), box
    /// regression, direction logits.
    pub fn head_channels(&self) -> usize {
        self.classes + 1 + REG_DIMS + 2
    }

    pub fn head_grid(&self) -> HeadGrid {
        let s = self.total_stride();
        HeadGrid {
            x0: self.grid.x_range[0],
            y0: self.grid.y_range[0],
            cell: self.grid.pillar_size * s as f32,
            width: self.grid.width() / s,
            height: self.grid.height() / s,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.n_blocks == 0 {
            return Err(Error::Config("n_blocks must be >= 1".into()));
        }
        if self.block_channels.len() != self.n_blocks || self.block_strides.len() != self.n_blocks {
            return Err(Error::Config(format!(
                "n_blocks = {} but block_channels has {} and block_strides has {} entries",
                self.n_blocks,
                self.block_channels.len(),
                self.block_strides.len()
            )));
        }
        if self.block_channels.contains(&0) || self.vfe_channels == 0 || self.static_vfe_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        if self.block_strides.contains(&0) {
            return Err(Error::Config("block strides must be >= 1".into()));
        }
        if self.classes == 0 {
            return Err(Error::Config("classes must be >= 1".into()));
        }
        let (mut h, mut w) = (self.grid.height(), self.grid.width());
        for (l, &s) in self.block_strides.iter().enumerate() {
            if h % s != 0 || w % s != 0 {
                return Err(Error::Config(format!(
                    "block {l} stride {s} does not divide its {h}x{w} input"
                )));
            }
            if self.fusion_variant.uses_nca() {
                self.nca_config(l).validate()?;
                let k = self.attention.neighborhood;
                if h < k || w < k {
                    return Err(Error::Config(format!(
                        "block {l} input {h}x{w} is smaller than the {k}x{k} attention window"
                    )));
                }
            }
            h /= s;
            w /= s;
        }
        Ok(())
    }

    /// Name of the `j`-th tail conv of static block `l`, after aliasing.
    pub fn static_tail_name(&self, l: usize, j: usize) -> String {
        match self.pathway {
            Pathway::SingleShared => format!("dyn.block{l}.tail{j}"),
            Pathway::Dual => format!("sta.block{l}.tail{j}"),
        }
    }
}

/// Allocates every parameter of the configured model.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut p = ParamStore::new(seed);
    init_vfe(&mut p, "vfe.dyn", cfg.vfe_channels)?;
    let variant = cfg.fusion_variant;
    if variant.has_static_path() {
        init_vfe(&mut p, "vfe.sta", cfg.static_vfe_channels)?;
        if cfg.static_vfe_channels != cfg.vfe_channels {
            p.init_conv("match", cfg.static_vfe_channels, cfg.vfe_channels, 3)?;
        }
    }
    for l in 0..cfg.n_blocks {
        let (ci, co, s) = (cfg.block_in_channels(l), cfg.block_channels[l], cfg.block_strides[l]);
        let (k, _) = conv_layout(s);
        p.init_conv(&format!("dyn.block{l}.down"), ci, co, k)?;
        for j in 0..cfg.block_depth {
            p.init_conv(&format!("dyn.block{l}.tail{j}"), co, co, 3)?;
        }
        if !variant.has_static_path() {
            continue;
        }
        if variant.uses_nca() {
            init_nca(&mut p, &format!("sta.nca{l}"), &cfg.nca_config(l))?;
        } else {
            p.init_conv(&format!("sta.fuse{l}"), 2 * ci, co, k)?;
        }
        if cfg.pathway == Pathway::Dual {
            for j in 0..cfg.block_depth {
                p.init_conv(&format!("sta.block{l}.tail{j}"), co, co, 3)?;
            }
        }
    }
    let c = cfg.out_channels();
    match variant {
        FusionVariant::NcaDsi => init_dsi(&mut p, "dsi", c)?,
        FusionVariant::NcaOnly | FusionVariant::CnnOnly => p.init_conv("combine", 2 * c, c, 3)?,
        FusionVariant::DynamicOnly => {}
    }
    init_head(&mut p, c, cfg.classes)?;
    Ok(p)
}

/// Scalar count of [`build_model`] from the layer shapes alone.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    let vfe = |c: usize| crate::pillars::POINT_FEATURES * c + c;
    let linear = |m: usize, q: usize| m * q + q;
    let variant = cfg.fusion_variant;
    let mut n = vfe(cfg.vfe_channels);
    if variant.has_static_path() {
        n += vfe(cfg.static_vfe_channels);
        if cfg.static_vfe_channels != cfg.vfe_channels {
            n += conv(cfg.static_vfe_channels, cfg.vfe_channels, 3);
        }
    }
    for l in 0..cfg.n_blocks {
        let (ci, co, s) = (cfg.block_in_channels(l), cfg.block_channels[l], cfg.block_strides[l]);
        let k = conv_layout(s).0;
        let tails = cfg.block_depth * conv(co, co, 3);
        n += conv(ci, co, k) + tails;
        if !variant.has_static_path() {
            continue;
        }
        if variant.uses_nca() {
            let m = co / 2;
            let kk = cfg.attention.neighborhood;
            // the key projection has no bias
            let attention = 4 * linear(m, m) - m + cfg.attention.heads * (2 * kk - 1).pow(2) + 2 * linear(m, m);
            n += 2 * (conv(ci, m, 3) + conv(m, m, 3)) + 2 * attention + conv(2 * m, co, k);
        } else {
            n += conv(2 * ci, co, k);
        }
        if cfg.pathway == Pathway::Dual {
            n += tails;
        }
    }
    let c = cfg.out_channels();
    n += match variant {
        FusionVariant::NcaDsi => {
            conv(2 * c, c, 3)
                + 2 * conv(c, c, 3)
                + 2 * (conv(2 * c, c, 3) + conv(c, c, 3))
                + conv(3 * c, c, 3)
                + conv(c, c, 3)
        }
        FusionVariant::NcaOnly | FusionVariant::CnnOnly => conv(2 * c, c, 3),
        FusionVariant::DynamicOnly => 0,
    };
    n + conv(c, c, 3) + conv(c, cfg.head_channels(), 1)
}

fn conv_relu(tape: &mut Tape, params: &ParamStore, name: &str, x: Var, stride: usize) -> Result<Var> {
    let (_, pad) = conv_layout(stride);
    let y = tape.conv_named(params, name, x, stride, pad)?;
    Ok(tape.relu(y))
}

/// `CNN_l` of the dynamic branch.
pub fn dynamic_block_on(tape: &mut Tape, x: Var, l: usize, params: &ParamStore, cfg: &ModelConfig) -> Result<Var> {
    let mut y = conv_relu(tape, params, &format!("dyn.block{l}.down"), x, cfg.block_strides[l])?;
    for j in 0..cfg.block_depth {
        y = conv_relu(tape, params, &format!("dyn.block{l}.tail{j}"), y, 1)?;
    }
    Ok(y)
}

/// `B_l(A_l(F_d^l, F_s^l))`.
pub fn static_block_on(
    tape: &mut Tape,
    f_d: Var,
    f_s: Var,
    l: usize,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<Var> {
    let mut y = if cfg.fusion_variant.uses_nca() {
        nca_on(tape, f_s, f_d, &cfg.nca_config(l), params, &format!("sta.nca{l}"))?
    } else {
        let both = tape.concat(&[f_s, f_d], 0)?;
        conv_relu(tape, params, &format!("sta.fuse{l}"), both, cfg.block_strides[l])?
    };
    for j in 0..cfg.block_depth {
        y = conv_relu(tape, params, &cfg.static_tail_name(l, j), y, 1)?;
    }
    Ok(y)
}

/// Per-block maps of one backbone evaluation. `dynamic[l]` and
/// `static_maps[l]` are the inputs of block `l`; the last entries are the
/// branch outputs. `static_maps` is empty for `dynamic_only`.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub dynamic: Vec<Var>,
    pub static_maps: Vec<Var>,
    pub head_in: Var,
}

/// Backbone on BEV maps `f_d` `[C_d, H, W]` and `f_s` `[C_s, H, W]`.
pub fn backbone_on(
    tape: &mut Tape,
    f_d: Var,
    f_s: Option<Var>,
    params: &ParamStore,
    cfg: &ModelConfig,
) -> Result<BackboneVars> {
    let variant = cfg.fusion_variant;
    let mut dynamic = vec![f_d];
    let mut static_maps = Vec::new();
    if variant.has_static_path() {
        let f_s = f_s.ok_or_else(|| Error::Input(format!("{} needs a static input", variant.name())))?;
        let (_, hs, ws) = tape.value(f_s).dims3()?;
        let (_, hd, wd) = tape.value(f_d).dims3()?;
        if (hs, ws) != (hd, wd) {
            return Err(Error::Dimension(format!(
                "static BEV {hs}x{ws} and dynamic BEV {hd}x{wd} differ"
            )));
        }
        let matched = if params.contains("match.weight") {
            conv_relu(tape, params, "match", f_s, 1)?
        } else {
            f_s
        };
        static_maps.push(matched);
    }
    for l in 0..cfg.n_blocks {
        let d = dynamic[l];
        if variant.has_static_path() {
            let s = static_block_on(tape, d, static_maps[l], l, params, cfg)?;
            static_maps.push(s);
        }
        let next = dynamic_block_on(tape, d, l, params, cfg)?;
        dynamic.push(next);
    }
    let d_out = *dynamic.last().unwrap();
    let head_in = match variant {
        FusionVariant::DynamicOnly => d_out,
        FusionVariant::NcaDsi => dsi_on(tape, *static_maps.last().unwrap(), d_out, params, "dsi")?.f_o,
        FusionVariant::NcaOnly | FusionVariant::CnnOnly => {
            let both = tape.concat(&[*static_maps.last().unwrap(), d_out], 0)?;
            conv_relu(tape, params, "combine", both, 1)?
        }
    };
    Ok(BackboneVars {
        dynamic,
        static_maps,
        head_in,
    })
}

/// Values of every backbone stage.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneTrace {
    pub dynamic: Vec<Tensor>,
    pub static_maps: Vec<Tensor>,
    pub head_in: BevFeatureMap,
}

/// Backbone on precomputed BEV maps.
pub fn forward(
    params: &ParamStore,
    f_d_bev: &BevFeatureMap,
    f_s_bev: Option<&BevFeatureMap>,
    cfg: &ModelConfig,
) -> Result<BackboneTrace> {
    let mut tape = Tape::new();
    let d = tape.constant(f_d_bev.data.clone());
    let s = f_s_bev.map(|m| tape.constant(m.data.clone()));
    let v = backbone_on(&mut tape, d, s, params, cfg)?;
    let stride = f_d_bev.stride_meters * cfg.total_stride() as f32;
    Ok(BackboneTrace {
        dynamic: v.dynamic.iter().map(|&x| tape.value(x).clone()).collect(),
        static_maps: v.static_maps.iter().map(|&x| tape.value(x).clone()).collect(),
        head_in: BevFeatureMap::new(tape.value(v.head_in).clone(), stride)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_count_matches_formula_for_every_variant() {
        for variant in FusionVariant::ALL {
            for pathway in [Pathway::Dual, Pathway::SingleShared] {
                let cfg = ModelConfig::smoke().with_variant(variant).with_pathway(pathway);
                let p = build_model(&cfg, 0).unwrap();
                assert_eq!(p.num_scalars(), expected_param_count(&cfg), "{variant:?} {pathway:?}");
            }
        }
    }

    #[test]
    fn block_list_lengths_checked() {
        let mut cfg = ModelConfig::smoke();
        cfg.block_strides.pop();
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn grid_too_small_for_window_rejected() {
        let mut cfg = ModelConfig::smoke();
        cfg.attention.neighborhood = 7;
        cfg.block_strides = vec![2, 2, 2];
        // 32 -> 16 -> 8: the third block's 8x8 input still fits; a 4x4 would not
        assert!(build_model(&cfg, 0).is_ok());
        cfg.block_strides = vec![4, 2, 1];
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
    }
}

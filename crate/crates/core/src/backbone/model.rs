use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::config::BackboneConfig;
use super::nn::{gather_tokens, join, sincos_2d, Block, Init, LayerNorm, Linear, Params};
use crate::error::{Error, Result};
use crate::masking::MaskPair;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Online,
    Target,
}

/// What the target branch sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetView {
    /// All patches, no masking.
    #[default]
    Full,
    /// Visible patches of an independently drawn mask.
    VisibleOtherMask,
    /// Masked patches of the online mask, aligned through cross-attending rep
    /// decoders.
    MaskedSameMask,
}

fn fixed_tensor(values: Vec<f64>, rows: usize, cols: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, (rows, cols), device)?.to_dtype(dtype)?)
}

/// Copies parameter values from `src` into `dst`; both trees must list the same
/// names and shapes in the same order.
pub fn copy_params(dst: &[(String, &Var)], src: &[(String, &Var)]) -> Result<()> {
    check_mirror(dst, src)?;
    for ((_, d), (_, s)) in dst.iter().zip(src) {
        d.set(s.as_tensor())?;
    }
    Ok(())
}

pub(crate) fn check_mirror(a: &[(String, &Var)], b: &[(String, &Var)]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Structure(format!("{} vs {} parameters", a.len(), b.len())));
    }
    for ((na, va), (nb, vb)) in a.iter().zip(b) {
        if na != nb || va.dims() != vb.dims() {
            return Err(Error::Structure(format!(
                "{na} {:?} does not mirror {nb} {:?}",
                va.dims(),
                vb.dims()
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub patch_embed: Linear,
    pub cls_token: Option<Var>,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pos: Tensor,
    num_patches: usize,
}

impl Encoder {
    pub fn new(init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        let width = cfg.encoder.width;
        let patch_embed = Linear::new(init, cfg.patch_dim(), width)?;
        let cls_token = if cfg.use_class_token {
            Some(init.normal(&[1, 1, width], 0.02)?)
        } else {
            None
        };
        let blocks = (0..cfg.encoder.depth)
            .map(|_| Block::new(init, width, cfg.encoder.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let norm = LayerNorm::new(init, width)?;
        let n = cfg.num_patches();
        let pos = fixed_tensor(sincos_2d(width, cfg.grid(), cfg.grid(), false), n, width, init.dtype, &init.device)?;
        Ok(Encoder {
            patch_embed,
            cls_token,
            blocks,
            norm,
            pos,
            num_patches: n,
        })
    }

    pub fn has_class_token(&self) -> bool {
        self.cls_token.is_some()
    }

    /// Embeds the kept patches of each sample, adds their positional
    /// embeddings, prepends the class token and runs the block stack. Only the
    /// kept patch values enter the computation.
    pub fn forward(&self, patches: &Tensor, keep: &[Vec<usize>], collect_attention: bool) -> Result<(Tensor, Vec<Tensor>)> {
        let (b, n, _) = patches.dims3()?;
        if n != self.num_patches {
            return Err(Error::DimensionMismatch(format!(
                "encoder expects {} patches, got {n}",
                self.num_patches
            )));
        }
        let x = self.patch_embed.forward(&gather_tokens(patches, keep)?)?;
        let pos = gather_tokens(&self.pos.unsqueeze(0)?.repeat((b, 1, 1))?, keep)?;
        let mut x = (x + pos)?;
        if let Some(cls) = &self.cls_token {
            let width = cls.dims()[2];
            let cls = cls.as_tensor().broadcast_as((b, 1, width))?;
            x = Tensor::cat(&[&cls, &x], 1)?;
        }
        let mut maps = Vec::new();
        for block in &self.blocks {
            let (y, attn) = block.forward(&x, None)?;
            x = y;
            if collect_attention {
                maps.push(attn);
            }
        }
        Ok((self.norm.forward(&x)?, maps))
    }
}

impl Params for Encoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), out);
        if let Some(cls) = &self.cls_token {
            out.push((join(prefix, "cls_token"), cls));
        }
        self.blocks.visit(&join(prefix, "blocks"), out);
        self.norm.visit(&join(prefix, "norm"), out);
    }
}

/// Places `visible` tokens at their patch positions and `fill` everywhere else.
fn scatter_with_fill(visible: &Tensor, fill: &Tensor, masks: &[MaskPair]) -> Result<Tensor> {
    let (b, k, c) = visible.dims3()?;
    let n = masks.first().map_or(k, MaskPair::len);
    let m = n - k;
    let full = if m == 0 {
        visible.clone()
    } else {
        Tensor::cat(&[visible, &fill.broadcast_as((b, m, c))?], 1)?
    };
    let restore: Vec<Vec<usize>> = masks
        .iter()
        .map(|pair| {
            let order: Vec<usize> = pair.visible_indices().into_iter().chain(pair.masked_indices()).collect();
            let mut restore = vec![0; n];
            for (slot, patch) in order.into_iter().enumerate() {
                restore[patch] = slot;
            }
            restore
        })
        .collect();
    gather_tokens(&full, &restore)
}

fn split_class_token(tokens: &Tensor, has_cls: bool) -> Result<(Option<Tensor>, Tensor)> {
    if has_cls {
        let t = tokens.dim(1)?;
        Ok((Some(tokens.narrow(1, 0, 1)?), tokens.narrow(1, 1, t - 1)?))
    } else {
        Ok((None, tokens.clone()))
    }
}

fn prepend(cls: Option<&Tensor>, tokens: Tensor) -> Result<Tensor> {
    match cls {
        Some(cls) => Ok(Tensor::cat(&[cls, &tokens], 1)?),
        None => Ok(tokens),
    }
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    pub embed: Linear,
    pub mask_token: Var,
    pub blocks: Vec<Block>,
    pub norm: LayerNorm,
    pub pred: Linear,
    pos: Tensor,
}

impl PixelDecoder {
    pub fn new(init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        let width = cfg.pixel_decoder.width;
        let rows = cfg.num_patches() + usize::from(cfg.use_class_token);
        Ok(PixelDecoder {
            embed: Linear::new(init, cfg.encoder.width, width)?,
            mask_token: init.normal(&[1, 1, width], 0.02)?,
            blocks: (0..cfg.pixel_decoder.depth)
                .map(|_| Block::new(init, width, cfg.pixel_decoder.heads, cfg.mlp_ratio))
                .collect::<Result<Vec<_>>>()?,
            norm: LayerNorm::new(init, width)?,
            pred: Linear::new(init, width, cfg.patch_dim())?,
            pos: fixed_tensor(
                sincos_2d(width, cfg.grid(), cfg.grid(), cfg.use_class_token),
                rows,
                width,
                init.dtype,
                &init.device,
            )?,
        })
    }

    pub fn forward(&self, latent: &Tensor, masks: &[MaskPair], has_cls: bool) -> Result<Tensor> {
        let x = self.embed.forward(latent)?;
        let (cls, visible) = split_class_token(&x, has_cls)?;
        let full = scatter_with_fill(&visible, self.mask_token.as_tensor(), masks)?;
        let mut x = prepend(cls.as_ref(), full)?.broadcast_add(&self.pos)?;
        for block in &self.blocks {
            x = block.forward(&x, None)?.0;
        }
        let x = self.pred.forward(&self.norm.forward(&x)?)?;
        Ok(split_class_token(&x, has_cls)?.1)
    }
}

impl Params for PixelDecoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.embed.visit(&join(prefix, "embed"), out);
        out.push((join(prefix, "mask_token"), &self.mask_token));
        self.blocks.visit(&join(prefix, "blocks"), out);
        self.norm.visit(&join(prefix, "norm"), out);
        self.pred.visit(&join(prefix, "pred"), out);
    }
}

/// Shallow transformer mapping tokens into the shared representation space.
/// With depth zero it is the identity.
#[derive(Debug, Clone)]
pub struct RepDecoder {
    pub blocks: Vec<Block>,
    pub head: Option<(LayerNorm, Linear)>,
}

impl RepDecoder {
    pub fn new(init: &mut Init, cfg: &BackboneConfig) -> Result<Self> {
        let width = cfg.encoder.width;
        let blocks = (0..cfg.rep_decoder_depth)
            .map(|_| Block::new(init, width, cfg.encoder.heads, cfg.mlp_ratio))
            .collect::<Result<Vec<_>>>()?;
        let head = if cfg.rep_decoder_depth > 0 {
            Some((LayerNorm::new(init, width)?, Linear::new(init, width, width)?))
        } else {
            None
        };
        Ok(RepDecoder { blocks, head })
    }

    pub fn forward(&self, tokens: &Tensor, context: Option<&Tensor>) -> Result<Tensor> {
        let mut x = tokens.clone();
        for block in &self.blocks {
            x = block.forward(&x, context)?.0;
        }
        match &self.head {
            Some((norm, pred)) => pred.forward(&norm.forward(&x)?),
            None => Ok(x),
        }
    }
}

impl Params for RepDecoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.blocks.visit(&join(prefix, "blocks"), out);
        if let Some((norm, pred)) = &self.head {
            norm.visit(&join(prefix, "norm"), out);
            pred.visit(&join(prefix, "pred"), out);
        }
    }
}

/// Two-layer MLP with layer normalization: `fc2(gelu(ln(fc1(x))))`.
#[derive(Debug, Clone)]
pub struct MlpHead {
    pub fc1: Linear,
    pub norm: LayerNorm,
    pub fc2: Linear,
}

impl MlpHead {
    pub fn new(init: &mut Init, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(MlpHead {
            fc1: Linear::new(init, input, hidden)?,
            norm: LayerNorm::new(init, hidden)?,
            fc2: Linear::new(init, hidden, output)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.forward(&self.fc1.forward(x)?)?.gelu_erf()?;
        self.fc2.forward(&h)
    }
}

impl Params for MlpHead {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.norm.visit(&join(prefix, "norm"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }
}

#[derive(Debug, Clone)]
pub struct OnlineBranch {
    pub encoder: Encoder,
    pub pixel_decoder: PixelDecoder,
    pub rep_decoder: RepDecoder,
    pub rep_mask_token: Var,
    pub projector: MlpHead,
    pub predictor: MlpHead,
}

impl Params for OnlineBranch {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.encoder.visit(&join(prefix, "encoder"), out);
        self.pixel_decoder.visit(&join(prefix, "pixel_decoder"), out);
        self.rep_decoder.visit(&join(prefix, "rep_decoder"), out);
        out.push((join(prefix, "rep_mask_token"), &self.rep_mask_token));
        self.projector.visit(&join(prefix, "projector"), out);
        self.predictor.visit(&join(prefix, "predictor"), out);
    }
}

impl OnlineBranch {
    /// The online subtree mirrored by the target branch.
    pub fn mirrored_params(&self) -> Vec<(String, &Var)> {
        let mut out = Vec::new();
        self.encoder.visit("encoder", &mut out);
        self.rep_decoder.visit("rep_decoder", &mut out);
        self.projector.visit("projector", &mut out);
        out
    }
}

#[derive(Debug, Clone)]
pub struct TargetBranch {
    pub encoder: Encoder,
    pub rep_decoder: RepDecoder,
    pub projector: MlpHead,
}

impl Params for TargetBranch {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Var)>) {
        self.encoder.visit(&join(prefix, "encoder"), out);
        self.rep_decoder.visit(&join(prefix, "rep_decoder"), out);
        self.projector.visit(&join(prefix, "projector"), out);
    }
}

/// Outputs of one pretraining forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// Predicted patches `(B, N, patch_dim)`.
    pub pred: Tensor,
    /// Online predictor output `v_o^p`.
    pub online: Tensor,
    /// Target projector output `v_t`, detached.
    pub target: Tensor,
}

/// Online branch trained by gradients and EMA target branch.
#[derive(Debug, Clone)]
pub struct DualBranchModel {
    config: BackboneConfig,
    pub online: OnlineBranch,
    pub target: TargetBranch,
    rep_pos: Tensor,
    device: Device,
}

impl DualBranchModel {
    /// Builds the online branch from `seed` and copies it into the target branch.
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let device = Device::Cpu;
        let dtype = config.precision.dtype();
        let mut init = Init::new(rng::stream("init", &[seed]), dtype, device.clone());
        let width = config.encoder.width;
        let online = OnlineBranch {
            encoder: Encoder::new(&mut init, &config)?,
            pixel_decoder: PixelDecoder::new(&mut init, &config)?,
            rep_decoder: RepDecoder::new(&mut init, &config)?,
            rep_mask_token: init.normal(&[1, 1, width], 0.02)?,
            projector: MlpHead::new(&mut init, width, config.projector_hidden, config.projector_out)?,
            predictor: MlpHead::new(&mut init, config.projector_out, config.predictor_hidden, config.projector_out)?,
        };
        let target = TargetBranch {
            encoder: Encoder::new(&mut init, &config)?,
            rep_decoder: RepDecoder::new(&mut init, &config)?,
            projector: MlpHead::new(&mut init, width, config.projector_hidden, config.projector_out)?,
        };
        copy_params(&target.named_params(""), &online.mirrored_params())?;
        let rows = config.num_patches() + usize::from(config.use_class_token);
        let rep_pos = fixed_tensor(
            sincos_2d(width, config.grid(), config.grid(), config.use_class_token),
            rows,
            width,
            dtype,
            &device,
        )?;
        Ok(DualBranchModel {
            config,
            online,
            target,
            rep_pos,
            device,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.config.precision.dtype()
    }

    pub fn online_params(&self) -> Vec<(String, &Var)> {
        self.online.named_params("")
    }

    pub fn target_params(&self) -> Vec<(String, &Var)> {
        self.target.named_params("")
    }

    /// `(target, online)` parameter pairs in flattened order.
    pub fn mirror_pairs(&self) -> Result<Vec<(&Var, &Var)>> {
        let target = self.target_params();
        let online = self.online.mirrored_params();
        check_mirror(&target, &online)?;
        Ok(target.into_iter().zip(online).map(|((_, t), (_, o))| (t, o)).collect())
    }

    /// Builds the `(B, N, patch_dim)` input from flattened per-sample patches.
    pub fn patches_tensor(&self, patches: &[Vec<f32>]) -> Result<Tensor> {
        let n = self.config.num_patches();
        let p = self.config.patch_dim();
        for (i, sample) in patches.iter().enumerate() {
            if sample.len() != n * p {
                return Err(Error::DimensionMismatch(format!(
                    "sample {i} has {} patch values, expected {}",
                    sample.len(),
                    n * p
                )));
            }
        }
        let flat: Vec<f32> = patches.iter().flatten().copied().collect();
        Ok(Tensor::from_vec(flat, (patches.len(), n, p), &self.device)?.to_dtype(self.dtype())?)
    }

    fn check_masks(&self, patches: &Tensor, masks: &[MaskPair]) -> Result<()> {
        let (b, n, _) = patches.dims3()?;
        if masks.len() != b || masks.iter().any(|m| m.len() != n) {
            return Err(Error::DimensionMismatch(format!(
                "{} masks for a batch of {b} images with {n} patches",
                masks.len()
            )));
        }
        let visible = masks[0].len() - masks[0].masked();
        if masks.iter().any(|m| m.len() - m.masked() != visible) {
            return Err(Error::DimensionMismatch("masks in one batch must hide the same number of patches".into()));
        }
        Ok(())
    }

    fn encoder(&self, branch: Branch) -> &Encoder {
        match branch {
            Branch::Online => &self.online.encoder,
            Branch::Target => &self.target.encoder,
        }
    }

    fn encode_kept(&self, patches: &Tensor, masks: &[MaskPair], branch: Branch) -> Result<Tensor> {
        self.check_masks(patches, masks)?;
        let keep: Vec<Vec<usize>> = masks.iter().map(MaskPair::visible_indices).collect();
        let z = self.encoder(branch).forward(patches, &keep, false)?.0;
        Ok(match branch {
            Branch::Online => z,
            Branch::Target => z.detach(),
        })
    }

    /// Online encoder over visible patches: `(B, cls + visible, D)`.
    pub fn encode_visible(&self, patches: &Tensor, masks: &[MaskPair]) -> Result<Tensor> {
        self.encode_kept(patches, masks, Branch::Online)
    }

    /// Either encoder over all patches: `(B, cls + N, D)`. Target outputs are
    /// detached from the gradient graph.
    pub fn encode_full(&self, patches: &Tensor, branch: Branch) -> Result<Tensor> {
        let (b, n, _) = patches.dims3()?;
        let masks = vec![MaskPair::unmasked(n); b];
        self.encode_kept(patches, &masks, branch)
    }

    /// Encoder over all patches, returning per-block attention `(B, H, T, T)`.
    pub fn encoder_attention(&self, patches: &Tensor, branch: Branch) -> Result<Vec<Tensor>> {
        let (b, n, _) = patches.dims3()?;
        let keep = vec![(0..n).collect::<Vec<_>>(); b];
        Ok(self.encoder(branch).forward(patches, &keep, true)?.1)
    }

    /// Pixel decoder over visible latents: `(B, N, patch_dim)`.
    pub fn decode_pixels(&self, latent: &Tensor, masks: &[MaskPair]) -> Result<Tensor> {
        let has_cls = self.config.use_class_token;
        let visible = latent.dim(1)? - usize::from(has_cls);
        if masks.iter().any(|m| m.len() - m.masked() != visible) {
            return Err(Error::DimensionMismatch(format!(
                "{visible} latent tokens do not match the mask's visible count"
            )));
        }
        self.online.pixel_decoder.forward(latent, masks, has_cls)
    }

    /// Online full token set for the rep decoder: visible latents with the rep
    /// mask token at masked positions, plus positional embeddings.
    pub fn online_full_tokens(&self, latent: &Tensor, masks: &[MaskPair]) -> Result<Tensor> {
        let has_cls = self.config.use_class_token;
        let (cls, visible) = split_class_token(latent, has_cls)?;
        let full = scatter_with_fill(&visible, self.online.rep_mask_token.as_tensor(), masks)?;
        Ok(prepend(cls.as_ref(), full)?.broadcast_add(&self.rep_pos)?)
    }

    fn rep_decoder(&self, branch: Branch) -> &RepDecoder {
        match branch {
            Branch::Online => &self.online.rep_decoder,
            Branch::Target => &self.target.rep_decoder,
        }
    }

    fn mean_pool(&self, tokens: &Tensor) -> Result<Tensor> {
        let (_, patch_tokens) = split_class_token(tokens, self.config.use_class_token)?;
        Ok(patch_tokens.mean(1)?)
    }

    /// Rep decoder followed by mean pooling of the non-class tokens: `(B, D)`.
    pub fn rep_decode(&self, tokens: &Tensor, branch: Branch) -> Result<Tensor> {
        let decoded = self.rep_decoder(branch).forward(tokens, None)?;
        self.mean_pool(&decoded)
    }

    /// Cross-attending rep decoder: queries at the masked positions attend to
    /// the full token set; the outputs are mean pooled.
    pub fn rep_decode_masked(&self, queries: &Tensor, context: &Tensor, branch: Branch) -> Result<Tensor> {
        let decoded = self.rep_decoder(branch).forward(queries, Some(context))?;
        Ok(decoded.mean(1)?)
    }

    /// Online: projector then predictor. Target: projector only, detached.
    pub fn project_predict(&self, r: &Tensor, branch: Branch) -> Result<Tensor> {
        match branch {
            Branch::Online => self.online.predictor.forward(&self.online.projector.forward(r)?),
            Branch::Target => Ok(self.target.projector.forward(r)?.detach()),
        }
    }

    fn masked_positions(&self, tokens: &Tensor, masks: &[MaskPair]) -> Result<Tensor> {
        let (_, patch_tokens) = split_class_token(tokens, self.config.use_class_token)?;
        let idx: Vec<Vec<usize>> = masks.iter().map(MaskPair::masked_indices).collect();
        gather_tokens(&patch_tokens, &idx)
    }

    /// Full pretraining forward. `target_masks` is required for
    /// [`TargetView::VisibleOtherMask`].
    pub fn forward(
        &self,
        patches: &Tensor,
        masks: &[MaskPair],
        view: TargetView,
        target_masks: Option<&[MaskPair]>,
    ) -> Result<ForwardOutputs> {
        let latent = self.encode_visible(patches, masks)?;
        let pred = self.decode_pixels(&latent, masks)?;
        let online_full = self.online_full_tokens(&latent, masks)?;
        let (r_online, r_target) = match view {
            TargetView::Full => {
                let z_t = self.encode_full(patches, Branch::Target)?;
                (
                    self.rep_decode(&online_full, Branch::Online)?,
                    self.rep_decode(&z_t, Branch::Target)?,
                )
            }
            TargetView::VisibleOtherMask => {
                let other = target_masks
                    .ok_or_else(|| Error::Config("visible_other_mask view needs target masks".into()))?;
                let z_t = self.encode_kept(patches, other, Branch::Target)?;
                (
                    self.rep_decode(&online_full, Branch::Online)?,
                    self.rep_decode(&z_t, Branch::Target)?,
                )
            }
            TargetView::MaskedSameMask => {
                let z_t = self.encode_full(patches, Branch::Target)?;
                let q_online = self.masked_positions(&online_full, masks)?;
                let q_target = self.masked_positions(&z_t, masks)?;
                (
                    self.rep_decode_masked(&q_online, &online_full, Branch::Online)?,
                    self.rep_decode_masked(&q_target, &z_t, Branch::Target)?,
                )
            }
        };
        Ok(ForwardOutputs {
            pred,
            online: self.project_predict(&r_online, Branch::Online)?,
            target: self.project_predict(&r_target, Branch::Target)?.detach(),
        })
    }

    /// `θ_t ← τ θ_t + (1 − τ) θ_o` for every mirrored parameter.
    pub fn ema_update(&self, tau: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Config(format!("EMA momentum {tau} outside [0, 1]")));
        }
        for (t, o) in self.mirror_pairs()? {
            let blended = (t.as_tensor().affine(tau, 0.0)? + o.as_tensor().affine(1.0 - tau, 0.0)?)?;
            t.set(&blended)?;
        }
        Ok(())
    }
}

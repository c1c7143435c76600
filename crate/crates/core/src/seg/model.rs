use rand_chacha::ChaCha8Rng;

use super::head::PyramidHead;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Scalar, Session, Tensor, Var};
use crate::vit::{patchify, PatchEmbed, Stack};

const SOURCE_PREFIX: &str = "student.";
const ENCODER_PREFIXES: [&str; 2] = ["patch_embed.", "encoder."];

/// Full-grid encoder with taps feeding a pyramid head.
#[derive(Debug, Clone)]
pub struct SegModel<F> {
    pub embed: PatchEmbed<F>,
    pub encoder: Stack,
    pub taps: Vec<usize>,
    pub head: PyramidHead<F>,
    pub patch_size: usize,
}

impl<F: Scalar> SegModel<F> {
    pub fn new(store: &mut ParamStore<F>, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let enc = cfg.encoder();
        let patch_width = cfg.channels * cfg.patch_size * cfg.patch_size;
        let embed = PatchEmbed::new(
            store,
            "patch_embed",
            patch_width,
            enc.dim,
            cfg.grid(),
            true,
            rng,
        )?;
        let encoder = Stack::new(store, "encoder", enc, true, rng)?;
        let head = PyramidHead::new(
            store,
            "head",
            cfg.grid(),
            cfg.patch_size,
            &cfg.tap_scales,
            enc.dim,
            cfg.fpn_dim,
            cfg.num_classes,
            rng,
        )?;
        Ok(Self {
            embed,
            encoder,
            taps: cfg.effective_taps(),
            head,
            patch_size: cfg.patch_size,
        })
    }

    /// Encoder activations after each tapped block, `[T, D]` each.
    pub fn tap_features<'s>(
        &self,
        s: &'s Session<'_, F>,
        tokens: &Tensor<F>,
    ) -> Result<Vec<Var<'s, F>>> {
        let x = self.embed.forward(s, tokens)?;
        self.encoder.forward_taps(s, x, &self.taps)
    }

    /// Logits `[H·W, classes]` for pre-patchified tokens.
    pub fn forward<'s>(&self, s: &'s Session<'_, F>, tokens: &Tensor<F>) -> Result<Var<'s, F>> {
        let feats = self.tap_features(s, tokens)?;
        self.head.forward(s, &feats)
    }
}

/// Logits `[classes, H, W]` for one `[C, H, W]` image.
pub fn segment<F: Scalar>(
    store: &ParamStore<F>,
    model: &SegModel<F>,
    image: &Tensor<F>,
) -> Result<Tensor<F>> {
    let tokens = patchify(image, model.patch_size)?.tokens;
    let s = Session::no_grad(store);
    let logits = model.forward(&s, &tokens)?.to_tensor();
    let (h, w) = model.head.image;
    let classes = logits.shape()[1];
    logits.permute(&[1, 0])?.reshape(&[classes, h, w])
}

fn is_encoder(name: &str) -> bool {
    ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Copies pretrained student encoder weights into the segmentation encoder.
/// The decoder and mask token are ignored. Every missing tensor or shape
/// difference is reported together.
pub fn load_encoder<F: Scalar>(
    target: &mut ParamStore<F>,
    pretrained: &ParamStore<F>,
) -> Result<usize> {
    let mut problems = Vec::new();
    let mut updates = Vec::new();
    for (id, p) in target.iter().filter(|(_, p)| is_encoder(&p.name)) {
        let source = format!("{SOURCE_PREFIX}{}", p.name);
        match pretrained.by_name(&source) {
            None => problems.push(format!("{source}: missing")),
            Some(src) if src.tensor.shape() != p.tensor.shape() => problems.push(format!(
                "{}: checkpoint {:?} vs model {:?}",
                p.name,
                src.tensor.shape(),
                p.tensor.shape()
            )),
            Some(src) => updates.push((id, src.tensor.clone())),
        }
    }
    if !problems.is_empty() {
        return Err(Error::Checkpoint(problems.join("; ")));
    }
    let n = updates.len();
    for (id, t) in updates {
        target.get_mut(id).tensor = t;
    }
    Ok(n)
}

/// Encoder tensors under their pretraining names.
pub fn encoder_params<F: Scalar>(store: &ParamStore<F>) -> Vec<(String, Tensor<F>)> {
    store
        .iter()
        .filter(|(_, p)| is_encoder(&p.name))
        .map(|(_, p)| (format!("{SOURCE_PREFIX}{}", p.name), p.tensor.clone()))
        .collect()
}

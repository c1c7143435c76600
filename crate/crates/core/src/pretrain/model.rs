use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mve::{assemble_full_grid, extract, WindowPlan};
use crate::rng::trunc_normal;
use crate::tensor::{ParamId, ParamStore, Scalar, Session, Tensor, Var};
use crate::vit::{Linear, MaskPlan, PatchEmbed, Stack};

/// Patch embedding, global encoder over visible tokens, shared mask token and a
/// per-window decoder projecting into the teacher's feature space.
#[derive(Debug, Clone)]
pub struct StudentModel<F> {
    pub embed: PatchEmbed<F>,
    pub encoder: Stack,
    pub mask_token: ParamId,
    pub decoder_in: Linear,
    pub decoder: Stack,
    pub decoder_out: Linear,
}

/// Patch embedding and encoder only; never trainable.
#[derive(Debug, Clone)]
pub struct TeacherModel<F> {
    pub embed: PatchEmbed<F>,
    pub encoder: Stack,
}

impl<F: Scalar> StudentModel<F> {
    pub fn new(store: &mut ParamStore<F>, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let patch_width = cfg.channels * cfg.patch_size * cfg.patch_size;
        let enc = cfg.encoder();
        let dec = cfg.decoder();
        Ok(Self {
            embed: PatchEmbed::new(
                store,
                "student.patch_embed",
                patch_width,
                enc.dim,
                cfg.grid(),
                true,
                rng,
            )?,
            encoder: Stack::new(store, "student.encoder", enc, true, rng)?,
            mask_token: store.add(
                "student.mask_token",
                trunc_normal(&[enc.dim], 0.02, rng),
                true,
            )?,
            decoder_in: Linear::new(store, "student.decoder_in", enc.dim, dec.dim, true, rng)?,
            decoder: Stack::new(store, "student.decoder", dec, true, rng)?,
            decoder_out: Linear::new(store, "student.decoder_out", dec.dim, enc.dim, true, rng)?,
        })
    }
}

impl<F: Scalar> TeacherModel<F> {
    pub fn new(store: &mut ParamStore<F>, cfg: &RunConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let patch_width = cfg.channels * cfg.patch_size * cfg.patch_size;
        let enc = cfg.encoder();
        Ok(Self {
            embed: PatchEmbed::new(
                store,
                "teacher.patch_embed",
                patch_width,
                enc.dim,
                cfg.grid(),
                false,
                rng,
            )?,
            encoder: Stack::new(store, "teacher.encoder", enc, false, rng)?,
        })
    }
}

pub struct StudentOutput<'s, F: Scalar> {
    /// `[lᵢ², D_t]` per window, in plan order.
    pub predictions: Vec<Var<'s, F>>,
    pub masked: Vec<Vec<bool>>,
    pub coords: Vec<Vec<(usize, usize)>>,
}

/// Encode visible tokens, assemble the grid with mask tokens, cut the planned
/// windows and decode each window on its own.
pub fn student_forward<'s, F: Scalar>(
    s: &'s Session<'_, F>,
    model: &StudentModel<F>,
    tokens: &Tensor<F>,
    mask: &MaskPlan,
    windows: &WindowPlan,
) -> Result<StudentOutput<'s, F>> {
    let t = tokens.shape()[0];
    if mask.tokens != t || windows.grid != model.embed.grid {
        return Err(Error::Invalid(format!(
            "plans for {} tokens / grid {:?} do not match {t} tokens / grid {:?}",
            mask.tokens, windows.grid, model.embed.grid
        )));
    }
    let embedded = model.embed.forward(s, tokens)?;
    let visible = mask.visible_indices();
    let encoded = model.encoder.forward(s, embedded.gather(&visible)?)?;
    let full = assemble_full_grid(encoded, mask, s.param(model.mask_token), &model.embed.pos)?;
    let fields = extract(full, windows, mask)?;
    let predictions = fields
        .tokens
        .iter()
        .map(|&w| {
            let x = model.decoder_in.forward(s, w)?;
            let x = model.decoder.forward(s, x)?;
            model.decoder_out.forward(s, x)
        })
        .collect::<Result<_>>()?;
    Ok(StudentOutput {
        predictions,
        masked: fields.masked,
        coords: fields.coords,
    })
}

pub struct TeacherOutput<F> {
    pub targets: Vec<Tensor<F>>,
    pub coords: Vec<Vec<(usize, usize)>>,
}

/// Embeds every patch, cuts the same windows and encodes each window alone.
/// Runs on a non-recording tape, so nothing here can receive gradients.
pub fn teacher_forward<F: Scalar>(
    store: &ParamStore<F>,
    model: &TeacherModel<F>,
    tokens: &Tensor<F>,
    windows: &WindowPlan,
) -> Result<TeacherOutput<F>> {
    if windows.grid != model.embed.grid || tokens.shape()[0] != windows.grid.0 * windows.grid.1 {
        return Err(Error::Invalid(format!(
            "window plan grid {:?} does not match teacher grid {:?}",
            windows.grid, model.embed.grid
        )));
    }
    let s = Session::no_grad(store);
    let embedded = model.embed.forward(&s, tokens)?;
    let fields = extract(embedded, windows, &MaskPlan::none(tokens.shape()[0]))?;
    let targets = fields
        .tokens
        .iter()
        .map(|&w| Ok(model.encoder.forward(&s, w)?.to_tensor()))
        .collect::<Result<_>>()?;
    Ok(TeacherOutput {
        targets,
        coords: fields.coords,
    })
}

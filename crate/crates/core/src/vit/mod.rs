//! Patch tokens, positional tables, random masking and Transformer stacks.

mod block;
mod mask;
mod patch;
mod posembed;

pub use block::{Attention, Block, LayerNorm, Linear, Mlp, PatchEmbed, Stack, StackConfig};
pub use mask::{sample_mask, MaskPlan};
pub use patch::{patchify, unpatchify, TokenGrid};
pub use posembed::sincos_2d;

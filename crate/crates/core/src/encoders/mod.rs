//! Target-domain encoders: the divided space-time video transformer and the
//! question encoder.

pub mod text;
pub mod video;

use crate::error::Result;
use crate::tensor::{Real, Tape, Var};

pub use text::{tokenize, QuestionEncoder, Vocabulary};
pub use video::{extract_patches, sample_frames, TimeSformer, VideoClip};

/// An encoded sequence `[cls, x_1, .., x_N]` of shape `(1 + N) x width`.
#[derive(Clone, Debug)]
pub struct SequenceFeatures {
    pub tokens: Var,
    pub len: usize,
    pub width: usize,
    /// Attention mask over positions (true = real token). `None` means every
    /// position is real.
    pub key_mask: Option<Vec<bool>>,
}

impl SequenceFeatures {
    /// The class token as a `1 x width` row.
    pub fn cls<T: Real>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        tape.rows(self.tokens, 0, 1)
    }

    /// Content length `N` (excluding the class token).
    pub fn content_len(&self) -> usize {
        self.len - 1
    }
}

//! Inspection tools over a trained model: word attention maps and the
//! one-word caption edit.

use autograd::Tensor;
use serde::Serialize;

use crate::corpus::{caption_background, dominant_color, CorpusSpec};
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::losses::word_attention;
use crate::models::{GanModel, ImageSet, NoiseBundle};

/// Attention of one caption word over the image regions.
#[derive(Debug, Clone, Serialize)]
pub struct WordAttention {
    pub token: String,
    pub position: usize,
    /// Region-normalized attention mass the word collects before the
    /// per-word softmax; used for ranking.
    pub mass: f64,
    /// Attention over regions, row-major on the region grid; sums to 1.
    pub map: Vec<f64>,
}

/// Word attention of `tokens` over the regions of `image`, ranked by mass
/// (descending, ties by position) and truncated to `top`. Captions with at
/// most `top` words return every word.
pub fn attention_maps(embedder: &Embedder, image: &[f64], tokens: &[String], gamma1: f64, top: usize) -> Result<Vec<WordAttention>> {
    let ids = embedder.vocab.encode(tokens)?;
    let cond = embedder.encode_tokens(&ids)?;
    let feats = embedder.encode_image(image)?;
    let (r, d) = (embedder.config.num_regions(), embedder.dim());
    let regions = Tensor::new(feats.region_features, &[1, r, d]);
    let words = cond.words_tensor();
    let per_region = regions.matmul(&words.transpose(0, 1)).softmax(2); // [1, R, T]
    let mass = per_region.sum_axis(1, false).to_vec();
    let alpha = word_attention(&regions, &words, gamma1).to_vec(); // [1, T, R]
    let mut out: Vec<WordAttention> = tokens
        .iter()
        .enumerate()
        .map(|(t, tok)| WordAttention { token: tok.clone(), position: t, mass: mass[t], map: alpha[t * r..(t + 1) * r].to_vec() })
        .collect();
    out.sort_by(|a, b| b.mass.total_cmp(&a.mass).then(a.position.cmp(&b.position)));
    out.truncate(top);
    Ok(out)
}

/// Per-sample readout of one side of an edit.
#[derive(Debug, Clone, Serialize)]
pub struct EditSide {
    pub tokens: Vec<String>,
    /// Dominant palette color index per sample.
    pub dominant_color: Vec<Option<usize>>,
    /// Classifier argmax category per sample.
    pub category: Vec<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EditReport {
    pub position: usize,
    pub original: EditSide,
    pub edited: EditSide,
    /// Samples whose dominant color moved from the original caption's color
    /// to the edited caption's color. Zero when the edit is not a color word.
    pub color_flips: usize,
    /// Samples whose predicted shape is unchanged by the edit.
    pub shape_kept: usize,
    pub samples: usize,
}

pub struct EditOutcome {
    pub before: ImageSet,
    pub after: ImageSet,
    pub report: EditReport,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn caption_color(spec: &CorpusSpec, tokens: &[String]) -> Option<usize> {
    tokens.iter().find_map(|t| spec.colors.iter().position(|c| &c.name == t))
}

fn read_side(embedder: &Embedder, spec: &CorpusSpec, set: &ImageSet, tokens: Vec<String>) -> Result<EditSide> {
    let palette: Vec<[u8; 3]> = spec.colors.iter().map(|c| c.rgb).collect();
    let background = caption_background(spec, &tokens).map(|b| spec.backgrounds[b].rgb).unwrap_or([0, 0, 0]);
    let y = embedder.config.num_classes;
    let probs = embedder.classify(&set.final_stage().concat())?;
    Ok(EditSide {
        dominant_color: set.final_stage().iter().map(|img| dominant_color(img, &palette, background)).collect(),
        category: probs.chunks(y).map(argmax).collect(),
        tokens,
    })
}

/// Replace the token at `position` with `replacement` and render both
/// captions from the same noise.
pub fn edit_demo(
    model: &GanModel,
    embedder: &Embedder,
    spec: &CorpusSpec,
    tokens: &[String],
    position: usize,
    replacement: &str,
    noise: &NoiseBundle,
) -> Result<EditOutcome> {
    if position >= tokens.len() {
        return Err(Error::InvalidArgument(format!("token index {position} out of range for a {}-word caption", tokens.len())));
    }
    if embedder.vocab.index_of(replacement).is_none() {
        return Err(Error::UnknownToken(replacement.to_string()));
    }
    let mut edited = tokens.to_vec();
    edited[position] = replacement.to_string();
    let before = model.generate_set(&embedder.encode_tokens(&embedder.vocab.encode(tokens)?)?, noise)?;
    let after = model.generate_set(&embedder.encode_tokens(&embedder.vocab.encode(&edited)?)?, noise)?;
    let original = read_side(embedder, spec, &before, tokens.to_vec())?;
    let edited_side = read_side(embedder, spec, &after, edited)?;

    let from = caption_color(spec, &original.tokens);
    let to = caption_color(spec, &edited_side.tokens);
    let color_flips = match (from, to) {
        (Some(a), Some(b)) if a != b => original
            .dominant_color
            .iter()
            .zip(&edited_side.dominant_color)
            .filter(|(x, y)| **x == Some(a) && **y == Some(b))
            .count(),
        _ => 0,
    };
    let shape = |c: usize| spec.category_parts(c).0;
    let shape_kept = original.category.iter().zip(&edited_side.category).filter(|(a, b)| shape(**a) == shape(**b)).count();
    let samples = original.category.len();
    Ok(EditOutcome {
        before,
        after,
        report: EditReport { position, original, edited: edited_side, color_flips, shape_kept, samples },
    })
}

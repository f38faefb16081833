//! Straight-line scalar versions of the loss kernels.
//!
//! Nothing here is vectorized or shares code with the tensor kernels: each
//! function spells out the defining sums with explicit loops so it can serve
//! as an independent check. Inputs are nested `Vec`s indexed in the order
//! given in each signature.

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na * nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Word-level relevance of caption `words` (`[T][D]`) to one image's
/// `regions` (`[R][D]`).
pub fn word_relevance(regions: &[Vec<f64>], words: &[Vec<f64>], g1: f64, g2: f64) -> f64 {
    let (r, t) = (regions.len(), words.len());
    // s[j][i]: region j, word i; normalized over words for each region
    let mut norm = vec![vec![0.0; t]; r];
    for j in 0..r {
        let raw: Vec<f64> = (0..t).map(|i| dot(&words[i], &regions[j])).collect();
        norm[j] = softmax(&raw);
    }
    let mut acc = 0.0;
    for i in 0..t {
        let sharpened: Vec<f64> = (0..r).map(|j| g1 * norm[j][i]).collect();
        let alpha = softmax(&sharpened);
        let d = words[i].len();
        let mut ctx = vec![0.0; d];
        for j in 0..r {
            for c in 0..d {
                ctx[c] += alpha[j] * regions[j][c];
            }
        }
        acc += (g2 * cosine(&ctx, &words[i])).exp();
    }
    acc.ln() / g2
}

fn bidirectional(scores: &[Vec<f64>], masked: &dyn Fn(usize, usize) -> bool) -> f64 {
    // scores[j][i]: image j, caption i
    let b = scores.len();
    let mut caption_given_image = 0.0;
    let mut image_given_caption = 0.0;
    for j in 0..b {
        let mut z = 0.0;
        for i in 0..b {
            if !masked(j, i) {
                z += scores[j][i].exp();
            }
        }
        caption_given_image -= (scores[j][j].exp() / z).ln();
    }
    for i in 0..b {
        let mut z = 0.0;
        for j in 0..b {
            if !masked(j, i) {
                z += scores[j][i].exp();
            }
        }
        image_given_caption -= (scores[i][i].exp() / z).ln();
    }
    (caption_given_image + image_given_caption) / b as f64
}

/// Matching loss summed over branches.
///
/// `regions[k][b][r][d]`, `global[k][b][d]`, `words[b][t][d]`,
/// `sentences[b][d]`. Items sharing a `groups` id are not each other's negatives.
#[allow(clippy::too_many_arguments)]
pub fn similarity(
    regions: &[Vec<Vec<Vec<f64>>>],
    global: &[Vec<Vec<f64>>],
    words: &[Vec<Vec<f64>>],
    sentences: &[Vec<f64>],
    gammas: (f64, f64, f64),
    groups: Option<&[usize]>,
) -> f64 {
    let (g1, g2, g3) = gammas;
    let b = sentences.len();
    let masked = |j: usize, i: usize| match groups {
        Some(g) => i != j && g[i] == g[j],
        None => false,
    };
    let mut total = 0.0;
    for k in 0..regions.len() {
        let mut word_scores = vec![vec![0.0; b]; b];
        let mut sent_scores = vec![vec![0.0; b]; b];
        for j in 0..b {
            for i in 0..b {
                word_scores[j][i] = g3 * word_relevance(&regions[k][j], &words[i], g1, g2);
                sent_scores[j][i] = g3 * cosine(&global[k][j], &sentences[i]);
            }
        }
        total += bidirectional(&word_scores, &masked) + bidirectional(&sent_scores, &masked);
    }
    total
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += (a[i] - b[i]).abs();
    }
    s / a.len() as f64
}

/// `(−Σ ratio, Σ ratio)` with `images[k][b][n]`, `noise[k][b][z]`.
pub fn diversity(images: &[Vec<Vec<f64>>], noise: &[Vec<Vec<f64>>], epsilon: f64, use_max: bool) -> (f64, f64) {
    let k = images.len();
    let b = images[0].len();
    let mut sum = 0.0;
    for kk in 0..k {
        let mut per_item = 0.0;
        for bb in 0..b {
            let mut best: Option<f64> = None;
            for other in 0..k {
                if other == kk {
                    continue;
                }
                let r = mean_abs_diff(&images[kk][bb], &images[other][bb])
                    / (mean_abs_diff(&noise[kk][bb], &noise[other][bb]) + epsilon);
                best = Some(match best {
                    None => r,
                    Some(v) if use_max => v.max(r),
                    Some(v) => v.min(r),
                });
            }
            per_item += best.unwrap();
        }
        sum += per_item / b as f64;
    }
    (-sum, sum)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `(adv_g, adv_d)`; `fakes[k][b]`.
pub fn adversarial(real: &[f64], fakes: &[Vec<f64>]) -> (f64, f64) {
    let k = fakes.len() as f64;
    let mut g = 0.0;
    let mut d = k * mean(&real.iter().map(|&x| -sigmoid(x).ln()).collect::<Vec<_>>());
    for f in fakes {
        g += mean(&f.iter().map(|&x| -sigmoid(x).ln()).collect::<Vec<_>>());
        d += mean(&f.iter().map(|&x| -(1.0 - sigmoid(x)).ln()).collect::<Vec<_>>());
    }
    (g, d)
}

pub fn relativistic_term(a: f64, b: f64, l: f64) -> f64 {
    -sigmoid((a - b) * l).ln()
}

/// `(rel_g, rel_d)` with labels `(l, −l)`.
pub fn relativistic(real: &[f64], fakes: &[Vec<f64>], l: f64, averaged: bool) -> (f64, f64) {
    let (lr, lf) = (l, -l);
    let real_mean = mean(real);
    let mut g = 0.0;
    let mut d = 0.0;
    for f in fakes {
        let fake_mean = mean(f);
        let mut g1 = 0.0;
        let mut g2 = 0.0;
        let mut d1 = 0.0;
        let mut d2 = 0.0;
        for (i, &s) in f.iter().enumerate() {
            let x_ref = if averaged { real_mean } else { real[i] };
            g1 += relativistic_term(s, x_ref, lr);
            d2 += relativistic_term(s, x_ref, lf);
        }
        for (i, &x) in real.iter().enumerate() {
            let s_ref = if averaged { fake_mean } else { f[i] };
            g2 += relativistic_term(x, s_ref, lf);
            d1 += relativistic_term(x, s_ref, lr);
        }
        g += g1 / f.len() as f64 + g2 / real.len() as f64;
        d += d1 / real.len() as f64 + d2 / f.len() as f64;
    }
    (g, d)
}

/// Class probabilities of the head on the mixed feature of one item.
/// `real[d]`, `fakes[k][d]`, `weight[y][2d]`, `bias[y]`.
pub fn head_probabilities(real: &[f64], fakes: &[Vec<f64>], weight: &[Vec<f64>], bias: &[f64], lambda: f64) -> Vec<f64> {
    let d = real.len();
    let mut mixed = real.to_vec();
    let mut block = vec![0.0; d];
    for f in fakes {
        let c = cosine(real, f);
        for i in 0..d {
            block[i] += f[i] * c;
        }
    }
    for v in block {
        mixed.push(lambda * v);
    }
    let logits: Vec<f64> = (0..weight.len()).map(|y| dot(&weight[y], &mixed) + bias[y]).collect();
    softmax(&logits)
}

fn head_logits(real: &[f64], fakes: &[Vec<f64>], weight: &[Vec<f64>], bias: &[f64], lambda: f64) -> Vec<f64> {
    let d = real.len();
    let mut mixed = real.to_vec();
    mixed.resize(2 * d, 0.0);
    for f in fakes {
        let c = cosine(real, f);
        for i in 0..d {
            mixed[d + i] += lambda * f[i] * c;
        }
    }
    (0..weight.len()).map(|y| dot(&weight[y], &mixed) + bias[y]).collect()
}

/// Batch-mean cross-entropy. `real[b][d]`, `fakes[k][b][d]`.
pub fn category(real: &[Vec<f64>], fakes: &[Vec<Vec<f64>>], weight: &[Vec<f64>], bias: &[f64], labels: &[usize], lambda: f64) -> f64 {
    let mut total = 0.0;
    for b in 0..real.len() {
        let f: Vec<Vec<f64>> = fakes.iter().map(|k| k[b].clone()).collect();
        let p = head_probabilities(&real[b], &f, weight, bias, lambda);
        total -= p[labels[b]].ln();
    }
    total / real.len() as f64
}

/// Multi-label category loss: the literal hinge form, or per-class logistic
/// loss when `soft_margin`.
#[allow(clippy::too_many_arguments)]
pub fn category_multilabel(
    real: &[Vec<f64>],
    fakes: &[Vec<Vec<f64>>],
    weight: &[Vec<f64>],
    bias: &[f64],
    labels: &[Vec<usize>],
    lambda: f64,
    soft_margin: bool,
) -> f64 {
    let mut total = 0.0;
    for b in 0..real.len() {
        let f: Vec<Vec<f64>> = fakes.iter().map(|k| k[b].clone()).collect();
        let mut set: Vec<usize> = labels[b].clone();
        set.sort_unstable();
        set.dedup();
        if soft_margin {
            let x = head_logits(&real[b], &f, weight, bias, lambda);
            let mut s = 0.0;
            for (y, &xy) in x.iter().enumerate() {
                let t = if set.contains(&y) { 1.0 } else { 0.0 };
                s -= t * sigmoid(xy).ln() + (1.0 - t) * sigmoid(-xy).ln();
            }
            total += s / x.len() as f64;
        } else {
            let p = head_probabilities(&real[b], &f, weight, bias, lambda);
            let mut s = 0.0;
            for (y, &py) in p.iter().enumerate() {
                let ind = if set.contains(&y) { 1.0 } else { 0.0 };
                s += f64::max(0.0, 1.0 - py.ln() - ind);
            }
            total += -s / set.len() as f64;
        }
    }
    total / real.len() as f64
}

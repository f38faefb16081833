//! Procedural captioned image corpus.
//!
//! Every image shows one to three flat-colored shapes on a uniform
//! background. A category is a `(shape, color)` pair with id
//! `shape_index * colors.len() + color_index`. Captions are produced from
//! token templates and tokenized by lowercasing and splitting on whitespace.
//!
//! On disk a corpus is a directory holding `manifest.jsonl` (one record per
//! line, in id order), `vocab.txt` (one token per line; line `i` is index
//! `i + 1`, index 0 is padding), `corpus_spec.json`, and `images/*.png`.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster;
use crate::splitmix64;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const SPEC_FILE: &str = "corpus_spec.json";
pub const PAD_TOKEN: &str = "<pad>";

/// Shapes the rasterizer knows how to draw.
pub const KNOWN_SHAPES: &[&str] = &["circle", "square", "triangle", "diamond", "cross", "ring"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamedColor {
    pub name: String,
    pub rgb: [u8; 3],
}

impl NamedColor {
    pub fn new(name: &str, rgb: [u8; 3]) -> Self {
        Self { name: name.to_string(), rgb }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub seed: u64,
    pub image_size: u32,
    pub shapes: Vec<String>,
    pub colors: Vec<NamedColor>,
    pub backgrounds: Vec<NamedColor>,
    pub num_images: usize,
    /// Inclusive `[min, max]` object count per image, within `1..=3`.
    pub objects_per_image: [usize; 2],
    pub caption_templates: Vec<String>,
}

impl Default for CorpusSpec {
    /// The 8-category toy corpus: 4 shapes x 2 colors on 3 backgrounds, 32 px.
    fn default() -> Self {
        Self {
            seed: 7,
            image_size: 32,
            shapes: ["circle", "square", "triangle", "diamond"].map(String::from).to_vec(),
            colors: vec![NamedColor::new("red", [220, 40, 40]), NamedColor::new("blue", [40, 80, 230])],
            backgrounds: vec![
                NamedColor::new("black", [15, 15, 15]),
                NamedColor::new("white", [240, 240, 240]),
                NamedColor::new("gray", [128, 128, 128]),
            ],
            num_images: 2000,
            objects_per_image: [1, 1],
            caption_templates: vec!["a {color} {shape} on a {background} background".to_string()],
        }
    }
}

impl CorpusSpec {
    pub fn num_categories(&self) -> usize {
        self.shapes.len() * self.colors.len()
    }

    pub fn category_id(&self, shape: usize, color: usize) -> usize {
        shape * self.colors.len() + color
    }

    /// `(shape index, color index)` of a category id.
    pub fn category_parts(&self, category: usize) -> (usize, usize) {
        (category / self.colors.len(), category % self.colors.len())
    }

    pub fn is_multi_object(&self) -> bool {
        self.objects_per_image[1] > 1
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if !(16..=64).contains(&self.image_size) || !self.image_size.is_power_of_two() {
            return bad(format!("image_size must be a power of two in 16..=64, got {}", self.image_size));
        }
        if self.shapes.is_empty() {
            return bad("shape list is empty".into());
        }
        if self.colors.is_empty() {
            return bad("color list is empty".into());
        }
        if self.backgrounds.is_empty() {
            return bad("background list is empty".into());
        }
        if self.caption_templates.is_empty() {
            return bad("caption template list is empty".into());
        }
        if self.num_images == 0 {
            return bad("num_images must be positive".into());
        }
        let [lo, hi] = self.objects_per_image;
        if lo < 1 || hi > 3 || lo > hi {
            return bad(format!("objects_per_image must satisfy 1 <= min <= max <= 3, got [{lo}, {hi}]"));
        }
        for s in &self.shapes {
            if !KNOWN_SHAPES.contains(&s.as_str()) {
                return bad(format!("unknown shape `{s}` (known: {})", KNOWN_SHAPES.join(", ")));
            }
        }
        let mut seen = HashSet::new();
        let names = self
            .shapes
            .iter()
            .chain(self.colors.iter().map(|c| &c.name))
            .chain(self.backgrounds.iter().map(|c| &c.name));
        for name in names {
            if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c.is_uppercase()) {
                return bad(format!("names must be single lowercase words, got `{name}`"));
            }
            if !seen.insert(name.clone()) {
                return bad(format!("name `{name}` is used twice; captions would be ambiguous"));
            }
        }
        for t in &self.caption_templates {
            if !t.contains("{color}") || !t.contains("{shape}") {
                return bad(format!("template `{t}` must mention {{color}} and {{shape}}"));
            }
        }
        Ok(())
    }

    /// Every token a caption of this spec can contain, sorted.
    pub fn token_universe(&self) -> Vec<String> {
        let mut set = BTreeSet::new();
        for t in &self.caption_templates {
            for word in t.split_whitespace() {
                match word {
                    "{color}" | "{shape}" | "{background}" => {}
                    w => {
                        set.insert(w.to_lowercase());
                    }
                }
            }
        }
        set.extend(self.shapes.iter().cloned());
        set.extend(self.colors.iter().map(|c| c.name.clone()));
        set.extend(self.backgrounds.iter().map(|c| c.name.clone()));
        if self.is_multi_object() {
            set.insert("and".to_string());
        }
        set.into_iter().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: u64,
    pub image_path: String,
    pub tokens: Vec<String>,
    pub category_ids: Vec<usize>,
}

impl CaptionRecord {
    pub fn caption(&self) -> String {
        self.tokens.join(" ")
    }

    pub fn primary_category(&self) -> usize {
        self.category_ids[0]
    }
}

/// Token ↔ index map. Index 0 is the padding token and never appears in captions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut list = vec![PAD_TOKEN.to_string()];
        let mut index = HashMap::new();
        index.insert(PAD_TOKEN.to_string(), 0);
        for t in tokens {
            if index.contains_key(&t) {
                return Err(Error::InvalidArgument(format!("duplicate vocabulary token `{t}`")));
            }
            index.insert(t.clone(), list.len());
            list.push(t);
        }
        Ok(Self { tokens: list, index })
    }

    /// Size including the padding slot.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() <= 1
    }

    pub fn index_of(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied().filter(|&i| i != 0)
    }

    pub fn token(&self, index: usize) -> Option<&str> {
        self.tokens.get(index).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens
            .iter()
            .map(|t| self.index_of(t).ok_or_else(|| Error::UnknownToken(t.clone())))
            .collect()
    }

    /// Lowercase whitespace tokenization followed by [`Vocabulary::encode`].
    pub fn encode_caption(&self, caption: &str) -> Result<Vec<usize>> {
        self.encode(&tokenize(caption))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = String::new();
        for t in &self.tokens[1..] {
            text.push_str(t);
            text.push('\n');
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::new(text.lines().filter(|l| !l.trim().is_empty()).map(|l| l.trim().to_string()))
    }
}

pub fn tokenize(caption: &str) -> Vec<String> {
    caption.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Placement {
    shape: usize,
    color: usize,
    cx: f64,
    cy: f64,
    radius: f64,
}

fn inside(shape: &str, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        "diamond" => dx.abs() + dy.abs() <= r,
        "cross" => {
            let arm = r / 3.0;
            (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
        }
        "ring" => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        "triangle" => {
            // apex up; base at +0.8r
            let (top, base) = (-r, 0.8 * r);
            if dy < top || dy > base {
                return false;
            }
            let half_width = 0.95 * r * (dy - top) / (base - top);
            dx.abs() <= half_width
        }
        other => unreachable!("unvalidated shape {other}"),
    }
}

fn render(spec: &CorpusSpec, objects: &[Placement], background: usize) -> RgbImage {
    let size = spec.image_size;
    let mut img = RgbImage::from_pixel(size, size, Rgb(spec.backgrounds[background].rgb));
    for obj in objects {
        let rgb = Rgb(spec.colors[obj.color].rgb);
        let shape = spec.shapes[obj.shape].as_str();
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - obj.cx;
                let dy = y as f64 + 0.5 - obj.cy;
                if inside(shape, dx, dy, obj.radius) {
                    img.put_pixel(x, y, rgb);
                }
            }
        }
    }
    img
}

fn place_objects(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Vec<Placement> {
    let [lo, hi] = spec.objects_per_image;
    let count = rng.random_range(lo..=hi);
    let size = spec.image_size as f64;
    let (rmin, rmax) = if count == 1 { (0.28, 0.42) } else { (0.15, 0.22) };
    let mut placed: Vec<Placement> = Vec::with_capacity(count);
    for _ in 0..count {
        let shape = rng.random_range(0..spec.shapes.len());
        let color = rng.random_range(0..spec.colors.len());
        let radius = rng.random_range(rmin..rmax) * size;
        let mut candidate = Placement { shape, color, cx: size / 2.0, cy: size / 2.0, radius };
        for _ in 0..50 {
            candidate.cx = rng.random_range(radius..size - radius);
            candidate.cy = rng.random_range(radius..size - radius);
            let clear = placed.iter().all(|p| {
                let d = ((p.cx - candidate.cx).powi(2) + (p.cy - candidate.cy).powi(2)).sqrt();
                d >= p.radius + candidate.radius
            });
            if clear {
                break;
            }
        }
        placed.push(candidate);
    }
    placed
}

fn fill_template(template: &str, color: &str, shape: &str, background: &str) -> String {
    template
        .replace("{color}", color)
        .replace("{shape}", shape)
        .replace("{background}", background)
}

/// One record plus its raster; a pure function of `(spec, id)`.
fn synthesize(spec: &CorpusSpec, id: u64) -> (CaptionRecord, RgbImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(spec.seed ^ splitmix64(id)));
    let background = rng.random_range(0..spec.backgrounds.len());
    let objects = place_objects(spec, &mut rng);
    let bg_name = &spec.backgrounds[background].name;
    let clauses: Vec<String> = objects
        .iter()
        .map(|o| {
            let t = &spec.caption_templates[rng.random_range(0..spec.caption_templates.len())];
            fill_template(t, &spec.colors[o.color].name, &spec.shapes[o.shape], bg_name)
        })
        .collect();
    let caption = clauses.join(" and ");
    let category_ids: BTreeSet<usize> = objects.iter().map(|o| spec.category_id(o.shape, o.color)).collect();
    let record = CaptionRecord {
        id,
        image_path: format!("images/{id:05}.png"),
        tokens: tokenize(&caption),
        category_ids: category_ids.into_iter().collect(),
    };
    (record, render(spec, &objects, background))
}

/// Render the corpus described by `spec` into `out_dir`; returns the manifest path.
pub fn generate_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<PathBuf> {
    spec.validate()?;
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;

    let vocab = Vocabulary::new(spec.token_universe())?;
    let manifest_path = out_dir.join(MANIFEST_FILE);
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut writer = std::io::BufWriter::new(file);
    for id in 0..spec.num_images as u64 {
        let (record, img) = synthesize(spec, id);
        debug_assert!(vocab.encode(&record.tokens).is_ok());
        raster::save_png(&img, &out_dir.join(&record.image_path))?;
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(writer, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    writer.flush().map_err(|e| Error::io(&manifest_path, e))?;

    vocab.write(&out_dir.join(VOCAB_FILE))?;
    let spec_path = out_dir.join(SPEC_FILE);
    let spec_json = serde_json::to_string_pretty(spec).expect("spec serializes");
    fs::write(&spec_path, spec_json).map_err(|e| Error::io(&spec_path, e))?;
    Ok(manifest_path)
}

/// A loaded corpus: records, vocabulary and, when present, the generating spec.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub root: PathBuf,
    pub records: Vec<CaptionRecord>,
    pub vocab: Vocabulary,
    pub spec: Option<CorpusSpec>,
}

/// Parse a manifest and the vocabulary file next to it.
pub fn load_manifest(path: &Path) -> Result<Corpus> {
    let root = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let vocab = Vocabulary::read(&root.join(VOCAB_FILE))?;
    let spec_path = root.join(SPEC_FILE);
    let spec = if spec_path.exists() {
        let text = fs::read_to_string(&spec_path).map_err(|e| Error::io(&spec_path, e))?;
        Some(serde_json::from_str::<CorpusSpec>(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", spec_path.display())))?)
    } else {
        None
    };

    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CaptionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::ManifestLine { line: line_no, msg: e.to_string() })?;
        if record.tokens.is_empty() {
            return Err(Error::ManifestLine { line: line_no, msg: "empty token list".into() });
        }
        if record.category_ids.is_empty() {
            return Err(Error::ManifestLine { line: line_no, msg: "empty category set".into() });
        }
        if let Some(unknown) = record.tokens.iter().find(|t| vocab.index_of(t).is_none()) {
            return Err(Error::ManifestLine { line: line_no, msg: format!("token `{unknown}` is not in the vocabulary") });
        }
        if let Some(spec) = &spec {
            if let Some(&bad) = record.category_ids.iter().find(|&&c| c >= spec.num_categories()) {
                return Err(Error::ManifestLine {
                    line: line_no,
                    msg: format!("category {bad} out of range 0..{}", spec.num_categories()),
                });
            }
        }
        let image = root.join(&record.image_path);
        if !image.is_file() {
            return Err(Error::MissingImage { id: record.id, path: image });
        }
        records.push(record);
    }
    Ok(Corpus { root, records, vocab, spec })
}

/// Deterministic 80/20 split by hashed id.
pub fn is_test_id(id: u64) -> bool {
    splitmix64(id ^ 0x5eed_5eed) % 5 == 0
}

impl Corpus {
    pub fn num_categories(&self) -> usize {
        match &self.spec {
            Some(s) => s.num_categories(),
            None => self.records.iter().flat_map(|r| r.category_ids.iter()).max().map_or(0, |m| m + 1),
        }
    }

    pub fn image_size(&self) -> Result<u32> {
        match &self.spec {
            Some(s) => Ok(s.image_size),
            None => {
                let first = self.records.first().ok_or_else(|| Error::InvalidArgument("empty corpus".into()))?;
                Ok(raster::load_png(&self.root.join(&first.image_path))?.width())
            }
        }
    }

    /// Indices of `(train, test)` records.
    pub fn split(&self) -> (Vec<usize>, Vec<usize>) {
        let (test, train): (Vec<usize>, Vec<usize>) = (0..self.records.len()).partition(|&i| is_test_id(self.records[i].id));
        (train, test)
    }

    pub fn load_raster(&self, index: usize) -> Result<RgbImage> {
        raster::load_png(&self.root.join(&self.records[index].image_path))
    }

    /// Planar `[-1, 1]` pixels of record `index`.
    pub fn load_image(&self, index: usize) -> Result<Vec<f64>> {
        Ok(raster::to_planar(&self.load_raster(index)?))
    }

    pub fn token_ids(&self, index: usize) -> Result<Vec<usize>> {
        self.vocab.encode(&self.records[index].tokens)
    }

    pub fn spec(&self) -> Result<&CorpusSpec> {
        self.spec
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("corpus at {} has no {SPEC_FILE}", self.root.display())))
    }

    /// Distinct captions in first-seen order, plus the caption index of every record.
    pub fn distinct_captions(&self) -> (Vec<Vec<String>>, Vec<usize>) {
        let mut seen: HashMap<&[String], usize> = HashMap::new();
        let mut captions = Vec::new();
        let mut of_record = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let next = captions.len();
            let idx = *seen.entry(r.tokens.as_slice()).or_insert_with(|| {
                captions.push(r.tokens.clone());
                next
            });
            of_record.push(idx);
        }
        (captions, of_record)
    }
}

/// Palette index of the most frequent non-background color, assigning every
/// pixel to its nearest palette or background color. `None` when every pixel
/// is closest to the background.
pub fn dominant_color(planar: &[f64], palette: &[[u8; 3]], background: [u8; 3]) -> Option<usize> {
    let plane = planar.len() / 3;
    let to_unit = |c: u8| c as f64 / 127.5 - 1.0;
    let mut counts = vec![0usize; palette.len()];
    for i in 0..plane {
        let px = [planar[i], planar[plane + i], planar[2 * plane + i]];
        let dist = |rgb: [u8; 3]| (0..3).map(|c| (px[c] - to_unit(rgb[c])).powi(2)).sum::<f64>();
        let bg = dist(background);
        let (best, d) = palette
            .iter()
            .enumerate()
            .map(|(j, &rgb)| (j, dist(rgb)))
            .fold((usize::MAX, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        if best != usize::MAX && d < bg {
            counts[best] += 1;
        }
    }
    let (idx, &n) = counts.iter().enumerate().max_by_key(|&(j, &c)| (c, std::cmp::Reverse(j)))?;
    (n > 0).then_some(idx)
}

/// Background index named in a caption, if any.
pub fn caption_background(spec: &CorpusSpec, tokens: &[String]) -> Option<usize> {
    tokens.iter().find_map(|t| spec.backgrounds.iter().position(|b| &b.name == t))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(shapes: usize, colors: usize, n: usize) -> CorpusSpec {
        let base = CorpusSpec::default();
        let palette = [("red", [220, 40, 40]), ("blue", [40, 80, 230]), ("green", [40, 200, 60])];
        CorpusSpec {
            shapes: base.shapes[..shapes].to_vec(),
            colors: palette[..colors].iter().map(|(n, c)| NamedColor::new(n, *c)).collect(),
            num_images: n,
            image_size: 16,
            ..base
        }
    }

    #[test]
    fn single_category_degenerate_case() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = generate_corpus(&tiny(1, 1, 4), dir.path()).unwrap();
        let corpus = load_manifest(&manifest).unwrap();
        assert_eq!(corpus.records.len(), 4);
        assert!(corpus.records.iter().all(|r| r.category_ids == vec![0]));
    }

    #[test]
    fn category_grid_covers_shape_color_product() {
        let spec = tiny(4, 2, 200);
        let max = (0..200).map(|id| synthesize(&spec, id).0.category_ids[0]).max().unwrap();
        assert_eq!(max, 7);
    }

    #[test]
    fn empty_lists_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny(1, 1, 1);
        spec.shapes.clear();
        assert!(matches!(generate_corpus(&spec, dir.path()), Err(Error::InvalidSpec(_))));
        let mut spec = tiny(1, 1, 1);
        spec.colors.clear();
        assert!(matches!(generate_corpus(&spec, dir.path()), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn vocabulary_reserves_padding() {
        let v = Vocabulary::new(["a".to_string(), "b".to_string()]).unwrap();
        assert_eq!(v.index_of("a"), Some(1));
        assert_eq!(v.index_of(PAD_TOKEN), None);
        assert_eq!(v.token(0), Some(PAD_TOKEN));
        assert!(matches!(v.encode(&["c".to_string()]), Err(Error::UnknownToken(_))));
    }

    #[test]
    fn multi_object_captions_join_with_and() {
        let spec = CorpusSpec { objects_per_image: [2, 3], ..tiny(4, 2, 1) };
        for id in 0..30 {
            let (rec, _) = synthesize(&spec, id);
            assert!(rec.tokens.contains(&"and".to_string()), "{:?}", rec.tokens);
            assert!(!rec.category_ids.is_empty() && rec.category_ids.len() <= 3);
        }
    }
}

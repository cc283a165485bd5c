//! Captions, vocabularies, manifests, PPM images, caption filtering, the
//! synthetic shape corpus and epoch batching.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

pub const PAD: usize = 0;
pub const EOS: usize = 1;
pub const MASK: usize = 2;
/// First id assigned to a corpus word.
pub const FIRST_WORD: usize = 3;
const SPECIALS: [&str; 3] = ["<pad>", "<eos>", "<mask>"];

/// Lowercased words; any non-alphanumeric character separates words.
pub fn split_words(caption: &str) -> Vec<String> {
    caption
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "Vec<String>", try_from = "Vec<String>")]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.words
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(words: Vec<String>) -> Result<Self> {
        if words.len() < FIRST_WORD || words[..FIRST_WORD] != SPECIALS {
            return Err(Error::Data("vocabulary must start with <pad>, <eos>, <mask>".into()));
        }
        let index: HashMap<String, usize> = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != words.len() {
            return Err(Error::Data("vocabulary has duplicate words".into()));
        }
        Ok(Vocab { words, index })
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.len() == FIRST_WORD
    }

    /// Id of a corpus word; specials are not reachable by name.
    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied().filter(|&i| i >= FIRST_WORD)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Ids of the known words of a caption, without EOS or padding.
    pub fn encode_words(&self, caption: &str) -> Vec<usize> {
        split_words(caption).iter().filter_map(|w| self.id(w)).collect()
    }

    /// Space-joined words, skipping special ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i >= FIRST_WORD)
            .filter_map(|&i| self.word(i))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Words with at least `min_count` occurrences, ordered by descending count
/// then lexicographically.
pub fn build_vocab<'a>(captions: impl IntoIterator<Item = &'a str>, min_count: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for c in captions {
        for w in split_words(c) {
            *counts.entry(w).or_default() += 1;
        }
    }
    let mut entries: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(w, n)| *n >= min_count.max(1) && !SPECIALS.contains(&w.as_str()))
        .collect();
    entries.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let words: Vec<String> = SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(entries.into_iter().map(|(w, _)| w))
        .collect();
    Vocab::try_from(words).expect("specials first, words unique")
}

/// Word ids truncated to `max_len - 1`, then EOS, padded to `max_len`.
/// Returns the ids and the number of real tokens (EOS included).
pub fn pack(words: &[usize], max_len: usize) -> (Vec<usize>, usize) {
    let keep = words.len().min(max_len.saturating_sub(1));
    let mut ids = Vec::with_capacity(max_len);
    ids.extend_from_slice(&words[..keep]);
    ids.push(EOS);
    let len = ids.len();
    ids.resize(max_len, PAD);
    (ids, len)
}

pub fn tokenize(caption: &str, vocab: &Vocab, max_len: usize) -> Vec<usize> {
    pack(&vocab.encode_words(caption), max_len).0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropReason {
    DamagedImage,
    NoCaption,
    EnglishRatio,
    SinglePos,
}

impl fmt::Display for DropReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DropReason::DamagedImage => "damaged_image",
            DropReason::NoCaption => "no_caption",
            DropReason::EnglishRatio => "english_ratio",
            DropReason::SinglePos => "single_pos",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterDecision {
    Keep,
    Drop(DropReason),
}

/// Caption rules: non-empty, at least 80% known English words, and not
/// made entirely of one part of speech. Words missing from `tags` count as
/// a distinct tag.
pub fn filter_caption(caption: &str, english: &HashSet<String>, tags: &HashMap<String, String>) -> FilterDecision {
    let words = split_words(caption);
    if words.is_empty() {
        return FilterDecision::Drop(DropReason::NoCaption);
    }
    let known = words.iter().filter(|w| english.contains(*w)).count();
    if (known as f64) < 0.8 * words.len() as f64 {
        return FilterDecision::Drop(DropReason::EnglishRatio);
    }
    let first = tags.get(&words[0]);
    if first.is_some() && words.iter().all(|w| tags.get(w) == first) {
        return FilterDecision::Drop(DropReason::SinglePos);
    }
    FilterDecision::Keep
}

/// One image-caption pair in memory. Images are `[C × H × W]` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub caption: String,
    pub label: Option<usize>,
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixels: Option<Vec<Vec<Vec<f32>>>>,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

fn ppm_token(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Data("malformed PPM header".into()))
}

/// Decodes binary 8-bit PPM (P6) into `[3 × H × W]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor<f32>> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(Error::Data("not a P6 PPM".into()));
    }
    let mut pos = 2;
    let w = ppm_token(bytes, &mut pos)?;
    let h = ppm_token(bytes, &mut pos)?;
    let max = ppm_token(bytes, &mut pos)?;
    if max != 255 || w == 0 || h == 0 {
        return Err(Error::Data(format!("unsupported PPM {w}x{h} max {max}")));
    }
    pos += 1;
    let body = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| Error::Data("truncated PPM data".into()))?;
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in body.chunks(3).enumerate() {
        for k in 0..3 {
            data[k * w * h + i] = px[k] as f32 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn encode_ppm(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("expected [3, H, W], got {:?}", image.shape())));
    };
    if c != 3 {
        return Err(Error::Shape(format!("PPM needs 3 channels, got {c}")));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    for i in 0..h * w {
        for k in 0..3 {
            out.push((d[k * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

fn pixels_to_tensor(p: &[Vec<Vec<f32>>]) -> Result<Tensor<f32>> {
    let c = p.len();
    let h = p.first().map_or(0, Vec::len);
    let w = p.first().and_then(|r| r.first()).map_or(0, Vec::len);
    if c == 0 || h == 0 || w == 0 || p.iter().any(|ch| ch.len() != h || ch.iter().any(|r| r.len() != w)) {
        return Err(Error::Data("ragged or empty pixel array".into()));
    }
    let data: Vec<f32> = p.iter().flatten().flatten().copied().collect();
    if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data("pixel outside [0, 1]".into()));
    }
    Tensor::new(vec![c, h, w], data)
}

pub fn tensor_to_pixels(t: &Tensor<f32>) -> Vec<Vec<Vec<f32>>> {
    let s = t.shape();
    let (h, w) = (s[1], s[2]);
    t.data()
        .chunks(h * w)
        .map(|plane| plane.chunks(w).map(<[f32]>::to_vec).collect())
        .collect()
}

/// Filters applied while loading a manifest. Caption rules are skipped
/// when `english` is `None`.
#[derive(Debug, Clone, Default)]
pub struct CaptionRules {
    pub english: Option<HashSet<String>>,
    pub tags: HashMap<String, String>,
}

#[derive(Debug, Clone, Default)]
pub struct LoadReport {
    pub kept: usize,
    pub dropped: BTreeMap<DropReason, usize>,
}

/// Reads a manifest, decoding images relative to its directory. Records
/// whose image fails to decode or has the wrong size are dropped as damaged.
pub fn load_samples(
    path: &Path,
    image_size: usize,
    channels: usize,
    rules: &CaptionRules,
) -> Result<(Vec<Sample>, LoadReport)> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let mut report = LoadReport::default();
    let mut out = Vec::new();
    for rec in read_manifest(path)? {
        let image = match (&rec.pixels, &rec.image_path) {
            (Some(p), _) => pixels_to_tensor(p),
            (None, Some(rel)) => fs::read(base.join(rel)).map_err(Error::from).and_then(|b| decode_ppm(&b)),
            (None, None) => Err(Error::Data("record has no image".into())),
        };
        let image = match image {
            Ok(t) if t.shape() == [channels, image_size, image_size] => t,
            _ => {
                *report.dropped.entry(DropReason::DamagedImage).or_default() += 1;
                continue;
            }
        };
        if let Some(english) = &rules.english {
            if let FilterDecision::Drop(r) = filter_caption(&rec.caption, english, &rules.tags) {
                *report.dropped.entry(r).or_default() += 1;
                continue;
            }
        } else if split_words(&rec.caption).is_empty() {
            *report.dropped.entry(DropReason::NoCaption).or_default() += 1;
            continue;
        }
        out.push(Sample {
            image,
            caption: rec.caption,
            label: rec.label,
        });
    }
    report.kept = out.len();
    Ok((out, report))
}

/// `word<TAB>a,b,c` lines.
pub fn read_lexicon(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
        let (word, syns) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("lexicon line without tab: {line:?}")))?;
        let syns: Vec<String> = syns.split(',').map(|s| s.trim().to_lowercase()).filter(|s| !s.is_empty()).collect();
        out.insert(word.trim().to_lowercase(), syns);
    }
    Ok(out)
}

pub fn write_lexicon(path: &Path, lex: &BTreeMap<String, Vec<String>>) -> Result<()> {
    let body: String = lex.iter().map(|(w, s)| format!("{w}\t{}\n", s.join(","))).collect();
    fs::write(path, body)?;
    Ok(())
}

/// `word<TAB>tag` lines.
pub fn read_tags(path: &Path) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for line in fs::read_to_string(path)?.lines().filter(|l| !l.trim().is_empty()) {
        let (w, t) = line
            .split_once('\t')
            .ok_or_else(|| Error::Data(format!("tag line without tab: {line:?}")))?;
        out.insert(w.trim().to_lowercase(), t.trim().to_string());
    }
    Ok(out)
}

/// Non-empty lines of a text file.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Word lexicon restricted to the vocabulary, as ids.
pub fn lexicon_ids(lex: &BTreeMap<String, Vec<String>>, vocab: &Vocab) -> crate::augment::Lexicon {
    let mut out = crate::augment::Lexicon::new();
    for (w, syns) in lex {
        let Some(id) = vocab.id(w) else { continue };
        let ids: Vec<usize> = syns.iter().filter_map(|s| vocab.id(s)).filter(|&s| s != id).collect();
        if !ids.is_empty() {
            out.insert(id, ids);
        }
    }
    out
}

/// Shuffled index batches for one epoch; the final partial batch is dropped.
pub fn make_batches(n: usize, batch_size: usize, epoch: u64, seed: u64) -> Vec<Vec<usize>> {
    if batch_size == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch.wrapping_add(1) << 40);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

/// Synthetic corpus description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub concepts: usize,
    pub paraphrases_per_concept: usize,
    pub pairs_per_concept: usize,
    /// Labeled held-out images per concept.
    pub eval_per_concept: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            concepts: 8,
            paraphrases_per_concept: 4,
            pairs_per_concept: 250,
            eval_per_concept: 50,
            image_size: 32,
            noise_std: 0.05,
            seed: 0,
        }
    }
}

const COLORS: [(&str, [f32; 3], [&str; 2]); 4] = [
    ("red", [0.9, 0.12, 0.1], ["crimson", "scarlet"]),
    ("green", [0.12, 0.75, 0.15], ["emerald", "lime"]),
    ("blue", [0.12, 0.25, 0.9], ["azure", "navy"]),
    ("yellow", [0.92, 0.85, 0.1], ["golden", "amber"]),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

const SHAPES: [(&str, Shape, [&str; 2]); 4] = [
    ("circle", Shape::Circle, ["disc", "round"]),
    ("square", Shape::Square, ["box", "block"]),
    ("triangle", Shape::Triangle, ["wedge", "pyramid"]),
    ("cross", Shape::Cross, ["plus", "x"]),
];

/// Caption templates; `{c}` and `{s}` take a color and a shape word.
const TEMPLATES: [&str; 4] = ["a {c} {s}", "the {c} {s} shape", "a photo of a {c} {s}", "a picture of the {c} {s}"];

const FUNCTION_TAGS: [(&str, &str); 6] = [
    ("a", "det"),
    ("the", "det"),
    ("of", "prep"),
    ("shape", "noun"),
    ("photo", "noun"),
    ("picture", "noun"),
];

/// Generated corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthData {
    pub train: Vec<Sample>,
    pub eval: Vec<Sample>,
    pub label_names: Vec<String>,
    /// Zero-shot prompt templates with a `{label}` placeholder.
    pub prompts: Vec<String>,
    pub lexicon: BTreeMap<String, Vec<String>>,
    pub tags: BTreeMap<String, String>,
    pub words: Vec<String>,
}

fn concept(k: usize) -> (usize, usize) {
    (k % 4, (k + k / 4) % 4)
}

fn fill(template: &str, c: &str, s: &str) -> String {
    template.replace("{c}", c).replace("{s}", s)
}

fn inside(shape: Shape, dx: f32, dy: f32, r: f32) -> bool {
    match shape {
        Shape::Circle => dx * dx + dy * dy <= r * r,
        Shape::Square => dx.abs() <= 0.85 * r && dy.abs() <= 0.85 * r,
        Shape::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        Shape::Cross => (dx.abs() <= r / 3.0 && dy.abs() <= r) || (dy.abs() <= r / 3.0 && dx.abs() <= r),
    }
}

fn render(shape: Shape, rgb: [f32; 3], size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let s = size as f32;
    let r = rng.gen_range(0.26 * s..0.30 * s);
    let cx = rng.gen_range(r..s - r);
    let cy = rng.gen_range(r..s - r);
    let bg = rng.gen_range(0.15f32..0.45);
    let tint: Vec<f32> = rgb.iter().map(|&v| (v + rng.gen_range(-0.05f32..0.05)).clamp(0.0, 1.0)).collect();
    let normal = |rng: &mut ChaCha8Rng| -> f32 {
        // Box-Muller.
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
    };
    let hw = size * size;
    let mut data = vec![0.0f32; 3 * hw];
    for y in 0..size {
        for x in 0..size {
            let on = inside(shape, x as f32 + 0.5 - cx, y as f32 + 0.5 - cy, r);
            for k in 0..3 {
                let base = if on { tint[k] } else { bg };
                let v = base + noise as f32 * normal(rng);
                data[k * hw + y * size + x] = (v.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    Tensor::new(vec![3, size, size], data).expect("consistent image")
}

/// Renders colored shapes with paraphrased captions. Concept `k` pairs
/// color `k mod 4` with shape `(k + k/4) mod 4`, so neither attribute alone
/// identifies a concept. Pixel values are multiples of 1/255, so a PPM
/// round trip is exact.
pub fn synth_generate(spec: &SynthSpec) -> Result<SynthData> {
    if spec.concepts == 0 || spec.concepts > 16 {
        return Err(Error::Config(format!("concepts {} must be in 1..=16", spec.concepts)));
    }
    if spec.paraphrases_per_concept == 0 || spec.image_size < 8 {
        return Err(Error::Config("need at least one paraphrase and image_size >= 8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let colors: Vec<Vec<&str>> = COLORS.iter().map(|(n, _, s)| std::iter::once(*n).chain(*s).collect()).collect();
    let shapes: Vec<Vec<&str>> = SHAPES.iter().map(|(n, _, s)| std::iter::once(*n).chain(*s).collect()).collect();
    let paraphrases: Vec<Vec<String>> = (0..spec.concepts)
        .map(|k| {
            let (ci, si) = concept(k);
            (0..spec.paraphrases_per_concept)
                .map(|j| {
                    let c = colors[ci][j % 3];
                    let s = shapes[si][(j / 3 + j) % 3];
                    fill(TEMPLATES[j % TEMPLATES.len()], c, s)
                })
                .collect()
        })
        .collect();
    let label_names: Vec<String> = (0..spec.concepts)
        .map(|k| {
            let (ci, si) = concept(k);
            format!("{} {}", COLORS[ci].0, SHAPES[si].0)
        })
        .collect();

    let make = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        (0..count * spec.concepts)
            .map(|i| {
                let k = i % spec.concepts;
                let (ci, si) = concept(k);
                let caption = paraphrases[k][rng.gen_range(0..paraphrases[k].len())].clone();
                Sample {
                    image: render(SHAPES[si].1, COLORS[ci].1, spec.image_size, spec.noise_std, rng),
                    caption,
                    label: Some(k),
                }
            })
            .collect()
    };
    let train = make(spec.pairs_per_concept, &mut rng);
    let eval = make(spec.eval_per_concept, &mut rng);

    let mut lexicon = BTreeMap::new();
    for group in colors.iter().chain(&shapes) {
        for &w in group {
            lexicon.insert(w.to_string(), group.iter().filter(|&&o| o != w).map(|s| s.to_string()).collect());
        }
    }
    let mut tags: BTreeMap<String, String> = FUNCTION_TAGS.iter().map(|(w, t)| (w.to_string(), t.to_string())).collect();
    for group in &colors {
        for &w in group {
            tags.insert(w.to_string(), "adj".into());
        }
    }
    for group in &shapes {
        for &w in group {
            tags.insert(w.to_string(), "noun".into());
        }
    }
    let words: Vec<String> = tags.keys().cloned().collect();
    let mut prompts = vec!["a photo of a {label}".to_string()];
    for t in ["a {label}", "the {label} shape", "a picture of the {label}"] {
        prompts.push(t.to_string());
    }
    Ok(SynthData {
        train,
        eval,
        label_names,
        prompts,
        lexicon,
        tags,
        words,
    })
}

impl SynthData {
    /// Writes `train.jsonl`, `eval.jsonl`, PPM images under `images/`,
    /// `lexicon.tsv`, `tags.tsv`, `words.txt`, `labels.txt` and `prompts.txt`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        for (name, samples) in [("train", &self.train), ("eval", &self.eval)] {
            let mut records = Vec::with_capacity(samples.len());
            for (i, s) in samples.iter().enumerate() {
                let rel = format!("images/{name}_{i:05}.ppm");
                fs::write(dir.join(&rel), encode_ppm(&s.image)?)?;
                records.push(ManifestRecord {
                    image_path: Some(rel),
                    pixels: None,
                    caption: s.caption.clone(),
                    label: s.label,
                });
            }
            write_manifest(&dir.join(format!("{name}.jsonl")), &records)?;
        }
        write_lexicon(&dir.join("lexicon.tsv"), &self.lexicon)?;
        let tags: String = self.tags.iter().map(|(w, t)| format!("{w}\t{t}\n")).collect();
        fs::write(dir.join("tags.tsv"), tags)?;
        fs::write(dir.join("words.txt"), self.words.join("\n") + "\n")?;
        fs::write(dir.join("labels.txt"), self.label_names.join("\n") + "\n")?;
        fs::write(dir.join("prompts.txt"), self.prompts.join("\n") + "\n")?;
        Ok(())
    }

    pub fn english(&self) -> HashSet<String> {
        self.words.iter().cloned().collect()
    }

    pub fn tag_map(&self) -> HashMap<String, String> {
        self.tags.iter().map(|(w, t)| (w.clone(), t.clone())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_lowercases_and_breaks_on_punctuation() {
        assert_eq!(split_words("A red-Circle, twice!"), vec!["a", "red", "circle", "twice"]);
    }

    #[test]
    fn pack_truncates_and_pads() {
        assert_eq!(pack(&[5, 6, 7], 3), (vec![5, 6, EOS], 3));
        assert_eq!(pack(&[5], 4), (vec![5, EOS, PAD, PAD], 2));
        assert_eq!(pack(&[], 2), (vec![EOS, PAD], 1));
    }

    #[test]
    fn concepts_are_interleaved() {
        let pairs: Vec<_> = (0..8).map(concept).collect();
        let unique: HashSet<_> = pairs.iter().collect();
        assert_eq!(unique.len(), 8);
        for c in 0..4 {
            assert_eq!(pairs.iter().filter(|p| p.0 == c).count(), 2);
            assert_eq!(pairs.iter().filter(|p| p.1 == c).count(), 2);
        }
    }
}

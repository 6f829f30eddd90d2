//! Synthetic grid-world benchmark: query-dependent VQA over rendered color
//! and glyph grids, plus template-instructed captioning with multi-hot
//! color-presence targets. Every sample's answer is recomputable from its
//! rendered image and question by an exact rule-based oracle.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::question::{tokenize, QuestionTokens, Vocab};
use crate::tensor::{Element, Tensor};

/// Fixed instruction templates for the captioning task, sampled uniformly.
pub const CAPTION_TEMPLATES: [&str; 13] = [
    "A short image caption:",
    "A short image description:",
    "A photo of",
    "An image that shows",
    "Write a short description for the image.",
    "Write a description for the photo.",
    "Provide a description of what is presented in the photo.",
    "Briefly describe the content of the image.",
    "Can you briefly explain what you see in the image?",
    "Could you use a few words to describe what you perceive in the photo?",
    "Please provide a short depiction of the picture.",
    "Using language, provide a short account of the image.",
    "Use a few words to illustrate what is happening in the picture.",
];

/// Tokens of the fixed learned prompt used by the prompt-tuning control.
pub const PROMPT_TOKENS: [&str; 4] = ["p0", "p1", "p2", "p3"];

/// Up to eight maximally separated RGB colors (the cube corners).
pub const PALETTE: [[f64; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [1.0, 1.0, 1.0],
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct GridWorldSpec {
    #[serde(default = "default_grid")]
    pub grid_size: usize,
    #[serde(default = "default_colors")]
    pub color_count: usize,
    #[serde(default = "default_glyphs")]
    pub glyph_count: usize,
    #[serde(default = "default_image")]
    pub image_size: usize,
}

fn default_grid() -> usize {
    4
}
fn default_colors() -> usize {
    8
}
fn default_glyphs() -> usize {
    4
}
fn default_image() -> usize {
    32
}

impl Default for GridWorldSpec {
    fn default() -> Self {
        GridWorldSpec { grid_size: 4, color_count: 8, glyph_count: 4, image_size: 32 }
    }
}

impl GridWorldSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size == 0 || self.image_size % self.grid_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by grid_size {}",
                self.image_size, self.grid_size
            )));
        }
        if self.block() < 8 {
            return Err(Error::Config(format!(
                "cell block {} too small to draw distinguishable glyphs (need >= 8)",
                self.block()
            )));
        }
        if !(2..=PALETTE.len()).contains(&self.color_count) {
            return Err(Error::Config(format!("color_count must be in 2..={}", PALETTE.len())));
        }
        if !(1..=4).contains(&self.glyph_count) {
            return Err(Error::Config("glyph_count must be in 1..=4".into()));
        }
        Ok(())
    }

    /// Lookup question forms need balanced grids, so the class counts must
    /// divide the cell count.
    pub fn validate_balanced(&self) -> Result<()> {
        if self.cells() % self.color_count != 0 || self.cells() % self.glyph_count != 0 {
            return Err(Error::Config(format!(
                "balanced grids need color_count {} and glyph_count {} to divide {} cells",
                self.color_count,
                self.glyph_count,
                self.cells()
            )));
        }
        Ok(())
    }

    /// Pixels per grid cell.
    pub fn block(&self) -> usize {
        self.image_size / self.grid_size
    }

    pub fn cells(&self) -> usize {
        self.grid_size * self.grid_size
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Hash)]
#[serde(rename_all = "snake_case")]
pub enum QuestionForm {
    ColorAt,
    GlyphAt,
    CountColor,
}

impl QuestionForm {
    pub fn as_str(self) -> &'static str {
        match self {
            QuestionForm::ColorAt => "color_at",
            QuestionForm::GlyphAt => "glyph_at",
            QuestionForm::CountColor => "count_color",
        }
    }
}

/// Absolute answer-class layout over the enabled question forms, in the
/// fixed order color_at, glyph_at, count_color.
#[derive(Debug, Clone)]
pub struct AnswerSpace {
    forms: Vec<(QuestionForm, usize, usize)>, // (form, offset, class_count)
    total: usize,
}

impl AnswerSpace {
    pub fn new(forms: &[QuestionForm], spec: &GridWorldSpec) -> Self {
        let order = [QuestionForm::ColorAt, QuestionForm::GlyphAt, QuestionForm::CountColor];
        let mut out = Vec::new();
        let mut offset = 0;
        for f in order {
            if forms.contains(&f) {
                let count = match f {
                    QuestionForm::ColorAt => spec.color_count,
                    QuestionForm::GlyphAt => spec.glyph_count,
                    QuestionForm::CountColor => spec.cells() + 1,
                };
                out.push((f, offset, count));
                offset += count;
            }
        }
        AnswerSpace { forms: out, total: offset }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn offset(&self, form: QuestionForm) -> Option<usize> {
        self.forms.iter().find(|(f, _, _)| *f == form).map(|(_, o, _)| *o)
    }

    pub fn class_count(&self, form: QuestionForm) -> Option<usize> {
        self.forms.iter().find(|(f, _, _)| *f == form).map(|(_, _, c)| *c)
    }

    pub fn label(&self, form: QuestionForm, raw: usize) -> usize {
        self.offset(form).expect("form enabled") + raw
    }
}

/// Sampled cell contents in raster order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridCells {
    pub colors: Vec<u8>,
    pub glyphs: Vec<u8>,
}

pub struct QASample<T: Element> {
    pub image: Tensor<T>,
    pub question: QuestionTokens,
    pub question_text: String,
    pub answer_id: usize,
    pub form: QuestionForm,
}

pub struct CaptionSample<T: Element> {
    pub image: Tensor<T>,
    pub instruction: QuestionTokens,
    pub instruction_text: String,
    /// Multi-hot color presence, length `color_count`.
    pub target: Vec<bool>,
}

/// Deterministic vocabulary for a grid spec: question-form words,
/// coordinate tokens, color tokens, prompt-tuning tokens, then the caption
/// template words in listed order.
pub fn build_vocab(spec: &GridWorldSpec) -> Vocab {
    let mut tokens: Vec<String> = vec!["color".into(), "glyph".into(), "count".into(), "at".into()];
    for r in 0..spec.grid_size {
        tokens.push(format!("r{}", r));
    }
    for c in 0..spec.grid_size {
        tokens.push(format!("c{}", c));
    }
    for k in 0..spec.color_count {
        tokens.push(format!("k{}", k));
    }
    for p in PROMPT_TOKENS {
        tokens.push(p.to_string());
    }
    for template in CAPTION_TEMPLATES {
        tokens.extend(crate::question::split_words(template));
    }
    Vocab::from_tokens(tokens)
}

pub fn fixed_prompt(vocab: &Vocab, k_max: usize) -> QuestionTokens {
    tokenize(&PROMPT_TOKENS.join(" "), vocab, k_max)
}

/// Glyph pixel mask on a `block × block` cell. All patterns are 2 px wide
/// and keep a 1 px clear border so cell corners always show the base color.
pub fn glyph_mask(glyph: u8, block: usize) -> Vec<bool> {
    let b = block;
    let mut mask = vec![false; b * b];
    let mid = b / 2;
    let mut set = |y: usize, x: usize| mask[y * b + x] = true;
    match glyph {
        0 => {
            // horizontal bar
            for y in [mid - 1, mid] {
                for x in 1..b - 1 {
                    set(y, x);
                }
            }
        }
        1 => {
            // vertical bar
            for x in [mid - 1, mid] {
                for y in 1..b - 1 {
                    set(y, x);
                }
            }
        }
        2 => {
            // cross
            for y in [mid - 1, mid] {
                for x in 1..b - 1 {
                    set(y, x);
                }
            }
            for x in [mid - 1, mid] {
                for y in 1..b - 1 {
                    set(y, x);
                }
            }
        }
        3 => {
            // box outline
            for t in [1, 2, b - 3, b - 2] {
                for x in 1..b - 1 {
                    set(t, x);
                }
                for y in 1..b - 1 {
                    set(y, t);
                }
            }
        }
        _ => unreachable!("glyph id out of range"),
    }
    mask
}

/// Paint each cell as a solid palette block and draw its glyph in the
/// channel-inverted shade. Pixel values are exactly 0.0 or 1.0.
pub fn render<T: Element>(cells: &GridCells, spec: &GridWorldSpec) -> Tensor<T> {
    let s = spec.image_size;
    let b = spec.block();
    let g = spec.grid_size;
    let mut img = vec![T::zero(); 3 * s * s];
    for row in 0..g {
        for col in 0..g {
            let idx = row * g + col;
            let color = PALETTE[cells.colors[idx] as usize];
            let mask = glyph_mask(cells.glyphs[idx], b);
            for py in 0..b {
                for px in 0..b {
                    let y = row * b + py;
                    let x = col * b + px;
                    let inverted = mask[py * b + px];
                    for (ch, &base) in color.iter().enumerate() {
                        let v = if inverted { 1.0 - base } else { base };
                        img[ch * s * s + y * s + x] = T::from_f64(v);
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[3, s, s], img).expect("render shape")
}

/// Independent uniform cells; used for counting questions and captions,
/// whose targets must stay image-informative.
pub fn gen_cells(spec: &GridWorldSpec, rng: &mut ChaCha8Rng) -> GridCells {
    let n = spec.cells();
    GridCells {
        colors: (0..n).map(|_| rng.gen_range(0..spec.color_count) as u8).collect(),
        glyphs: (0..n).map(|_| rng.gen_range(0..spec.glyph_count) as u8).collect(),
    }
}

fn shuffled_multiset(classes: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    debug_assert_eq!(cells % classes, 0);
    let mut v: Vec<u8> = (0..cells).map(|i| (i % classes) as u8).collect();
    for i in (1..cells).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
    v
}

/// Balanced cells: every color and glyph appears exactly `cells/classes`
/// times, uniformly shuffled. With the answer cell drawn uniformly, the
/// answer of a lookup question is then exactly uniform *given the image*,
/// which is what makes the question-blind baseline provably chance-level
/// (no image-only strategy, e.g. majority color, can beat 1/classes).
pub fn gen_cells_balanced(spec: &GridWorldSpec, rng: &mut ChaCha8Rng) -> GridCells {
    GridCells {
        colors: shuffled_multiset(spec.color_count, spec.cells(), rng),
        glyphs: shuffled_multiset(spec.glyph_count, spec.cells(), rng),
    }
}

/// One QA sample: uniform cells, uniform question form among those enabled,
/// uniform target cell/color, rendered image, ground-truth answer.
pub fn gen_qa_sample<T: Element>(
    spec: &GridWorldSpec,
    forms: &[QuestionForm],
    space: &AnswerSpace,
    vocab: &Vocab,
    k_max: usize,
    rng: &mut ChaCha8Rng,
) -> QASample<T> {
    assert!(!forms.is_empty(), "at least one question form required");
    let form = forms[rng.gen_range(0..forms.len())];
    // Lookup questions use balanced grids (chance-level blind baseline);
    // counting questions need the iid distribution that makes counts vary.
    let cells = match form {
        QuestionForm::ColorAt | QuestionForm::GlyphAt => gen_cells_balanced(spec, rng),
        QuestionForm::CountColor => gen_cells(spec, rng),
    };
    let g = spec.grid_size;
    let (text, raw_answer) = match form {
        QuestionForm::ColorAt => {
            let (r, c) = (rng.gen_range(0..g), rng.gen_range(0..g));
            (format!("color at r{} c{}", r, c), cells.colors[r * g + c] as usize)
        }
        QuestionForm::GlyphAt => {
            let (r, c) = (rng.gen_range(0..g), rng.gen_range(0..g));
            (format!("glyph at r{} c{}", r, c), cells.glyphs[r * g + c] as usize)
        }
        QuestionForm::CountColor => {
            let k = rng.gen_range(0..spec.color_count);
            let count = cells.colors.iter().filter(|&&c| c as usize == k).count();
            (format!("count color k{}", k), count)
        }
    };
    QASample {
        image: render(&cells, spec),
        question: tokenize(&text, vocab, k_max),
        question_text: text,
        answer_id: space.label(form, raw_answer),
        form,
    }
}

/// One caption sample: uniform template instruction, exact color-presence
/// multi-hot target.
pub fn gen_caption_sample<T: Element>(
    spec: &GridWorldSpec,
    vocab: &Vocab,
    k_max: usize,
    rng: &mut ChaCha8Rng,
) -> CaptionSample<T> {
    let cells = gen_cells(spec, rng);
    let template = CAPTION_TEMPLATES[rng.gen_range(0..CAPTION_TEMPLATES.len())];
    let mut target = vec![false; spec.color_count];
    for &c in &cells.colors {
        target[c as usize] = true;
    }
    CaptionSample {
        image: render(&cells, spec),
        instruction: tokenize(template, vocab, k_max),
        instruction_text: template.to_string(),
        target,
    }
}

/// Recover cell contents from a rendered image by exact pixel matching.
pub fn read_cells<T: Element>(image: &Tensor<T>, spec: &GridWorldSpec) -> Result<GridCells> {
    let s = spec.image_size;
    let b = spec.block();
    let g = spec.grid_size;
    let data = image.data();
    let mut colors = Vec::with_capacity(g * g);
    let mut glyphs = Vec::with_capacity(g * g);
    for row in 0..g {
        for col in 0..g {
            // Corner pixel is never part of a glyph.
            let (y0, x0) = (row * b, col * b);
            let px = |ch: usize, y: usize, x: usize| data[ch * s * s + y * s + x].to_f64();
            let corner = [px(0, y0, x0), px(1, y0, x0), px(2, y0, x0)];
            let color = PALETTE
                .iter()
                .take(spec.color_count)
                .position(|p| *p == corner)
                .ok_or_else(|| Error::Config("pixel does not match any palette color".into()))?;
            let mut found = None;
            'glyph: for cand in 0..spec.glyph_count as u8 {
                let mask = glyph_mask(cand, b);
                for py in 0..b {
                    for px_i in 0..b {
                        let expect_inverted = mask[py * b + px_i];
                        for (ch, &base) in PALETTE[color].iter().enumerate() {
                            let want = if expect_inverted { 1.0 - base } else { base };
                            if px(ch, y0 + py, x0 + px_i) != want {
                                continue 'glyph;
                            }
                        }
                    }
                }
                found = Some(cand);
                break;
            }
            let glyph = found.ok_or_else(|| Error::Config("cell matches no glyph pattern".into()))?;
            colors.push(color as u8);
            glyphs.push(glyph);
        }
    }
    Ok(GridCells { colors, glyphs })
}

/// Rule-based answer oracle: parse the question text, read the cells back
/// from the image, and compute the answer exactly.
pub fn oracle_answer<T: Element>(
    image: &Tensor<T>,
    question_text: &str,
    spec: &GridWorldSpec,
    space: &AnswerSpace,
) -> Result<usize> {
    let words = crate::question::split_words(question_text);
    let cells = read_cells(image, spec)?;
    let g = spec.grid_size;
    let parse_coord = |w: &str, prefix: char| -> Option<usize> {
        w.strip_prefix(prefix).and_then(|n| n.parse::<usize>().ok()).filter(|&n| n < g)
    };
    match words.as_slice() {
        [kind, at, r, c] if at == "at" && (kind == "color" || kind == "glyph") => {
            let (r, c) = (
                parse_coord(r, 'r').ok_or_else(|| Error::Config("bad row token".into()))?,
                parse_coord(c, 'c').ok_or_else(|| Error::Config("bad col token".into()))?,
            );
            if kind == "color" {
                Ok(space.label(QuestionForm::ColorAt, cells.colors[r * g + c] as usize))
            } else {
                Ok(space.label(QuestionForm::GlyphAt, cells.glyphs[r * g + c] as usize))
            }
        }
        [count, color, k] if count == "count" && color == "color" => {
            let k: usize = k
                .strip_prefix('k')
                .and_then(|n| n.parse().ok())
                .ok_or_else(|| Error::Config("bad color token".into()))?;
            let n = cells.colors.iter().filter(|&&c| c as usize == k).count();
            Ok(space.label(QuestionForm::CountColor, n))
        }
        _ => Err(Error::Config(format!("unrecognized question `{}`", question_text))),
    }
}

/// Accuracy of the best constant guess on a task whose answers follow the
/// generator's marginal distribution.
pub fn chance_accuracy(form: QuestionForm, spec: &GridWorldSpec) -> f64 {
    match form {
        QuestionForm::ColorAt => 1.0 / spec.color_count as f64,
        QuestionForm::GlyphAt => 1.0 / spec.glyph_count as f64,
        QuestionForm::CountColor => {
            // Count of a fixed color over G² iid uniform cells is binomial;
            // the best constant guess hits with probability max_k pmf(k).
            let n = spec.cells();
            let p = 1.0 / spec.color_count as f64;
            let mut pmf = (1.0 - p).powi(n as i32);
            let mut best = pmf;
            for k in 0..n {
                // pmf(k+1) = pmf(k) * (n-k)/(k+1) * p/(1-p)
                pmf *= (n - k) as f64 / (k + 1) as f64 * p / (1.0 - p);
                if pmf > best {
                    best = pmf;
                }
            }
            best
        }
    }
}

/// Seed-range partition tags keeping train and eval streams disjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    TrainQa,
    TrainCaption,
    EvalQa,
    EvalCaption,
    /// Per-step mixture draw stream.
    Mixture,
    /// Per-step dropout stream.
    Dropout,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::TrainQa => 1,
            Split::TrainCaption => 2,
            Split::EvalQa => 3,
            Split::EvalCaption => 4,
            Split::Mixture => 5,
            Split::Dropout => 6,
        }
    }
}

/// Independent RNG stream for one sample of one split.
pub fn sample_rng(seed: u64, split: Split, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[0..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&split.tag().to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Record-framed binary dataset dump: u32 LE record length, then image
/// f32 LE raster, u16 LE token count, u16 LE token ids, u16 LE answer id
/// (the multi-hot bitmask for caption records).
pub fn write_record<T: Element, W: Write>(
    out: &mut W,
    image: &Tensor<T>,
    tokens: &QuestionTokens,
    answer: u16,
) -> Result<()> {
    let img = image.data();
    let len = 4 * img.len() + 2 + 2 * tokens.len() + 2;
    out.write_all(&(len as u32).to_le_bytes())?;
    for &v in img.iter() {
        out.write_all(&(v.to_f64() as f32).to_le_bytes())?;
    }
    out.write_all(&(tokens.len() as u16).to_le_bytes())?;
    for &id in &tokens.ids {
        out.write_all(&(id as u16).to_le_bytes())?;
    }
    out.write_all(&answer.to_le_bytes())?;
    Ok(())
}

/// Parse one dump record given the image raster length (3·S²); returns
/// `None` at end of stream.
pub fn read_record<R: Read>(input: &mut R, image_numel: usize) -> Result<Option<(Vec<f32>, Vec<u16>, u16)>> {
    let mut len_buf = [0u8; 4];
    match input.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let len = u32::from_le_bytes(len_buf) as usize;
    let mut payload = vec![0u8; len];
    input.read_exact(&mut payload)?;
    let img_bytes = 4 * image_numel;
    if len < img_bytes + 4 {
        return Err(Error::Integrity("dataset record too short".into()));
    }
    let image: Vec<f32> = payload[..img_bytes]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let k = u16::from_le_bytes([payload[img_bytes], payload[img_bytes + 1]]) as usize;
    if len != img_bytes + 2 + 2 * k + 2 {
        return Err(Error::Integrity("dataset record framing invalid".into()));
    }
    let ids: Vec<u16> = payload[img_bytes + 2..img_bytes + 2 + 2 * k]
        .chunks_exact(2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .collect();
    let answer = u16::from_le_bytes([payload[len - 2], payload[len - 1]]);
    Ok(Some((image, ids, answer)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> GridWorldSpec {
        GridWorldSpec::default()
    }

    #[test]
    fn spec_validation() {
        assert!(spec().validate().is_ok());
        let bad = GridWorldSpec { grid_size: 5, ..spec() };
        assert!(bad.validate().is_err());
        let tiny = GridWorldSpec { grid_size: 8, image_size: 32, ..spec() };
        assert!(tiny.validate().is_err());
    }

    #[test]
    fn render_single_white_cell() {
        let s = GridWorldSpec { grid_size: 1, color_count: 2, glyph_count: 1, image_size: 8 };
        let cells = GridCells { colors: vec![1], glyphs: vec![0] };
        let img: Tensor<f64> = render(&cells, &s);
        // Corner pixels (outside the glyph) are exactly white.
        let d = img.data();
        for ch in 0..3 {
            assert_eq!(d[ch * 64], 1.0);
        }
        // Glyph pixels are inverted (black).
        let mask = glyph_mask(0, 8);
        let hit = mask.iter().position(|&m| m).unwrap();
        assert_eq!(d[hit], 0.0);
    }

    #[test]
    fn render_is_deterministic_and_cell_local() {
        let s = spec();
        let mut rng = sample_rng(7, Split::TrainQa, 0);
        let cells = gen_cells(&s, &mut rng);
        let a: Tensor<f64> = render(&cells, &s);
        let b: Tensor<f64> = render(&cells, &s);
        assert_eq!(a.to_vec(), b.to_vec());

        // Changing cell (0,0) only touches pixels in [0,block)².
        let mut cells2 = cells.clone();
        cells2.colors[0] = (cells.colors[0] + 1) % s.color_count as u8;
        let c: Tensor<f64> = render(&cells2, &s);
        let (av, cv) = (a.to_vec(), c.to_vec());
        let block = s.block();
        let sz = s.image_size;
        for ch in 0..3 {
            for y in 0..sz {
                for x in 0..sz {
                    let idx = ch * sz * sz + y * sz + x;
                    if y < block && x < block {
                        continue;
                    }
                    assert_eq!(av[idx], cv[idx], "pixel outside cell (0,0) changed");
                }
            }
        }
    }

    #[test]
    fn qa_sample_deterministic_given_seed() {
        let s = spec();
        let vocab = build_vocab(&s);
        let space = AnswerSpace::new(&[QuestionForm::ColorAt], &s);
        let gen = || {
            let mut rng = sample_rng(3, Split::TrainQa, 42);
            gen_qa_sample::<f64>(&s, &[QuestionForm::ColorAt], &space, &vocab, 32, &mut rng)
        };
        let a = gen();
        let b = gen();
        assert_eq!(a.image.to_vec(), b.image.to_vec());
        assert_eq!(a.question, b.question);
        assert_eq!(a.answer_id, b.answer_id);
    }

    #[test]
    fn qa_answers_match_oracle_over_many_samples() {
        let s = spec();
        let vocab = build_vocab(&s);
        let forms = [QuestionForm::ColorAt, QuestionForm::GlyphAt, QuestionForm::CountColor];
        let space = AnswerSpace::new(&forms, &s);
        for i in 0..1000 {
            let mut rng = sample_rng(11, Split::TrainQa, i);
            let sample = gen_qa_sample::<f32>(&s, &forms, &space, &vocab, 32, &mut rng);
            let oracle = oracle_answer(&sample.image, &sample.question_text, &s, &space).unwrap();
            assert_eq!(sample.answer_id, oracle, "sample {} question {}", i, sample.question_text);
        }
    }

    #[test]
    fn color_at_answer_distribution_is_uniform() {
        let s = spec();
        let vocab = build_vocab(&s);
        let space = AnswerSpace::new(&[QuestionForm::ColorAt], &s);
        let mut counts = vec![0usize; s.color_count];
        let n = 10_000;
        for i in 0..n {
            let mut rng = sample_rng(5, Split::TrainQa, i);
            let sample = gen_qa_sample::<f32>(&s, &[QuestionForm::ColorAt], &space, &vocab, 32, &mut rng);
            counts[sample.answer_id] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let freq = c as f64 / n as f64;
            assert!((freq - 0.125).abs() < 0.02, "class {} frequency {}", k, freq);
        }
    }

    #[test]
    fn caption_templates_sampled_uniformly() {
        let s = spec();
        let vocab = build_vocab(&s);
        let mut counts = std::collections::HashMap::new();
        let n = 13_000;
        for i in 0..n {
            let mut rng = sample_rng(9, Split::TrainCaption, i);
            let sample = gen_caption_sample::<f32>(&s, &vocab, 32, &mut rng);
            *counts.entry(sample.instruction_text.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 13);
        for (_, &c) in counts.iter() {
            let freq = c as f64 / n as f64;
            assert!((freq - 1.0 / 13.0).abs() < 0.02);
        }
    }

    #[test]
    fn caption_target_bits_match_colors_present() {
        let s = spec();
        let vocab = build_vocab(&s);
        for i in 0..200 {
            let mut rng = sample_rng(13, Split::TrainCaption, i);
            let sample = gen_caption_sample::<f32>(&s, &vocab, 32, &mut rng);
            let cells = read_cells(&sample.image, &s).unwrap();
            for k in 0..s.color_count {
                let present = cells.colors.iter().any(|&c| c as usize == k);
                assert_eq!(sample.target[k], present);
            }
        }
    }

    #[test]
    fn single_color_grid_has_one_hot_target() {
        let s = spec();
        let cells = GridCells { colors: vec![3; 16], glyphs: vec![0; 16] };
        let mut target = vec![false; s.color_count];
        for &c in &cells.colors {
            target[c as usize] = true;
        }
        assert_eq!(target.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn chance_accuracy_values() {
        let s = spec();
        assert_eq!(chance_accuracy(QuestionForm::ColorAt, &s), 0.125);
        assert_eq!(chance_accuracy(QuestionForm::GlyphAt, &s), 0.25);

        // Independent oracle: convolution of 16 Bernoulli(1/8) steps.
        let mut pmf = vec![0.0f64; 17];
        pmf[0] = 1.0;
        for _ in 0..16 {
            let mut next = vec![0.0f64; 17];
            for (k, &p) in pmf.iter().enumerate() {
                next[k] += p * (7.0 / 8.0);
                if k + 1 < 17 {
                    next[k + 1] += p * (1.0 / 8.0);
                }
            }
            pmf = next;
        }
        let best = pmf.iter().cloned().fold(0.0f64, f64::max);
        let got = chance_accuracy(QuestionForm::CountColor, &s);
        assert!((got - best).abs() < 1e-12, "{} vs {}", got, best);
    }

    #[test]
    fn answer_space_layout() {
        let s = spec();
        let forms = [QuestionForm::ColorAt, QuestionForm::GlyphAt, QuestionForm::CountColor];
        let space = AnswerSpace::new(&forms, &s);
        assert_eq!(space.total(), 8 + 4 + 17);
        assert_eq!(space.offset(QuestionForm::GlyphAt), Some(8));
        assert_eq!(space.label(QuestionForm::CountColor, 2), 14);
    }

    #[test]
    fn record_round_trip() {
        let s = spec();
        let vocab = build_vocab(&s);
        let space = AnswerSpace::new(&[QuestionForm::ColorAt], &s);
        let mut rng = sample_rng(1, Split::EvalQa, 0);
        let sample = gen_qa_sample::<f32>(&s, &[QuestionForm::ColorAt], &space, &vocab, 32, &mut rng);
        let mut buf = Vec::new();
        write_record(&mut buf, &sample.image, &sample.question, sample.answer_id as u16).unwrap();
        let mut cursor = std::io::Cursor::new(buf);
        let numel = 3 * 32 * 32;
        let (img, ids, answer) = read_record(&mut cursor, numel).unwrap().unwrap();
        assert_eq!(img.len(), numel);
        assert_eq!(ids, sample.question.ids.iter().map(|&i| i as u16).collect::<Vec<_>>());
        assert_eq!(answer as usize, sample.answer_id);
        assert!(read_record(&mut cursor, numel).unwrap().is_none());
    }

    #[test]
    fn splits_are_disjoint_streams() {
        let s = spec();
        let vocab = build_vocab(&s);
        let space = AnswerSpace::new(&[QuestionForm::ColorAt], &s);
        let mut train_rng = sample_rng(2, Split::TrainQa, 0);
        let mut eval_rng = sample_rng(2, Split::EvalQa, 0);
        let a = gen_qa_sample::<f32>(&s, &[QuestionForm::ColorAt], &space, &vocab, 32, &mut train_rng);
        let b = gen_qa_sample::<f32>(&s, &[QuestionForm::ColorAt], &space, &vocab, 32, &mut eval_rng);
        assert_ne!(a.image.to_vec(), b.image.to_vec());
    }
}

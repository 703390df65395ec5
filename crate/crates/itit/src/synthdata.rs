//! Deterministic procedural scenes: rendering, caption grammar, exact
//! inverse oracles, and dataset manifests.
//!
//! A scene is 1-3 objects, each with a shape, color, size and one of nine
//! grid zones. Rendering is a pure function of the scene, captions follow a
//! fixed unambiguous grammar, and both directions have exact inverses
//! (`parse_caption`, `extract_scene`) used as semantic oracles by the
//! evaluation metrics.
//!
//! Geometry constants here are the single source of truth shared with the
//! model: 32x32 images, 8x8 patches, a 4x4 token grid.

use std::collections::HashSet;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::{self, tag};

// ---------------------------------------------------------------------------
// Geometry.

pub const IMG_SIZE: usize = 32;
pub const PATCH: usize = 8;
pub const GRID: usize = IMG_SIZE / PATCH;
/// Image token count K.
pub const NUM_IMAGE_TOKENS: usize = GRID * GRID;
/// Patch vector dimension (8*8*3).
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
/// Max text length L: the longest caption is 23 content tokens plus EOS.
pub const MAX_TEXT_TOKENS: usize = 24;
pub const MAX_OBJECTS: usize = 3;

pub const BACKGROUND: f32 = 0.75;

/// Zone windows are 10x10 with a 1px outer border: offset 1 + 10*index.
const ZONE_WINDOW: usize = 10;
fn zone_window_origin(i: usize) -> usize {
    1 + ZONE_WINDOW * i
}

/// Stamp origins per zone index, chosen so every stamp lies inside a single
/// 8x8 patch of the token grid (zone rows map to patch rows 0, 1, 3).
const SMALL_ORIGIN: [usize; 3] = [3, 11, 26];
const LARGE_ORIGIN: [usize; 3] = [2, 11, 25];
/// Patch row/col occupied by an object in zone row/col i.
pub const ZONE_PATCH: [usize; 3] = [0, 1, 3];

// ---------------------------------------------------------------------------
// Attribute enums.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Shape {
    Circle,
    Square,
    Triangle,
    Cross,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    Magenta,
    Cyan,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Size {
    Small,
    Large,
}

/// One of the nine 3x3 grid positions, row-major from top-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Zone(pub u8);

pub const SHAPES: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Triangle, Shape::Cross];
pub const COLORS: [Color; 6] =
    [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::Magenta, Color::Cyan];
pub const SIZES: [Size; 2] = [Size::Small, Size::Large];
pub const NUM_ZONES: usize = 9;

impl Shape {
    pub fn index(self) -> usize {
        SHAPES.iter().position(|&s| s == self).unwrap()
    }
}
impl Color {
    pub fn index(self) -> usize {
        COLORS.iter().position(|&c| c == self).unwrap()
    }
    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
            Color::Magenta => [1.0, 0.0, 1.0],
            Color::Cyan => [0.0, 1.0, 1.0],
        }
    }
}
impl Size {
    pub fn index(self) -> usize {
        match self {
            Size::Small => 0,
            Size::Large => 1,
        }
    }
}
impl Zone {
    pub fn new(row: usize, col: usize) -> Self {
        assert!(row < 3 && col < 3, "zone ({row},{col}) out of the 3x3 grid");
        Zone((row * 3 + col) as u8)
    }
    pub fn index(self) -> usize {
        self.0 as usize
    }
    pub fn row(self) -> usize {
        self.0 as usize / 3
    }
    pub fn col(self) -> usize {
        self.0 as usize % 3
    }
    /// Token-grid position (patch row, patch col) occupied by this zone.
    pub fn patch(self) -> (usize, usize) {
        (ZONE_PATCH[self.row()], ZONE_PATCH[self.col()])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub color: Color,
    pub size: Size,
    pub zone: Zone,
}

/// Symbolic ground truth of a synthetic image. `seed` records provenance and
/// is excluded from equality; two scenes are equal iff their objects are.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub seed: u64,
}

impl PartialEq for SceneSpec {
    fn eq(&self, other: &Self) -> bool {
        self.objects == other.objects
    }
}
impl Eq for SceneSpec {}

impl SceneSpec {
    pub fn new(mut objects: Vec<ObjectSpec>, seed: u64) -> Self {
        assert!(
            !objects.is_empty() && objects.len() <= MAX_OBJECTS,
            "scene must hold 1..=3 objects, got {}",
            objects.len()
        );
        objects.sort_by_key(|o| o.zone);
        let mut zones = HashSet::new();
        for o in &objects {
            assert!(zones.insert(o.zone), "duplicate zone {:?}", o.zone);
        }
        SceneSpec { objects, seed }
    }
}

/// Uniform scene draw: object count in 1..=3, attributes uniform, zones
/// without replacement, canonical (zone-sorted) ordering.
pub fn sample_scene(rng: &mut ChaCha8Rng) -> SceneSpec {
    let n = rng.gen_range(1..=MAX_OBJECTS);
    let zones = index_sample(rng, NUM_ZONES, n);
    let mut objects = Vec::with_capacity(n);
    for z in zones.iter() {
        objects.push(ObjectSpec {
            shape: SHAPES[rng.gen_range(0..SHAPES.len())],
            color: COLORS[rng.gen_range(0..COLORS.len())],
            size: SIZES[rng.gen_range(0..SIZES.len())],
            zone: Zone(z as u8),
        });
    }
    let seed = rng.gen();
    SceneSpec::new(objects, seed)
}

// ---------------------------------------------------------------------------
// Rendering.

/// 32x32 RGB image, row-major HWC, values in [0,1].
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn background() -> Self {
        Image { pixels: vec![BACKGROUND; IMG_SIZE * IMG_SIZE * 3] }
    }
    pub fn at(&self, r: usize, c: usize) -> [f32; 3] {
        let i = (r * IMG_SIZE + c) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
    fn put(&mut self, r: usize, c: usize, rgb: [f32; 3]) {
        let i = (r * IMG_SIZE + c) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
    /// The 8x8 patch at token-grid position (pr, pc), flattened HWC.
    pub fn patch(&self, pr: usize, pc: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(PATCH_DIM);
        for r in 0..PATCH {
            let row = pr * PATCH + r;
            let i = (row * IMG_SIZE + pc * PATCH) * 3;
            out.extend_from_slice(&self.pixels[i..i + PATCH * 3]);
        }
        out
    }
    /// All K patches in token order (patch-row-major).
    pub fn patches(&self) -> Vec<Vec<f32>> {
        let mut out = Vec::with_capacity(NUM_IMAGE_TOKENS);
        for pr in 0..GRID {
            for pc in 0..GRID {
                out.push(self.patch(pr, pc));
            }
        }
        out
    }
    /// Rebuild from K patches in token order, clamped to [0,1].
    pub fn from_patches(patches: &[Vec<f32>]) -> Self {
        assert_eq!(patches.len(), NUM_IMAGE_TOKENS);
        let mut img = Image::background();
        for (t, p) in patches.iter().enumerate() {
            assert_eq!(p.len(), PATCH_DIM);
            let (pr, pc) = (t / GRID, t % GRID);
            for r in 0..PATCH {
                for c in 0..PATCH {
                    let j = (r * PATCH + c) * 3;
                    img.put(
                        pr * PATCH + r,
                        pc * PATCH + c,
                        [
                            p[j].clamp(0.0, 1.0),
                            p[j + 1].clamp(0.0, 1.0),
                            p[j + 2].clamp(0.0, 1.0),
                        ],
                    );
                }
            }
        }
        img
    }
}

/// Filled cells of a stamp bitmap, relative to its origin.
fn stamp_cells(shape: Shape, size: Size) -> Vec<(usize, usize)> {
    let mut cells = Vec::new();
    match size {
        Size::Small => {
            // 4x4 stamps.
            for r in 0..4usize {
                for c in 0..4usize {
                    let hit = match shape {
                        Shape::Circle => !((r == 0 || r == 3) && (c == 0 || c == 3)),
                        Shape::Square => true,
                        Shape::Triangle => c <= r,
                        Shape::Cross => c == r || c == 3 - r,
                    };
                    if hit {
                        cells.push((r, c));
                    }
                }
            }
        }
        Size::Large => {
            // 5x5 stamps.
            for r in 0..5usize {
                for c in 0..5usize {
                    let (dr, dc) = (r as i32 - 2, c as i32 - 2);
                    let hit = match shape {
                        Shape::Circle => dr * dr + dc * dc <= 5,
                        Shape::Square => true,
                        Shape::Triangle => c <= r,
                        Shape::Cross => r == 2 || c == 2,
                    };
                    if hit {
                        cells.push((r, c));
                    }
                }
            }
        }
    }
    cells
}

fn stamp_origin(size: Size, zone_index: usize) -> usize {
    match size {
        Size::Small => SMALL_ORIGIN[zone_index],
        Size::Large => LARGE_ORIGIN[zone_index],
    }
}

/// Pure rendering: fixed light-gray background, one stamp per object inside
/// its zone window. Zones occupy disjoint windows so objects never overlap.
pub fn render(scene: &SceneSpec) -> Image {
    let mut img = Image::background();
    for obj in &scene.objects {
        let r0 = stamp_origin(obj.size, obj.zone.row());
        let c0 = stamp_origin(obj.size, obj.zone.col());
        let rgb = obj.color.rgb();
        for (dr, dc) in stamp_cells(obj.shape, obj.size) {
            img.put(r0 + dr, c0 + dc, rgb);
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Vocabulary and captions.

pub mod vocab {
    pub const PAD: u32 = 0;
    pub const BOS: u32 = 1;
    pub const EOS: u32 = 2;
    pub const EMPTY: u32 = 3;
    pub const A: u32 = 4;
    pub const IN: u32 = 5;
    pub const THE: u32 = 6;
    pub const AND: u32 = 7;
    pub const SIZE_BASE: u32 = 8; // small, large
    pub const COLOR_BASE: u32 = 10; // red..cyan
    pub const SHAPE_BASE: u32 = 16; // circle..cross
    pub const ZONE_BASE: u32 = 20; // nine zones, row-major
    pub const SIZE: usize = 29;

    pub const WORDS: [&str; SIZE] = [
        "<pad>",
        "<bos>",
        "<eos>",
        "<empty>",
        "a",
        "in",
        "the",
        "and",
        "small",
        "large",
        "red",
        "green",
        "blue",
        "yellow",
        "magenta",
        "cyan",
        "circle",
        "square",
        "triangle",
        "cross",
        "top-left",
        "top-center",
        "top-right",
        "middle-left",
        "middle-center",
        "middle-right",
        "bottom-left",
        "bottom-center",
        "bottom-right",
    ];

    pub fn word(id: u32) -> &'static str {
        WORDS[id as usize]
    }

    pub fn id_of(word: &str) -> Option<u32> {
        WORDS.iter().position(|&w| w == word).map(|i| i as u32)
    }
}

impl fmt::Display for SceneSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", caption_string(self))
    }
}

/// Caption token sequence: per object `a <size> <color> <shape> in the
/// <zone>`, clauses joined by `and`, objects in canonical order, terminated
/// by EOS. One object yields 7 content tokens; three yield 23.
pub fn caption(scene: &SceneSpec) -> Vec<u32> {
    let mut out = Vec::with_capacity(scene.objects.len() * 8);
    for (i, obj) in scene.objects.iter().enumerate() {
        if i > 0 {
            out.push(vocab::AND);
        }
        out.push(vocab::A);
        out.push(vocab::SIZE_BASE + obj.size.index() as u32);
        out.push(vocab::COLOR_BASE + obj.color.index() as u32);
        out.push(vocab::SHAPE_BASE + obj.shape.index() as u32);
        out.push(vocab::IN);
        out.push(vocab::THE);
        out.push(vocab::ZONE_BASE + obj.zone.index() as u32);
    }
    out.push(vocab::EOS);
    out
}

/// Canonical caption as a plain string (content words only, no EOS).
pub fn caption_string(scene: &SceneSpec) -> String {
    let toks = caption(scene);
    toks[..toks.len() - 1].iter().map(|&t| vocab::word(t)).collect::<Vec<_>>().join(" ")
}

pub fn tokens_to_string(tokens: &[u32]) -> String {
    tokens
        .iter()
        .take_while(|&&t| t != vocab::EOS)
        .map(|&t| vocab::word(t))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn string_to_tokens(s: &str) -> Result<Vec<u32>> {
    let mut out = Vec::new();
    for w in s.split_whitespace() {
        out.push(
            vocab::id_of(w).ok_or_else(|| Error::Data(format!("unknown word: {w:?}")))?,
        );
    }
    out.push(vocab::EOS);
    Ok(out)
}

/// Multiset of attribute mentions, used for partial-credit scoring of
/// ungrammatical captions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AttrBag {
    pub sizes: [u32; 2],
    pub colors: [u32; 6],
    pub shapes: [u32; 4],
    pub zones: [u32; 9],
}

impl AttrBag {
    pub fn from_scene(scene: &SceneSpec) -> Self {
        let mut bag = AttrBag::default();
        for o in &scene.objects {
            bag.sizes[o.size.index()] += 1;
            bag.colors[o.color.index()] += 1;
            bag.shapes[o.shape.index()] += 1;
            bag.zones[o.zone.index()] += 1;
        }
        bag
    }

    fn add_token(&mut self, t: u32) {
        if (vocab::SIZE_BASE..vocab::COLOR_BASE).contains(&t) {
            self.sizes[(t - vocab::SIZE_BASE) as usize] += 1;
        } else if (vocab::COLOR_BASE..vocab::SHAPE_BASE).contains(&t) {
            self.colors[(t - vocab::COLOR_BASE) as usize] += 1;
        } else if (vocab::SHAPE_BASE..vocab::ZONE_BASE).contains(&t) {
            self.shapes[(t - vocab::SHAPE_BASE) as usize] += 1;
        } else if t >= vocab::ZONE_BASE && t < vocab::SIZE as u32 {
            self.zones[(t - vocab::ZONE_BASE) as usize] += 1;
        }
    }

    /// Count of matching attribute mentions (min of multiplicities).
    pub fn overlap(&self, other: &AttrBag) -> u32 {
        let mut n = 0;
        for i in 0..2 {
            n += self.sizes[i].min(other.sizes[i]);
        }
        for i in 0..6 {
            n += self.colors[i].min(other.colors[i]);
        }
        for i in 0..4 {
            n += self.shapes[i].min(other.shapes[i]);
        }
        for i in 0..9 {
            n += self.zones[i].min(other.zones[i]);
        }
        n
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParseOutcome {
    Scene(SceneSpec),
    /// First offending token position plus whatever attribute mentions could
    /// be salvaged from the sequence.
    Failure { position: usize, salvage: AttrBag },
}

impl ParseOutcome {
    pub fn scene(&self) -> Option<&SceneSpec> {
        match self {
            ParseOutcome::Scene(s) => Some(s),
            ParseOutcome::Failure { .. } => None,
        }
    }
}

/// Exact inverse of [`caption`] on grammatical token sequences (EOS optional
/// at the end). Object clauses may appear in any order; the parsed scene is
/// canonicalized. Never panics on arbitrary input.
pub fn parse_caption(tokens: &[u32]) -> ParseOutcome {
    let fail = |position: usize| {
        let mut salvage = AttrBag::default();
        for &t in tokens {
            salvage.add_token(t);
        }
        ParseOutcome::Failure { position, salvage }
    };
    let content: &[u32] = match tokens.iter().position(|&t| t == vocab::EOS) {
        Some(i) => &tokens[..i],
        None => tokens,
    };
    if content.is_empty() {
        return fail(0);
    }
    let mut objects = Vec::new();
    let mut pos = 0usize;
    loop {
        // Clause: a <size> <color> <shape> in the <zone>
        if content.len() < pos + 7 {
            return fail(content.len().min(pos));
        }
        let c = &content[pos..pos + 7];
        if c[0] != vocab::A {
            return fail(pos);
        }
        if !(vocab::SIZE_BASE..vocab::COLOR_BASE).contains(&c[1]) {
            return fail(pos + 1);
        }
        if !(vocab::COLOR_BASE..vocab::SHAPE_BASE).contains(&c[2]) {
            return fail(pos + 2);
        }
        if !(vocab::SHAPE_BASE..vocab::ZONE_BASE).contains(&c[3]) {
            return fail(pos + 3);
        }
        if c[4] != vocab::IN {
            return fail(pos + 4);
        }
        if c[5] != vocab::THE {
            return fail(pos + 5);
        }
        if !(vocab::ZONE_BASE..vocab::SIZE as u32).contains(&c[6]) {
            return fail(pos + 6);
        }
        let zone = Zone((c[6] - vocab::ZONE_BASE) as u8);
        if objects.iter().any(|o: &ObjectSpec| o.zone == zone) {
            return fail(pos + 6);
        }
        objects.push(ObjectSpec {
            size: SIZES[(c[1] - vocab::SIZE_BASE) as usize],
            color: COLORS[(c[2] - vocab::COLOR_BASE) as usize],
            shape: SHAPES[(c[3] - vocab::SHAPE_BASE) as usize],
            zone,
        });
        pos += 7;
        if pos == content.len() {
            break;
        }
        if content[pos] != vocab::AND || objects.len() == MAX_OBJECTS {
            return fail(pos);
        }
        pos += 1;
    }
    ParseOutcome::Scene(SceneSpec::new(objects, 0))
}

// ---------------------------------------------------------------------------
// Image oracle.

pub const DEFAULT_THETA_MATCH: f32 = 0.02;

struct Templates {
    /// Per (zone, shape, color, size): the object patch of a single-object
    /// render, plus the occupied token index.
    patches: Vec<Vec<(Shape, Color, Size, Vec<f32>)>>,
}

fn templates() -> &'static Templates {
    static CACHE: OnceLock<Templates> = OnceLock::new();
    CACHE.get_or_init(|| {
        let mut patches = Vec::with_capacity(NUM_ZONES);
        for z in 0..NUM_ZONES {
            let zone = Zone(z as u8);
            let (pr, pc) = zone.patch();
            let mut list = Vec::with_capacity(48);
            for &shape in &SHAPES {
                for &color in &COLORS {
                    for &size in &SIZES {
                        let scene = SceneSpec::new(
                            vec![ObjectSpec { shape, color, size, zone }],
                            0,
                        );
                        list.push((shape, color, size, render(&scene).patch(pr, pc)));
                    }
                }
            }
            patches.push(list);
        }
        Templates { patches }
    })
}

fn patch_mse(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        s += (x - y) * (x - y);
    }
    s / a.len() as f32
}

/// Per-zone template matching against all 48 stamp renderings. A zone is
/// occupied when the best-match MSE over its token patch is at most `theta`;
/// the arg-min template supplies the attributes. Ties break to the first
/// template in enumeration order.
pub fn extract_scene_with(img: &Image, theta: f32) -> ParseOutcome {
    let mut objects = Vec::new();
    for z in 0..NUM_ZONES {
        let zone = Zone(z as u8);
        let (pr, pc) = zone.patch();
        let patch = img.patch(pr, pc);
        let mut best: Option<(f32, Shape, Color, Size)> = None;
        for (shape, color, size, tpl) in &templates().patches[z] {
            let d = patch_mse(&patch, tpl);
            if best.map_or(true, |(b, ..)| d < b) {
                best = Some((d, *shape, *color, *size));
            }
        }
        let (d, shape, color, size) = best.unwrap();
        if d <= theta {
            objects.push(ObjectSpec { shape, color, size, zone });
        }
    }
    if objects.is_empty() || objects.len() > MAX_OBJECTS {
        let mut salvage = AttrBag::default();
        for o in &objects {
            salvage.sizes[o.size.index()] += 1;
            salvage.colors[o.color.index()] += 1;
            salvage.shapes[o.shape.index()] += 1;
            salvage.zones[o.zone.index()] += 1;
        }
        return ParseOutcome::Failure { position: 0, salvage };
    }
    ParseOutcome::Scene(SceneSpec::new(objects, 0))
}

pub fn extract_scene(img: &Image) -> ParseOutcome {
    extract_scene_with(img, DEFAULT_THETA_MATCH)
}

/// Fraction of the reference scene's attributes recovered by a candidate.
///
/// Parsed candidates are matched zone-by-zone (the zone attribute itself plus
/// shape/color/size of the object found there); unparseable candidates fall
/// back to multiset overlap of their salvaged attribute mentions.
pub fn retention(reference: &SceneSpec, candidate: &ParseOutcome) -> f64 {
    let total = (4 * reference.objects.len()) as f64;
    match candidate {
        ParseOutcome::Scene(cand) => {
            let mut hits = 0u32;
            for r in &reference.objects {
                if let Some(c) = cand.objects.iter().find(|c| c.zone == r.zone) {
                    hits += 1;
                    hits += (c.shape == r.shape) as u32;
                    hits += (c.color == r.color) as u32;
                    hits += (c.size == r.size) as u32;
                }
            }
            hits as f64 / total
        }
        ParseOutcome::Failure { salvage, .. } => {
            let bag = AttrBag::from_scene(reference);
            bag.overlap(salvage) as f64 / total
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset manifests.

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Paired,
    UnpairedImage,
    UnpairedText,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Paired => "paired",
            Split::UnpairedImage => "unpaired_image",
            Split::UnpairedText => "unpaired_text",
        }
    }
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "paired" => Some(Split::Paired),
            "unpaired_image" => Some(Split::UnpairedImage),
            "unpaired_text" => Some(Split::UnpairedText),
            _ => None,
        }
    }
}

/// One dataset record. Scenes are stored as canonical caption strings and
/// re-rendered on demand; `caption_override` is present only on corrupted
/// paired records, whose image stays the original scene while the caption is
/// swapped.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub id: u64,
    pub scene: String,
    pub split: Split,
    pub caption_override: Option<String>,
}

impl Record {
    pub fn scene_spec(&self) -> Result<SceneSpec> {
        let toks = string_to_tokens(&self.scene)?;
        match parse_caption(&toks) {
            ParseOutcome::Scene(s) => Ok(s),
            ParseOutcome::Failure { position, .. } => Err(Error::Data(format!(
                "record {}: unparseable scene string at token {position}: {:?}",
                self.id, self.scene
            ))),
        }
    }
    pub fn caption_str(&self) -> &str {
        self.caption_override.as_deref().unwrap_or(&self.scene)
    }
}

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub corruption_rate: f64,
    pub records: Vec<Record>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Line-delimited 7-bit text: a header line with version, seed and
    /// corruption rate, then one tab-separated record per line.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "#itit-manifest\tversion={}\tseed={}\tcorruption_rate={}\n",
            MANIFEST_VERSION, self.seed, self.corruption_rate
        );
        for r in &self.records {
            out.push_str(&format!("{}\t{}\t{}", r.id, r.scene, r.split.name()));
            if let Some(o) = &r.caption_override {
                out.push('\t');
                out.push_str(o);
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, file: &str) -> Result<Self> {
        let err = |msg: String| Error::Format { file: file.to_string(), msg };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| err("empty manifest".into()))?;
        let fields: Vec<&str> = header.split('\t').collect();
        if fields.len() != 4 || fields[0] != "#itit-manifest" {
            return Err(err(format!("bad header: {header:?}")));
        }
        let take = |f: &str, key: &str| -> Result<String> {
            f.strip_prefix(&format!("{key}="))
                .map(str::to_string)
                .ok_or_else(|| err(format!("expected {key}= in header, got {f:?}")))
        };
        let version: u32 =
            take(fields[1], "version")?.parse().map_err(|e| err(format!("version: {e}")))?;
        if version != MANIFEST_VERSION {
            return Err(err(format!("unsupported manifest version {version}")));
        }
        let seed: u64 =
            take(fields[2], "seed")?.parse().map_err(|e| err(format!("seed: {e}")))?;
        let corruption_rate: f64 = take(fields[3], "corruption_rate")?
            .parse()
            .map_err(|e| err(format!("corruption_rate: {e}")))?;
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for (ln, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split('\t').collect();
            if parts.len() != 3 && parts.len() != 4 {
                return Err(err(format!("line {}: expected 3 or 4 fields", ln + 2)));
            }
            let id: u64 = parts[0].parse().map_err(|e| err(format!("line {}: id: {e}", ln + 2)))?;
            if !seen.insert(id) {
                return Err(err(format!("duplicate record id {id}")));
            }
            let split = Split::parse(parts[2])
                .ok_or_else(|| err(format!("line {}: unknown split {:?}", ln + 2, parts[2])))?;
            records.push(Record {
                id,
                scene: parts[1].to_string(),
                split,
                caption_override: parts.get(3).map(|s| s.to_string()),
            });
        }
        Ok(DatasetManifest { seed, corruption_rate, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }
}

/// Sample three pairwise-disjoint scene pools and store them as canonical
/// caption strings. Requested sizes are honored exactly.
pub fn make_dataset(
    n_paired: usize,
    n_unpaired_image: usize,
    n_unpaired_text: usize,
    seed: u64,
) -> DatasetManifest {
    let mut r = rng::stream(seed, &[tag::SCENE]);
    let mut used = HashSet::new();
    let mut records = Vec::new();
    let mut id = 0u64;
    for (count, split) in [
        (n_paired, Split::Paired),
        (n_unpaired_image, Split::UnpairedImage),
        (n_unpaired_text, Split::UnpairedText),
    ] {
        let mut made = 0;
        while made < count {
            let scene = sample_scene(&mut r);
            let s = caption_string(&scene);
            if !used.insert(s.clone()) {
                continue;
            }
            records.push(Record { id, scene: s, split, caption_override: None });
            id += 1;
            made += 1;
        }
    }
    DatasetManifest { seed, corruption_rate: 0.0, records }
}

/// With probability `p`, replace a paired record's caption with that of
/// another paired record: victims are selected per record, shuffled, and
/// their captions rotated by one so no victim keeps its own caption. Split
/// labels and scene (image) fields are unchanged.
pub fn corrupt_pairs(
    manifest: &DatasetManifest,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<DatasetManifest> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Data(format!("corruption rate {p} outside [0,1]")));
    }
    let mut out = manifest.clone();
    out.corruption_rate = p;
    let paired_pos: Vec<usize> = out
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split == Split::Paired)
        .map(|(i, _)| i)
        .collect();
    if p == 0.0 || paired_pos.len() < 2 {
        return Ok(out);
    }
    let mut victims: Vec<usize> =
        paired_pos.iter().copied().filter(|_| rng.gen::<f64>() < p).collect();
    if victims.len() == 1 {
        // A lone victim copies some other paired record's caption.
        let v = victims[0];
        let donor = loop {
            let d = paired_pos[rng.gen_range(0..paired_pos.len())];
            if d != v {
                break d;
            }
        };
        out.records[v].caption_override = Some(out.records[donor].scene.clone());
        return Ok(out);
    }
    // Fisher-Yates then rotate captions among victims.
    for i in (1..victims.len()).rev() {
        let j = rng.gen_range(0..=i);
        victims.swap(i, j);
    }
    let captions: Vec<String> =
        victims.iter().map(|&i| out.records[i].scene.clone()).collect();
    for (k, &i) in victims.iter().enumerate() {
        let donor = captions[(k + 1) % captions.len()].clone();
        out.records[i].caption_override = Some(donor);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scene_strategy() -> impl Strategy<Value = SceneSpec> {
        (1usize..=3, any::<u64>()).prop_flat_map(|(n, seed)| {
            (
                proptest::sample::subsequence((0..9u8).collect::<Vec<_>>(), n),
                proptest::collection::vec((0usize..4, 0usize..6, 0usize..2), n),
                Just(seed),
            )
                .prop_map(|(zones, attrs, seed)| {
                    let objects = zones
                        .into_iter()
                        .zip(attrs)
                        .map(|(z, (sh, co, si))| ObjectSpec {
                            shape: SHAPES[sh],
                            color: COLORS[co],
                            size: SIZES[si],
                            zone: Zone(z),
                        })
                        .collect();
                    SceneSpec::new(objects, seed)
                })
        })
    }

    #[test]
    fn sample_scene_is_deterministic_and_valid() {
        let s1 = sample_scene(&mut rng::stream(42, &[tag::SCENE]));
        let s2 = sample_scene(&mut rng::stream(42, &[tag::SCENE]));
        assert_eq!(s1, s2);
        let mut r = rng::stream(7, &[tag::SCENE]);
        for _ in 0..500 {
            let s = sample_scene(&mut r);
            let zones: HashSet<_> = s.objects.iter().map(|o| o.zone).collect();
            assert_eq!(zones.len(), s.objects.len(), "zones must be distinct");
            assert!(s.objects.windows(2).all(|w| w[0].zone < w[1].zone), "canonical order");
        }
    }

    #[test]
    fn shape_frequencies_are_uniform() {
        let mut r = rng::stream(3, &[tag::SCENE]);
        let mut counts = [0usize; 4];
        let mut total = 0usize;
        for _ in 0..10_000 {
            for o in sample_scene(&mut r).objects {
                counts[o.shape.index()] += 1;
                total += 1;
            }
        }
        for c in counts {
            let f = c as f64 / total as f64;
            assert!((f - 0.25).abs() <= 0.02, "shape freq {f}");
        }
    }

    #[test]
    fn render_is_pure_and_objects_disjoint() {
        let s = sample_scene(&mut rng::stream(5, &[tag::SCENE]));
        assert_eq!(render(&s), render(&s));
        // Each object's stamp lies inside its own zone window.
        for obj in &s.objects {
            let r0 = stamp_origin(obj.size, obj.zone.row());
            let c0 = stamp_origin(obj.size, obj.zone.col());
            let wr = zone_window_origin(obj.zone.row());
            let wc = zone_window_origin(obj.zone.col());
            for (dr, dc) in stamp_cells(obj.shape, obj.size) {
                assert!(r0 + dr >= wr && r0 + dr < wr + ZONE_WINDOW);
                assert!(c0 + dc >= wc && c0 + dc < wc + ZONE_WINDOW);
            }
        }
    }

    #[test]
    fn large_red_circle_at_center_stays_in_center_window() {
        let scene = SceneSpec::new(
            vec![ObjectSpec {
                shape: Shape::Circle,
                color: Color::Red,
                size: Size::Large,
                zone: Zone::new(1, 1),
            }],
            0,
        );
        let img = render(&scene);
        for r in 0..IMG_SIZE {
            for c in 0..IMG_SIZE {
                let px = img.at(r, c);
                if px == [1.0, 0.0, 0.0] {
                    assert!((11..21).contains(&r) && (11..21).contains(&c),
                        "red pixel at ({r},{c}) outside the center 10x10 window");
                }
            }
        }
    }

    #[test]
    fn every_stamp_fits_one_patch() {
        for &size in &SIZES {
            for zi in 0..3 {
                let o = stamp_origin(size, zi);
                let pr = o / PATCH;
                assert_eq!(pr, ZONE_PATCH[zi]);
                let extent = match size {
                    Size::Small => 4,
                    Size::Large => 5,
                };
                assert_eq!((o + extent - 1) / PATCH, pr, "stamp straddles patches");
            }
        }
    }

    #[test]
    fn caption_lengths_match_grammar_arithmetic() {
        let one = SceneSpec::new(
            vec![ObjectSpec {
                shape: Shape::Square,
                color: Color::Blue,
                size: Size::Small,
                zone: Zone(4),
            }],
            0,
        );
        assert_eq!(caption(&one).len(), 7 + 1, "7 content tokens plus EOS");
        let three = SceneSpec::new(
            (0..3)
                .map(|i| ObjectSpec {
                    shape: SHAPES[i],
                    color: COLORS[i],
                    size: SIZES[i % 2],
                    zone: Zone(i as u8 * 3),
                })
                .collect(),
            0,
        );
        let toks = caption(&three);
        assert_eq!(toks.len(), 23 + 1, "23 content tokens plus EOS");
        assert!(toks.len() <= MAX_TEXT_TOKENS);
    }

    proptest! {
        #[test]
        fn caption_roundtrip(scene in scene_strategy()) {
            let toks = caption(&scene);
            prop_assert_eq!(parse_caption(&toks), ParseOutcome::Scene(scene.clone()));
            // And through the string form used by manifests.
            let s = caption_string(&scene);
            let toks2 = string_to_tokens(&s).unwrap();
            prop_assert_eq!(parse_caption(&toks2), ParseOutcome::Scene(scene));
        }

        #[test]
        fn render_extract_roundtrip(scene in scene_strategy()) {
            let img = render(&scene);
            prop_assert_eq!(extract_scene(&img), ParseOutcome::Scene(scene));
        }
    }

    #[test]
    fn parse_failures_are_structured() {
        match parse_caption(&[]) {
            ParseOutcome::Failure { position, .. } => assert_eq!(position, 0),
            other => panic!("expected failure, got {other:?}"),
        }
        // One wrong color word: still salvages the other attributes.
        let scene = SceneSpec::new(
            vec![ObjectSpec {
                shape: Shape::Triangle,
                color: Color::Cyan,
                size: Size::Large,
                zone: Zone(8),
            }],
            0,
        );
        let mut toks = caption(&scene);
        toks[2] = vocab::SHAPE_BASE; // a color slot holding a shape word
        match parse_caption(&toks) {
            ParseOutcome::Failure { position, salvage } => {
                assert_eq!(position, 2);
                assert_eq!(salvage.sizes[Size::Large.index()], 1);
                assert_eq!(salvage.shapes[Shape::Triangle.index()], 1);
                assert_eq!(salvage.zones[8], 1);
                assert_eq!(salvage.colors, [0; 6], "the color was lost");
                let r = retention(&scene, &ParseOutcome::Failure { position, salvage });
                assert!((r - 0.75).abs() < 1e-12, "3 of 4 attributes survive, got {r}");
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn extraction_survives_small_noise() {
        let mut r = rng::stream(11, &[tag::SCENE]);
        for _ in 0..100 {
            let scene = sample_scene(&mut r);
            let mut img = render(&scene);
            for p in img.pixels.iter_mut() {
                *p = (*p + (r.gen::<f32>() - 0.5) * 0.1).clamp(0.0, 1.0);
            }
            assert_eq!(extract_scene(&img), ParseOutcome::Scene(scene));
        }
    }

    #[test]
    fn blank_image_extracts_to_failure() {
        match extract_scene(&Image::background()) {
            ParseOutcome::Failure { salvage, .. } => assert_eq!(salvage, AttrBag::default()),
            other => panic!("expected failure on empty image, got {other:?}"),
        }
    }

    #[test]
    fn make_dataset_pools_are_exact_and_disjoint() {
        let m = make_dataset(50, 30, 20, 9);
        assert_eq!(m.split(Split::Paired).len(), 50);
        assert_eq!(m.split(Split::UnpairedImage).len(), 30);
        assert_eq!(m.split(Split::UnpairedText).len(), 20);
        let scenes: HashSet<_> = m.records.iter().map(|r| r.scene.clone()).collect();
        assert_eq!(scenes.len(), 100, "pools must be pairwise disjoint");
        let ids: HashSet<_> = m.records.iter().map(|r| r.id).collect();
        assert_eq!(ids.len(), 100);
        assert_eq!(m, make_dataset(50, 30, 20, 9));
        assert_eq!(m.to_text(), make_dataset(50, 30, 20, 9).to_text());
    }

    #[test]
    fn manifest_text_roundtrip_is_byte_identical() {
        let m = make_dataset(20, 5, 5, 1);
        let mut r = rng::stream(2, &[tag::CORRUPT]);
        let c = corrupt_pairs(&m, 0.4, &mut r).unwrap();
        let text = c.to_text();
        let back = DatasetManifest::from_text(&text, "mem").unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn corruption_boundaries_and_rate() {
        let m = make_dataset(200, 0, 0, 3);
        let mut r = rng::stream(4, &[tag::CORRUPT]);
        let c0 = corrupt_pairs(&m, 0.0, &mut r).unwrap();
        assert!(c0.records.iter().all(|x| x.caption_override.is_none()));

        let mut r = rng::stream(4, &[tag::CORRUPT]);
        let c1 = corrupt_pairs(&m, 1.0, &mut r).unwrap();
        assert!(
            c1.records.iter().all(|x| x.caption_override.as_deref() != Some(&x.scene as &str)
                && x.caption_override.is_some()),
            "at p=1 no record keeps its own caption"
        );

        let big = make_dataset(10_000, 0, 0, 5);
        let mut r = rng::stream(6, &[tag::CORRUPT]);
        let c = corrupt_pairs(&big, 0.5, &mut r).unwrap();
        let mismatched = c
            .records
            .iter()
            .filter(|x| x.caption_override.as_deref().map_or(false, |o| o != x.scene))
            .count();
        let f = mismatched as f64 / 10_000.0;
        assert!((f - 0.5).abs() <= 0.02, "mismatch fraction {f}");

        assert!(corrupt_pairs(&m, 1.5, &mut r).is_err());
        assert!(corrupt_pairs(&m, -0.1, &mut r).is_err());
    }

    #[test]
    fn distinct_patch_count_exceeds_default_codebook() {
        let mut r = rng::stream(1, &[tag::SCENE]);
        let mut distinct: HashSet<Vec<u32>> = HashSet::new();
        for _ in 0..2000 {
            let img = render(&sample_scene(&mut r));
            for p in img.patches() {
                distinct.insert(p.iter().map(|x| x.to_bits()).collect());
            }
        }
        assert!(
            distinct.len() >= 128,
            "expected at least 128 distinct patch appearances, got {}",
            distinct.len()
        );
    }
}

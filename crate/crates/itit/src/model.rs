//! The unified image-text encoder with a causal text decoder and a parallel
//! image decoder, plus the masking machinery.
//!
//! The encoder embeds unmasked image tokens and surviving MASK tokens,
//! concatenates text embeddings (a single learned token for empty text) and
//! runs pre-norm transformer blocks with full bidirectional attention. To
//! save encoder compute, a fixed number of masked positions is dropped from
//! its input; the image decoder re-inserts MASK embeddings at the dropped
//! positions before self-attending over the full token grid. The text
//! decoder attends causally over text while seeing every encoder feature,
//! and its gradient into the encoder is scaled down (default 0.1).

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{self, tag};
use crate::scalar::Scalar;
use crate::synthdata::{vocab, MAX_TEXT_TOKENS, NUM_IMAGE_TOKENS};
use crate::tape::{dropout, Tape, Var};
use crate::tensor::Tensor;
use crate::vq::ImageTokens;

// ---------------------------------------------------------------------------
// Configuration.

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub text_decoder_layers: usize,
    pub image_decoder_layers: usize,
    pub image_vocab: usize,
    pub dropout: f64,
    /// Gradient scale applied to encoder features entering the text decoder.
    pub i2t_grad_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            encoder_layers: 4,
            text_decoder_layers: 2,
            image_decoder_layers: 2,
            image_vocab: 128,
            dropout: 0.1,
            i2t_grad_scale: 0.1,
        }
    }
}

impl ModelConfig {
    /// Image token count K (fixed by the dataset geometry).
    pub fn k(&self) -> usize {
        NUM_IMAGE_TOKENS
    }
    /// Max text length L.
    pub fn l(&self) -> usize {
        MAX_TEXT_TOKENS
    }
    pub fn text_vocab(&self) -> usize {
        vocab::SIZE
    }
    /// Embedding row holding the MASK token.
    pub fn mask_token(&self) -> usize {
        self.image_vocab
    }
    /// Masked positions dropped from the encoder input during training.
    pub fn drop_count(&self) -> usize {
        self.k() / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.encoder_layers == 0
            || self.text_decoder_layers == 0
            || self.image_decoder_layers == 0
        {
            return Err(Error::Config("layer counts must be positive".into()));
        }
        if self.image_vocab < 2 {
            return Err(Error::Config("image vocab must hold at least 2 entries".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.i2t_grad_scale) {
            return Err(Error::Config(format!(
                "i2t_grad_scale {} outside [0,1]",
                self.i2t_grad_scale
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters.

#[derive(Clone, Debug)]
pub struct TransformerBlock<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w_up: T,
    pub b_up: T,
    pub w_down: T,
    pub b_down: T,
}

impl<T> TransformerBlock<T> {
    fn fields(&self) -> Vec<(&'static str, &T)> {
        vec![
            ("ln1_g", &self.ln1_g),
            ("ln1_b", &self.ln1_b),
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("ln2_g", &self.ln2_g),
            ("ln2_b", &self.ln2_b),
            ("w_up", &self.w_up),
            ("b_up", &self.b_up),
            ("w_down", &self.w_down),
            ("b_down", &self.b_down),
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> TransformerBlock<U> {
        TransformerBlock {
            ln1_g: f(&self.ln1_g),
            ln1_b: f(&self.ln1_b),
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            bk: f(&self.bk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
            ln2_g: f(&self.ln2_g),
            ln2_b: f(&self.ln2_b),
            w_up: f(&self.w_up),
            b_up: f(&self.b_up),
            w_down: f(&self.w_down),
            b_down: f(&self.b_down),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ModelTensors<T> {
    pub img_embed: T,
    pub txt_embed: T,
    pub img_pos: T,
    pub txt_pos: T,
    pub encoder: Vec<TransformerBlock<T>>,
    pub enc_ln_g: T,
    pub enc_ln_b: T,
    pub text_decoder: Vec<TransformerBlock<T>>,
    pub txt_ln_g: T,
    pub txt_ln_b: T,
    pub txt_proj_w: T,
    pub txt_proj_b: T,
    pub image_decoder: Vec<TransformerBlock<T>>,
    pub img_ln_g: T,
    pub img_ln_b: T,
    pub img_proj_w: T,
    pub img_proj_b: T,
}

impl<T> ModelTensors<T> {
    /// Named parameters in a fixed order; this order is the single source of
    /// truth for checkpoints and optimizer state.
    pub fn fields(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = vec![
            ("embed.img".into(), &self.img_embed),
            ("embed.txt".into(), &self.txt_embed),
            ("pos.img".into(), &self.img_pos),
            ("pos.txt".into(), &self.txt_pos),
        ];
        for (i, b) in self.encoder.iter().enumerate() {
            for (n, t) in b.fields() {
                out.push((format!("enc.{i}.{n}"), t));
            }
        }
        out.push(("enc.ln_g".into(), &self.enc_ln_g));
        out.push(("enc.ln_b".into(), &self.enc_ln_b));
        for (i, b) in self.text_decoder.iter().enumerate() {
            for (n, t) in b.fields() {
                out.push((format!("txtdec.{i}.{n}"), t));
            }
        }
        out.push(("txtdec.ln_g".into(), &self.txt_ln_g));
        out.push(("txtdec.ln_b".into(), &self.txt_ln_b));
        out.push(("txtdec.proj_w".into(), &self.txt_proj_w));
        out.push(("txtdec.proj_b".into(), &self.txt_proj_b));
        for (i, b) in self.image_decoder.iter().enumerate() {
            for (n, t) in b.fields() {
                out.push((format!("imgdec.{i}.{n}"), t));
            }
        }
        out.push(("imgdec.ln_g".into(), &self.img_ln_g));
        out.push(("imgdec.ln_b".into(), &self.img_ln_b));
        out.push(("imgdec.proj_w".into(), &self.img_proj_w));
        out.push(("imgdec.proj_b".into(), &self.img_proj_b));
        out
    }

    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> ModelTensors<U> {
        ModelTensors {
            img_embed: f(&self.img_embed),
            txt_embed: f(&self.txt_embed),
            img_pos: f(&self.img_pos),
            txt_pos: f(&self.txt_pos),
            encoder: self.encoder.iter().map(|b| b.map(f)).collect(),
            enc_ln_g: f(&self.enc_ln_g),
            enc_ln_b: f(&self.enc_ln_b),
            text_decoder: self.text_decoder.iter().map(|b| b.map(f)).collect(),
            txt_ln_g: f(&self.txt_ln_g),
            txt_ln_b: f(&self.txt_ln_b),
            txt_proj_w: f(&self.txt_proj_w),
            txt_proj_b: f(&self.txt_proj_b),
            image_decoder: self.image_decoder.iter().map(|b| b.map(f)).collect(),
            img_ln_g: f(&self.img_ln_g),
            img_ln_b: f(&self.img_ln_b),
            img_proj_w: f(&self.img_proj_w),
            img_proj_b: f(&self.img_proj_b),
        }
    }
}

/// Parameter group, used by gradient-flow assertions and diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Encoder,
    TextDecoder,
    ImageDecoder,
    Shared,
}

pub fn group_of(name: &str) -> ParamGroup {
    if name.starts_with("enc.") {
        ParamGroup::Encoder
    } else if name.starts_with("txtdec.") {
        ParamGroup::TextDecoder
    } else if name.starts_with("imgdec.") {
        ParamGroup::ImageDecoder
    } else {
        ParamGroup::Shared
    }
}

#[derive(Clone, Debug)]
pub struct ModelParams<S: Scalar> {
    pub cfg: ModelConfig,
    pub tensors: ModelTensors<Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    /// Truncated-normal init (std 0.02), zero biases, unit layer-norm gains,
    /// zero output-projection biases. Each tensor draws from its own stream
    /// keyed by (seed, parameter index).
    pub fn init(cfg: ModelConfig, seed: u64) -> Self {
        cfg.validate().expect("invalid model config");
        let d = cfg.d_model;
        let mut idx = 0u64;
        let mut next = |shape: Vec<usize>, kind: InitKind| -> Tensor<S> {
            let mut r = rng::stream(seed, &[tag::MODEL_INIT, idx]);
            idx += 1;
            match kind {
                InitKind::Normal => Tensor::trunc_normal(shape, 0.02, &mut r),
                InitKind::Zero => Tensor::zeros(shape),
                InitKind::One => Tensor::full(shape, S::one()),
            }
        };
        let block = |next: &mut dyn FnMut(Vec<usize>, InitKind) -> Tensor<S>| TransformerBlock {
            ln1_g: next(vec![d], InitKind::One),
            ln1_b: next(vec![d], InitKind::Zero),
            wq: next(vec![d, d], InitKind::Normal),
            bq: next(vec![d], InitKind::Zero),
            wk: next(vec![d, d], InitKind::Normal),
            bk: next(vec![d], InitKind::Zero),
            wv: next(vec![d, d], InitKind::Normal),
            bv: next(vec![d], InitKind::Zero),
            wo: next(vec![d, d], InitKind::Normal),
            bo: next(vec![d], InitKind::Zero),
            ln2_g: next(vec![d], InitKind::One),
            ln2_b: next(vec![d], InitKind::Zero),
            w_up: next(vec![d, 4 * d], InitKind::Normal),
            b_up: next(vec![4 * d], InitKind::Zero),
            w_down: next(vec![4 * d, d], InitKind::Normal),
            b_down: next(vec![d], InitKind::Zero),
        };
        let tensors = ModelTensors {
            img_embed: next(vec![cfg.image_vocab + 1, d], InitKind::Normal),
            txt_embed: next(vec![cfg.text_vocab(), d], InitKind::Normal),
            img_pos: next(vec![cfg.k(), d], InitKind::Normal),
            txt_pos: next(vec![cfg.l(), d], InitKind::Normal),
            encoder: (0..cfg.encoder_layers).map(|_| block(&mut next)).collect(),
            enc_ln_g: next(vec![d], InitKind::One),
            enc_ln_b: next(vec![d], InitKind::Zero),
            text_decoder: (0..cfg.text_decoder_layers).map(|_| block(&mut next)).collect(),
            txt_ln_g: next(vec![d], InitKind::One),
            txt_ln_b: next(vec![d], InitKind::Zero),
            txt_proj_w: next(vec![d, cfg.text_vocab()], InitKind::Normal),
            txt_proj_b: next(vec![cfg.text_vocab()], InitKind::Zero),
            image_decoder: (0..cfg.image_decoder_layers).map(|_| block(&mut next)).collect(),
            img_ln_g: next(vec![d], InitKind::One),
            img_ln_b: next(vec![d], InitKind::Zero),
            img_proj_w: next(vec![d, cfg.image_vocab], InitKind::Normal),
            img_proj_b: next(vec![cfg.image_vocab], InitKind::Zero),
        };
        ModelParams { cfg, tensors }
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.fields().into_iter().map(|(n, _)| n).collect()
    }

    pub fn flat(&self) -> Vec<&Tensor<S>> {
        self.tensors.fields().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_elements(&self) -> usize {
        self.flat().iter().map(|t| t.numel()).sum()
    }

    /// Register every parameter on a tape. Frozen bindings record no
    /// backward closures, so forward-only passes stay cheap.
    pub fn bind<'t>(&self, tape: &'t Tape<S>, trainable: bool) -> Bound<'t, S> {
        let t = self.tensors.map(&mut |tensor| tape.input(tensor, trainable));
        let flat = t.fields().into_iter().map(|(_, v)| *v).collect();
        Bound { t, flat }
    }

    pub fn all_finite(&self) -> bool {
        self.flat().iter().all(|t| t.data().iter().all(|x| x.is_finite()))
    }

    pub fn map_scalar<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            cfg: self.cfg.clone(),
            tensors: self.tensors.map(&mut |t| t.map(|x| T::from_f64(x.to_f64()))),
        }
    }
}

enum InitKind {
    Normal,
    Zero,
    One,
}

pub struct Bound<'t, S: Scalar> {
    pub t: ModelTensors<Var<'t, S>>,
    pub flat: Vec<Var<'t, S>>,
}

// ---------------------------------------------------------------------------
// Masking.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskPurpose {
    T2I,
    I2T,
}

impl MaskPurpose {
    fn max_ratio(self) -> f64 {
        match self {
            MaskPurpose::T2I => 1.0,
            MaskPurpose::I2T => 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    masked: Vec<bool>,
    pub ratio: f64,
}

impl MaskSpec {
    pub fn from_positions(positions: &[usize], k: usize) -> Self {
        let mut masked = vec![false; k];
        for &p in positions {
            assert!(p < k, "mask position {p} out of {k}");
            masked[p] = true;
        }
        let count = masked.iter().filter(|&&m| m).count();
        MaskSpec { masked, ratio: count as f64 / k as f64 }
    }
    pub fn none(k: usize) -> Self {
        MaskSpec { masked: vec![false; k], ratio: 0.0 }
    }
    pub fn all(k: usize) -> Self {
        MaskSpec { masked: vec![true; k], ratio: 1.0 }
    }
    pub fn is_masked(&self, i: usize) -> bool {
        self.masked[i]
    }
    pub fn len(&self) -> usize {
        self.masked.len()
    }
    pub fn is_empty(&self) -> bool {
        self.masked.is_empty()
    }
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }
    pub fn unmasked_positions(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }
}

/// Masking-ratio draw: normal(mode 0.75, std 0.25), rejection-resampled into
/// [0.5, max], where max is 1.0 for T2I and 0.75 for I2T.
pub fn sample_mask_ratio(rng: &mut ChaCha8Rng, purpose: MaskPurpose) -> f64 {
    let dist = Normal::new(0.75f64, 0.25).unwrap();
    loop {
        let x = dist.sample(rng);
        if (0.5..=purpose.max_ratio()).contains(&x) {
            return x;
        }
    }
}

/// Ratio draw plus a uniform choice of masked positions; the masked count is
/// round(ratio * k) clamped to [1, k].
pub fn sample_mask(rng: &mut ChaCha8Rng, purpose: MaskPurpose, k: usize) -> MaskSpec {
    let ratio = sample_mask_ratio(rng, purpose);
    let count = ((ratio * k as f64).round() as usize).clamp(1, k);
    let picks = rand::seq::index::sample(rng, k, count);
    let mut spec = MaskSpec::from_positions(&picks.iter().collect::<Vec<_>>(), k);
    spec.ratio = ratio;
    spec
}

// ---------------------------------------------------------------------------
// Forward passes.

/// Dropout context for one loss computation; `None` disables dropout (eval).
pub struct PassCtx {
    pub dropout_rng: Option<ChaCha8Rng>,
    pub dropout_p: f64,
}

impl PassCtx {
    pub fn eval() -> Self {
        PassCtx { dropout_rng: None, dropout_p: 0.0 }
    }
    pub fn train(p: f64, rng: ChaCha8Rng) -> Self {
        PassCtx { dropout_rng: Some(rng), dropout_p: p }
    }
    fn apply<'t, S: Scalar>(&mut self, x: Var<'t, S>) -> Var<'t, S> {
        dropout(x, self.dropout_p, self.dropout_rng.as_mut())
    }
}

pub enum ImageCond<'a, 't, S: Scalar> {
    Tokens(&'a ImageTokens),
    /// Row-stochastic (or straight-through one-hot) K x V_img matrix.
    Soft(Var<'t, S>),
}

pub enum TextCond<'a, 't, S: Scalar> {
    Empty,
    /// Token ids, EOS included, no BOS.
    Tokens(&'a [u32]),
    /// Row one-hot n x V_txt matrix (straight-through text).
    Soft(Var<'t, S>),
}

pub struct EncodeOut<'t, S: Scalar> {
    /// (kept image positions + text positions) x d features.
    pub feats: Var<'t, S>,
    /// Image token positions present in the encoder input, ascending.
    pub kept: Vec<usize>,
    pub n_img: usize,
    pub n_txt: usize,
}

fn head_concat<'t, S: Scalar>(tape: &'t Tape<S>, heads: &[Var<'t, S>]) -> Var<'t, S> {
    // Column concat via transpose + row concat.
    let tr: Vec<Var<'t, S>> = heads.iter().map(|h| h.transpose()).collect();
    Var::concat_rows(tape, &tr).transpose()
}

fn attention<'t, S: Scalar>(
    tape: &'t Tape<S>,
    x: Var<'t, S>,
    blk: &TransformerBlock<Var<'t, S>>,
    n_heads: usize,
    attn_mask: Option<&Tensor<S>>,
) -> Var<'t, S> {
    let sh = x.shape();
    let (n, d) = (sh[0], sh[1]);
    let hd = d / n_heads;
    let q = x.matmul(blk.wq).add_bias(blk.bq);
    let k = x.matmul(blk.wk).add_bias(blk.bk);
    let v = x.matmul(blk.wv).add_bias(blk.bv);
    let scale = S::from_f64(1.0 / (hd as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = q.slice_cols(cols.clone());
        let kh = k.slice_cols(cols.clone());
        let vh = v.slice_cols(cols);
        let mut scores = qh.matmul(kh.transpose()).mul_scalar(scale);
        if let Some(m) = attn_mask {
            debug_assert_eq!(m.shape(), &[n, n]);
            scores = scores.add_const(m);
        }
        heads.push(scores.softmax().matmul(vh));
    }
    head_concat(tape, &heads).matmul(blk.wo).add_bias(blk.bo)
}

fn mlp<'t, S: Scalar>(x: Var<'t, S>, blk: &TransformerBlock<Var<'t, S>>) -> Var<'t, S> {
    x.matmul(blk.w_up).add_bias(blk.b_up).gelu().matmul(blk.w_down).add_bias(blk.b_down)
}

fn run_block<'t, S: Scalar>(
    tape: &'t Tape<S>,
    x: Var<'t, S>,
    blk: &TransformerBlock<Var<'t, S>>,
    n_heads: usize,
    attn_mask: Option<&Tensor<S>>,
    ctx: &mut PassCtx,
) -> Var<'t, S> {
    let a = attention(tape, x.layer_norm(blk.ln1_g, blk.ln1_b), blk, n_heads, attn_mask);
    let x = x.add(ctx.apply(a));
    let m = mlp(x.layer_norm(blk.ln2_g, blk.ln2_b), blk);
    x.add(ctx.apply(m))
}

pub struct EncodeArgs<'a, 't, S: Scalar> {
    pub image: ImageCond<'a, 't, S>,
    pub mask: &'a MaskSpec,
    pub text: TextCond<'a, 't, S>,
    /// Masked positions to drop from the encoder input (clamped to the
    /// masked count). Training passes use `cfg.drop_count()`; inference 0.
    pub drop_count: usize,
    /// Detach the encoder output: used on the first trainable pass of each
    /// cycle to keep the second pass the only one training the encoder.
    pub stop_grad_output: bool,
}

/// Joint encoder pass. Returns per-position features (kept image positions
/// then text positions) plus the kept-position index map.
pub fn encode<'t, S: Scalar>(
    tape: &'t Tape<S>,
    m: &Bound<'t, S>,
    cfg: &ModelConfig,
    args: EncodeArgs<'_, 't, S>,
    drop_rng: Option<&mut ChaCha8Rng>,
    ctx: &mut PassCtx,
) -> EncodeOut<'t, S> {
    let kk = cfg.k();
    assert_eq!(args.mask.len(), kk, "mask length {} vs K {kk}", args.mask.len());

    // Choose dropped masked positions.
    let masked = args.mask.masked_positions();
    let drop = args.drop_count.min(masked.len());
    let dropped: Vec<usize> = if drop == 0 {
        Vec::new()
    } else {
        let r = drop_rng.expect("encode: drop_count > 0 requires a drop rng");
        let picks = rand::seq::index::sample(r, masked.len(), drop);
        let mut d: Vec<usize> = picks.iter().map(|i| masked[i]).collect();
        d.sort_unstable();
        d
    };
    let kept: Vec<usize> = (0..kk).filter(|p| !dropped.contains(p)).collect();
    let n_img = kept.len();

    // Image embeddings: token rows for visible positions, MASK row for kept
    // masked positions, plus grid position embeddings.
    let img_part = match args.image {
        ImageCond::Tokens(toks) => {
            let ids: Vec<usize> = kept
                .iter()
                .map(|&p| {
                    if args.mask.is_masked(p) {
                        cfg.mask_token()
                    } else {
                        toks.as_slice()[p] as usize
                    }
                })
                .collect();
            m.t.img_embed.gather_rows(&ids)
        }
        ImageCond::Soft(soft) => {
            let sh = soft.shape();
            assert_eq!(
                sh,
                vec![kk, cfg.image_vocab],
                "soft image must be K x V_img, got {sh:?}"
            );
            let visible: Vec<usize> =
                kept.iter().copied().filter(|&p| !args.mask.is_masked(p)).collect();
            let kept_masked: Vec<usize> =
                kept.iter().copied().filter(|&p| args.mask.is_masked(p)).collect();
            let embed_main = m.t.img_embed.slice_rows(0..cfg.image_vocab);
            let pos_of = |p: usize| kept.iter().position(|&q| q == p).unwrap();
            let mut parts: Vec<Var<'t, S>> = Vec::new();
            if !visible.is_empty() {
                let rows = soft.gather_rows(&visible).matmul(embed_main);
                let at: Vec<usize> = visible.iter().map(|&p| pos_of(p)).collect();
                parts.push(rows.scatter_rows(&at, n_img));
            }
            if !kept_masked.is_empty() {
                let rows = m.t.img_embed.gather_rows(&vec![cfg.mask_token(); kept_masked.len()]);
                let at: Vec<usize> = kept_masked.iter().map(|&p| pos_of(p)).collect();
                parts.push(rows.scatter_rows(&at, n_img));
            }
            let mut acc = parts.remove(0);
            for p in parts {
                acc = acc.add(p);
            }
            acc
        }
    };
    let img_part = img_part.add(m.t.img_pos.gather_rows(&kept));

    // Text embeddings: EMPTY is a single dedicated learned token.
    let (txt_part, n_txt) = match args.text {
        TextCond::Empty => {
            let e = m.t.txt_embed.gather_rows(&[vocab::EMPTY as usize]);
            (e.add(m.t.txt_pos.gather_rows(&[0])), 1)
        }
        TextCond::Tokens(toks) => {
            assert!(
                toks.len() <= cfg.l(),
                "text length {} exceeds maximum {}",
                toks.len(),
                cfg.l()
            );
            assert!(!toks.is_empty(), "encode: empty text token list");
            let ids: Vec<usize> = toks.iter().map(|&t| t as usize).collect();
            let n = ids.len();
            let e = m.t.txt_embed.gather_rows(&ids);
            (e.add(m.t.txt_pos.gather_rows(&(0..n).collect::<Vec<_>>())), n)
        }
        TextCond::Soft(soft) => {
            let sh = soft.shape();
            assert_eq!(sh[1], cfg.text_vocab(), "soft text width {} vs V_txt", sh[1]);
            assert!(sh[0] <= cfg.l(), "text length {} exceeds maximum {}", sh[0], cfg.l());
            let n = sh[0];
            let e = soft.matmul(m.t.txt_embed);
            (e.add(m.t.txt_pos.gather_rows(&(0..n).collect::<Vec<_>>())), n)
        }
    };

    let x = Var::concat_rows(tape, &[img_part, txt_part]);
    let mut h = x;
    for blk in &m.t.encoder {
        h = run_block(tape, h, blk, cfg.n_heads, None, ctx);
    }
    let mut feats = h.layer_norm(m.t.enc_ln_g, m.t.enc_ln_b);
    if args.stop_grad_output {
        feats = feats.stop_gradient();
    }
    EncodeOut { feats, kept, n_img, n_txt }
}

/// Additive attention mask for the text decoder: feature positions attend
/// among themselves; text attends all features plus earlier text (causal).
fn text_decoder_mask<S: Scalar>(n_f: usize, n_t: usize) -> Tensor<S> {
    let n = n_f + n_t;
    let blocked = S::from_f64(-1e9);
    Tensor::from_fn(vec![n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let ok = if i < n_f { j < n_f } else { j < n_f || j <= i };
        if ok {
            S::zero()
        } else {
            blocked
        }
    })
}

/// Autoregressive text decoding: teacher-forced logits over V_txt for every
/// prefix position. The prefix must start with BOS; logits at position l
/// depend only on encoder features and tokens before l. Encoder features
/// pass through a gradient scale (`cfg.i2t_grad_scale`) on entry.
pub fn decode_text<'t, S: Scalar>(
    tape: &'t Tape<S>,
    m: &Bound<'t, S>,
    cfg: &ModelConfig,
    enc: &EncodeOut<'t, S>,
    prefix: &[u32],
    ctx: &mut PassCtx,
) -> Var<'t, S> {
    assert!(!prefix.is_empty() && prefix[0] == vocab::BOS, "prefix must start with BOS");
    assert!(
        prefix.len() <= cfg.l(),
        "prefix length {} exceeds maximum {}",
        prefix.len(),
        cfg.l()
    );
    let feats = enc.feats.scale_gradient(S::from_f64(cfg.i2t_grad_scale));
    let n_f = enc.n_img + enc.n_txt;
    let n_t = prefix.len();
    let ids: Vec<usize> = prefix.iter().map(|&t| t as usize).collect();
    let emb = m
        .t
        .txt_embed
        .gather_rows(&ids)
        .add(m.t.txt_pos.gather_rows(&(0..n_t).collect::<Vec<_>>()));
    let x = Var::concat_rows(tape, &[feats, emb]);
    let mask = text_decoder_mask::<S>(n_f, n_t);
    let mut h = x;
    for blk in &m.t.text_decoder {
        h = run_block(tape, h, blk, cfg.n_heads, Some(&mask), ctx);
    }
    h.layer_norm(m.t.txt_ln_g, m.t.txt_ln_b)
        .slice_rows(n_f..n_f + n_t)
        .matmul(m.t.txt_proj_w)
        .add_bias(m.t.txt_proj_b)
}

/// Parallel image decoding: re-inserts MASK embeddings at dropped positions,
/// self-attends over the full K-token grid and projects to V_img logits at
/// every position. Loss consumers use only masked positions.
pub fn decode_image<'t, S: Scalar>(
    tape: &'t Tape<S>,
    m: &Bound<'t, S>,
    cfg: &ModelConfig,
    enc: &EncodeOut<'t, S>,
    ctx: &mut PassCtx,
) -> Var<'t, S> {
    let kk = cfg.k();
    let kept_feats = enc.feats.slice_rows(0..enc.n_img);
    let mut parts: Vec<Var<'t, S>> = vec![kept_feats.scatter_rows(&enc.kept, kk)];
    let dropped: Vec<usize> = (0..kk).filter(|p| !enc.kept.contains(p)).collect();
    if !dropped.is_empty() {
        let rows = m.t.img_embed.gather_rows(&vec![cfg.mask_token(); dropped.len()]);
        let rows = rows.add(m.t.img_pos.gather_rows(&dropped));
        parts.push(rows.scatter_rows(&dropped, kk));
    }
    let mut h = parts.remove(0);
    for p in parts {
        h = h.add(p);
    }
    for blk in &m.t.image_decoder {
        h = run_block(tape, h, blk, cfg.n_heads, None, ctx);
    }
    h.layer_norm(m.t.img_ln_g, m.t.img_ln_b)
        .matmul(m.t.img_proj_w)
        .add_bias(m.t.img_proj_b)
}

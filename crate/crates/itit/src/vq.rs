//! Patch-based vector quantizer: a k-means codebook over 8x8 image patches,
//! frozen after fitting, standing in for a learned image tokenizer.

use std::collections::HashSet;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::rng;
use crate::synthdata::{Image, NUM_IMAGE_TOKENS, PATCH_DIM};

/// Fixed-length sequence of codebook indices for one image.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ImageTokens(Vec<u32>);

impl ImageTokens {
    pub fn new(indices: Vec<u32>, vocab: usize) -> Self {
        assert_eq!(indices.len(), NUM_IMAGE_TOKENS, "expected {NUM_IMAGE_TOKENS} tokens");
        for &i in &indices {
            assert!((i as usize) < vocab, "token {i} out of codebook range {vocab}");
        }
        ImageTokens(indices)
    }
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    /// vocab x PATCH_DIM entries, row-major.
    entries: Vec<f32>,
    vocab: usize,
    pub fit_seed: u64,
}

/// Per-iteration fit diagnostics.
#[derive(Clone, Debug)]
pub struct FitStats {
    pub iterations: usize,
    /// Mean within-cluster squared distance per patch vector, per iteration.
    pub distortion: Vec<f64>,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f32 {
    let mut s = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

fn nearest(entries: &[f32], vocab: usize, p: &[f32]) -> (usize, f32) {
    let mut best = 0usize;
    let mut best_d = f32::INFINITY;
    for k in 0..vocab {
        let d = sq_dist(p, &entries[k * PATCH_DIM..(k + 1) * PATCH_DIM]);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    (best, best_d)
}

impl Codebook {
    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn entry(&self, k: usize) -> &[f32] {
        &self.entries[k * PATCH_DIM..(k + 1) * PATCH_DIM]
    }

    /// Map each of the K patches to its nearest entry (Euclidean); ties break
    /// to the lowest index. Pure and deterministic.
    pub fn encode(&self, img: &Image) -> ImageTokens {
        let idx = img
            .patches()
            .iter()
            .map(|p| nearest(&self.entries, self.vocab, p).0 as u32)
            .collect();
        ImageTokens::new(idx, self.vocab)
    }

    /// Paste codeword patches into the token grid, clamped to [0,1].
    pub fn decode(&self, tokens: &ImageTokens) -> Image {
        let patches: Vec<Vec<f32>> = tokens
            .as_slice()
            .iter()
            .map(|&t| {
                assert!(
                    (t as usize) < self.vocab,
                    "token {t} out of codebook range {}",
                    self.vocab
                );
                self.entry(t as usize).to_vec()
            })
            .collect();
        Image::from_patches(&patches)
    }

    /// Encode a batch of images (parallel under the default feature).
    pub fn encode_batch(&self, imgs: &[Image]) -> Vec<ImageTokens> {
        par::map(imgs, |i| self.encode(i))
    }

    // -- binary file format --------------------------------------------------

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::with_capacity(20 + self.entries.len() * 4);
        payload.extend_from_slice(&1u32.to_le_bytes()); // format version
        payload.extend_from_slice(&(self.vocab as u32).to_le_bytes());
        payload.extend_from_slice(&(PATCH_DIM as u32).to_le_bytes());
        payload.extend_from_slice(&self.fit_seed.to_le_bytes());
        for &e in &self.entries {
            payload.extend_from_slice(&e.to_le_bytes());
        }
        let mut out = b"ITVQ".to_vec();
        out.extend_from_slice(&payload);
        out.extend_from_slice(&fnv64(&payload).to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8], file: &str) -> Result<Self> {
        let err = |msg: String| Error::Format { file: file.to_string(), msg };
        if bytes.len() < 4 + 20 + 8 || &bytes[..4] != b"ITVQ" {
            return Err(err("missing ITVQ magic".into()));
        }
        let payload = &bytes[4..bytes.len() - 8];
        let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if fnv64(payload) != stored {
            return Err(err("checksum mismatch".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(payload[o..o + 4].try_into().unwrap());
        let version = u32_at(0);
        if version != 1 {
            return Err(err(format!("unsupported codebook version {version}")));
        }
        let vocab = u32_at(4) as usize;
        let dim = u32_at(8) as usize;
        if dim != PATCH_DIM {
            return Err(err(format!("patch dim {dim} does not match {PATCH_DIM}")));
        }
        let fit_seed = u64::from_le_bytes(payload[12..20].try_into().unwrap());
        let body = &payload[20..];
        if body.len() != vocab * PATCH_DIM * 4 {
            return Err(err(format!(
                "payload holds {} bytes, expected {}",
                body.len(),
                vocab * PATCH_DIM * 4
            )));
        }
        let entries = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Codebook { entries, vocab, fit_seed })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

/// FNV-1a 64-bit, used as the payload checksum for binary formats.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Lloyd's k-means over all patches of the input images with k-means++
/// initialization: at most 50 iterations or convergence when fewer than 0.1%
/// of assignments change. Empty clusters are re-seeded from the
/// highest-distortion patch. Single-threaded and deterministic given
/// (images, vocab, seed).
pub fn fit_codebook(images: &[Image], vocab: usize, seed: u64) -> Result<(Codebook, FitStats)> {
    let mut patches: Vec<Vec<f32>> = Vec::with_capacity(images.len() * NUM_IMAGE_TOKENS);
    for img in images {
        patches.extend(img.patches());
    }
    let distinct: HashSet<Vec<u32>> =
        patches.iter().map(|p| p.iter().map(|x| x.to_bits()).collect()).collect();
    if distinct.len() < vocab {
        return Err(Error::Data(format!(
            "need at least {vocab} distinct patches to fit, found {}",
            distinct.len()
        )));
    }
    let n = patches.len();
    let mut r = rng::stream(seed, &[rng::tag::SCENE, 0x6b6d]);

    // k-means++ init.
    let mut entries = vec![0.0f32; vocab * PATCH_DIM];
    let first = r.gen_range(0..n);
    entries[..PATCH_DIM].copy_from_slice(&patches[first]);
    let mut d2: Vec<f32> = patches.iter().map(|p| sq_dist(p, &patches[first])).collect();
    for k in 1..vocab {
        let total: f64 = d2.iter().map(|&d| d as f64).sum();
        let pick = if total <= 0.0 {
            0
        } else {
            let mut t = r.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                t -= d as f64;
                if t <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        entries[k * PATCH_DIM..(k + 1) * PATCH_DIM].copy_from_slice(&patches[pick]);
        for (i, p) in patches.iter().enumerate() {
            let d = sq_dist(p, &patches[pick]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    // Lloyd iterations.
    let mut assign = vec![usize::MAX; n];
    let mut stats = FitStats { iterations: 0, distortion: Vec::new() };
    for _ in 0..50 {
        let mut changed = 0usize;
        let mut dist_sum = 0.0f64;
        let mut per_patch_d = vec![0.0f32; n];
        for (i, p) in patches.iter().enumerate() {
            let (k, d) = nearest(&entries, vocab, p);
            per_patch_d[i] = d;
            dist_sum += d as f64;
            if assign[i] != k {
                assign[i] = k;
                changed += 1;
            }
        }
        stats.iterations += 1;
        stats.distortion.push(dist_sum / n as f64);

        let mut sums = vec![0.0f64; vocab * PATCH_DIM];
        let mut counts = vec![0usize; vocab];
        for (i, p) in patches.iter().enumerate() {
            let k = assign[i];
            counts[k] += 1;
            for (s, &x) in sums[k * PATCH_DIM..(k + 1) * PATCH_DIM].iter_mut().zip(p) {
                *s += x as f64;
            }
        }
        for k in 0..vocab {
            if counts[k] == 0 {
                let worst = per_patch_d
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                    .map(|(i, _)| i)
                    .unwrap();
                entries[k * PATCH_DIM..(k + 1) * PATCH_DIM].copy_from_slice(&patches[worst]);
                per_patch_d[worst] = 0.0;
            } else {
                for (e, &s) in entries[k * PATCH_DIM..(k + 1) * PATCH_DIM]
                    .iter_mut()
                    .zip(&sums[k * PATCH_DIM..(k + 1) * PATCH_DIM])
                {
                    *e = (s / counts[k] as f64) as f32;
                }
            }
        }
        if changed * 1000 < n {
            break;
        }
    }

    // Deduplicate identical entries: replace duplicates with unused distinct
    // patches so nearest-neighbor ties cannot alias tokens.
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    let mut spare: Vec<&Vec<f32>> = Vec::new();
    let mut spare_used = 0usize;
    for k in 0..vocab {
        let key: Vec<u32> =
            entries[k * PATCH_DIM..(k + 1) * PATCH_DIM].iter().map(|x| x.to_bits()).collect();
        if !seen.insert(key) {
            if spare.is_empty() {
                let mut pool = HashSet::new();
                for e in entries.chunks_exact(PATCH_DIM) {
                    pool.insert(e.iter().map(|x| x.to_bits()).collect::<Vec<u32>>());
                }
                let mut picked = HashSet::new();
                for p in &patches {
                    let key: Vec<u32> = p.iter().map(|x| x.to_bits()).collect();
                    if !pool.contains(&key) && picked.insert(key) {
                        spare.push(p);
                    }
                }
            }
            let rep = spare[spare_used];
            spare_used += 1;
            entries[k * PATCH_DIM..(k + 1) * PATCH_DIM].copy_from_slice(rep);
            seen.insert(rep.iter().map(|x| x.to_bits()).collect());
        }
    }

    Ok((Codebook { entries, vocab, fit_seed: seed }, stats))
}

/// Usage histogram and exp-entropy of an empirical token distribution.
pub fn codebook_stats<'a>(
    streams: impl IntoIterator<Item = &'a ImageTokens>,
    vocab: usize,
) -> (Vec<u64>, f64) {
    let mut counts = vec![0u64; vocab];
    let mut total = 0u64;
    for t in streams {
        for &i in t.as_slice() {
            counts[i as usize] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return (counts, 0.0);
    }
    let mut h = 0.0f64;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    (counts, h.exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, tag};
    use crate::synthdata::{render, sample_scene};

    fn corpus(n: usize, seed: u64) -> Vec<Image> {
        let mut r = rng::stream(seed, &[tag::SCENE]);
        (0..n).map(|_| render(&sample_scene(&mut r))).collect()
    }

    #[test]
    fn separable_patches_fit_exactly() {
        // Images tiled from `vocab` distinct constant patches: zero error.
        let vocab = 32;
        let imgs: Vec<Image> = (0..3)
            .map(|i| {
                let patches: Vec<Vec<f32>> = (0..NUM_IMAGE_TOKENS)
                    .map(|t| {
                        let v = ((i * NUM_IMAGE_TOKENS + t) % vocab) as f32 / vocab as f32;
                        vec![v; PATCH_DIM]
                    })
                    .collect();
                Image::from_patches(&patches)
            })
            .collect();
        let (cb, stats) = fit_codebook(&imgs, vocab, 1).unwrap();
        assert!(*stats.distortion.last().unwrap() < 1e-12);
        for img in &imgs {
            let rec = cb.decode(&cb.encode(img));
            assert!(img.pixels.iter().zip(&rec.pixels).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn distortion_is_non_increasing() {
        let imgs = corpus(300, 5);
        let (_, stats) = fit_codebook(&imgs, 128, 2).unwrap();
        for w in stats.distortion.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "Lloyd distortion rose: {w:?}");
        }
    }

    #[test]
    fn fit_is_deterministic_and_entries_distinct() {
        let imgs = corpus(300, 6);
        let (a, _) = fit_codebook(&imgs, 128, 3).unwrap();
        let (b, _) = fit_codebook(&imgs, 128, 3).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<Vec<u32>> = (0..a.vocab())
            .map(|k| a.entry(k).iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), a.vocab(), "codebook entries must be distinct");
    }

    #[test]
    fn rejects_insufficient_distinct_patches() {
        let imgs = vec![Image::background()];
        match fit_codebook(&imgs, 128, 1) {
            Err(Error::Data(msg)) => assert!(msg.contains("found 1"), "{msg}"),
            other => panic!("expected rejection, got {other:?}"),
        }
    }

    #[test]
    fn encode_decode_identity_on_token_space() {
        let imgs = corpus(400, 7);
        let (cb, _) = fit_codebook(&imgs, 128, 4).unwrap();
        let mut r = rng::stream(9, &[1]);
        for _ in 0..200 {
            let toks = ImageTokens::new(
                (0..NUM_IMAGE_TOKENS).map(|_| r.gen_range(0..128u32)).collect(),
                128,
            );
            assert_eq!(cb.encode(&cb.decode(&toks)), toks);
        }
        // Decoded pixels stay in range.
        let toks = ImageTokens::new(vec![5; NUM_IMAGE_TOKENS], 128);
        let img = cb.decode(&toks);
        assert!(img.pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        // All-same-token input tiles one patch.
        let p0 = img.patch(0, 0);
        for pr in 0..4 {
            for pc in 0..4 {
                assert_eq!(img.patch(pr, pc), p0);
            }
        }
    }

    #[test]
    fn reconstruction_error_is_small_on_scene_corpus() {
        let imgs = corpus(2000, 8);
        let (cb, _) = fit_codebook(&imgs, 128, 5).unwrap();
        let mut mse_sum = 0.0f64;
        for img in &imgs {
            let rec = cb.decode(&cb.encode(img));
            let mse: f64 = img
                .pixels
                .iter()
                .zip(&rec.pixels)
                .map(|(&a, &b)| ((a - b) as f64).powi(2))
                .sum::<f64>()
                / img.pixels.len() as f64;
            mse_sum += mse;
        }
        let mean_mse = mse_sum / imgs.len() as f64;
        assert!(mean_mse <= 0.01, "reconstruction MSE {mean_mse}");
    }

    #[test]
    fn stats_boundaries() {
        let uniform: Vec<ImageTokens> = (0..8)
            .map(|i| {
                ImageTokens::new((0..16).map(|t| (i * 16 + t) as u32).collect(), 128)
            })
            .collect();
        let (counts, ppl) = codebook_stats(&uniform, 128);
        assert_eq!(counts.iter().sum::<u64>(), 128);
        assert!((ppl - 128.0).abs() < 1e-9, "uniform over 128 entries: ppl {ppl}");
        let single = [ImageTokens::new(vec![3; 16], 128)];
        let (_, ppl1) = codebook_stats(&single, 128);
        assert!((ppl1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn file_roundtrip_bit_exact_and_checksummed() {
        let imgs = corpus(200, 9);
        let (cb, _) = fit_codebook(&imgs, 128, 6).unwrap();
        let bytes = cb.to_bytes();
        let back = Codebook::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(back, cb);
        assert_eq!(back.to_bytes(), bytes);
        let mut bad = bytes.clone();
        let n = bad.len();
        bad[n / 2] ^= 0x40;
        assert!(Codebook::from_bytes(&bad, "mem").is_err());
        assert!(Codebook::from_bytes(&bytes[..n - 9], "mem").is_err());
    }
}

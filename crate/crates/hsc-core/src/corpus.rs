//! Training and evaluation corpora: a seeded synthetic texture generator
//! with exact per-pixel saliency, plus directory loading of PPM images with
//! optional same-stem PGM saliency maps.

use crate::error::{Error, Result};
use crate::image_io::{read_pgm, read_ppm};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::path::PathBuf;

pub const TEXTURE_SIZE: usize = 64;
const S: usize = TEXTURE_SIZE;

/// One image plus its ground-truth saliency, when known.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    /// `[3, h, w]` planes in `[0, 1]`.
    pub image: Vec<f64>,
    pub w: usize,
    pub h: usize,
    /// Per-pixel map, 255 = salient; `None` when the source has no map.
    pub saliency_px: Option<Vec<u8>>,
    pub name: String,
}

/// Parse a corpus URI: `synthetic:<count>` generates textures, anything else
/// is a directory of `.ppm` files with optional `<stem>.pgm` saliency.
pub fn load_corpus(uri: &str, seed: u64) -> Result<Vec<CorpusItem>> {
    if let Some(n) = uri.strip_prefix("synthetic:") {
        let count: usize =
            n.parse().map_err(|_| Error::Config(format!("bad synthetic corpus count '{n}'")))?;
        if count == 0 {
            return Err(Error::Config("synthetic corpus needs at least one image".into()));
        }
        return Ok(synthetic_corpus(count, seed));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(uri)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "ppm"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no .ppm images in {uri}")));
    }
    let mut items = Vec::with_capacity(paths.len());
    for p in paths {
        let (image, w, h) = read_ppm(&p)?;
        let sal_path = p.with_extension("pgm");
        let saliency_px = if sal_path.exists() {
            let (map, sw, sh) = read_pgm(&sal_path)?;
            if (sw, sh) != (w, h) {
                return Err(Error::shape(&[h, w], &[sh, sw], format!("saliency dims for {}", p.display())));
            }
            Some(map)
        } else {
            None
        };
        let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        items.push(CorpusItem { image, w, h, saliency_px, name });
    }
    Ok(items)
}

/// Deterministic texture corpus cycling through four generators.
pub fn synthetic_corpus(count: usize, seed: u64) -> Vec<CorpusItem> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let (image, saliency) = match i % 4 {
                0 => gradient(&mut rng),
                1 => checker(&mut rng),
                2 => blobs(&mut rng),
                _ => pasted(&mut rng),
            };
            CorpusItem {
                image,
                w: S,
                h: S,
                saliency_px: Some(saliency),
                name: format!("synthetic-{i:04}"),
            }
        })
        .collect()
}

/// Texture with statistically identical content in both halves, one half
/// declared salient. Used by steering tests: any bit or quality difference
/// between the halves must come from the mask, not the content.
pub fn half_split_item(seed: u64) -> CorpusItem {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let salient_left = rng.gen_bool(0.5);
    let cell = 8;
    let mut image = vec![0.0; 3 * S * S];
    for c in 0..3 {
        for y in 0..S {
            for x in 0..S {
                let base = if (x / cell + y / cell) % 2 == 0 { 0.35 } else { 0.65 };
                let v: f64 = base + 0.25 * (rng.gen::<f64>() - 0.5);
                image[(c * S + y) * S + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    add_block_noise(&mut rng, &mut image, 4, 0.5);
    let mut saliency = vec![0u8; S * S];
    for y in 0..S {
        for x in 0..S {
            let left = x < S / 2;
            if left == salient_left {
                saliency[y * S + x] = 255;
            }
        }
    }
    CorpusItem { image, w: S, h: S, saliency_px: Some(saliency), name: format!("halfsplit-{seed}") }
}

fn idx(c: usize, y: usize, x: usize) -> usize {
    (c * S + y) * S + x
}

fn rand_color(rng: &mut ChaCha12Rng) -> [f64; 3] {
    // Mid-range colors leave headroom for the additive noise fields.
    [0.2 + 0.6 * rng.gen::<f64>(), 0.2 + 0.6 * rng.gen::<f64>(), 0.2 + 0.6 * rng.gen::<f64>()]
}

/// Random 8-aligned rectangle, never empty and never the whole frame.
fn rect_saliency(rng: &mut ChaCha12Rng) -> Vec<u8> {
    let x0 = 8 * rng.gen_range(0..=4usize);
    let y0 = 8 * rng.gen_range(0..=4usize);
    let w = 8 * rng.gen_range(2..=4usize);
    let h = 8 * rng.gen_range(2..=4usize);
    let mut map = vec![0u8; S * S];
    for y in y0..(y0 + h).min(S) {
        for x in x0..(x0 + w).min(S) {
            map[y * S + x] = 255;
        }
    }
    map
}

fn add_noise(rng: &mut ChaCha12Rng, image: &mut [f64], amplitude: f64) {
    for v in image.iter_mut() {
        *v = (*v + amplitude * (rng.gen::<f64>() - 0.5)).clamp(0.0, 1.0);
    }
}

/// One random offset per channel and `cell`x`cell` square, so nearby sites
/// carry independent content that conditioning cannot predict away.
fn add_block_noise(rng: &mut ChaCha12Rng, image: &mut [f64], cell: usize, amplitude: f64) {
    let cells = S / cell;
    for c in 0..3 {
        for by in 0..cells {
            for bx in 0..cells {
                let off = amplitude * (rng.gen::<f64>() - 0.5);
                for y in by * cell..(by + 1) * cell {
                    for x in bx * cell..(bx + 1) * cell {
                        let v = &mut image[idx(c, y, x)];
                        *v = (*v + off).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

fn gradient_base(rng: &mut ChaCha12Rng) -> Vec<f64> {
    let angle = rng.gen::<f64>() * std::f64::consts::TAU;
    let (dx, dy) = (angle.cos(), angle.sin());
    let c0 = rand_color(rng);
    let c1 = rand_color(rng);
    let mut image = vec![0.0; 3 * S * S];
    for y in 0..S {
        for x in 0..S {
            let fx = x as f64 / (S - 1) as f64 - 0.5;
            let fy = y as f64 / (S - 1) as f64 - 0.5;
            let t = (0.5 + (fx * dx + fy * dy)).clamp(0.0, 1.0);
            for c in 0..3 {
                image[idx(c, y, x)] = c0[c] + t * (c1[c] - c0[c]);
            }
        }
    }
    image
}

fn gradient(rng: &mut ChaCha12Rng) -> (Vec<f64>, Vec<u8>) {
    let mut image = gradient_base(rng);
    add_block_noise(rng, &mut image, 4, 0.75);
    let amp = rng.gen_range(0.05..0.15);
    add_noise(rng, &mut image, amp);
    let sal = rect_saliency(rng);
    (image, sal)
}

fn checker_base(rng: &mut ChaCha12Rng) -> Vec<f64> {
    let cell = *[4usize, 8, 16].get(rng.gen_range(0..3)).unwrap();
    let (ox, oy) = (rng.gen_range(0..cell), rng.gen_range(0..cell));
    let c0 = rand_color(rng);
    let c1 = rand_color(rng);
    let mut image = vec![0.0; 3 * S * S];
    for y in 0..S {
        for x in 0..S {
            let on = ((x + ox) / cell + (y + oy) / cell) % 2 == 0;
            let col = if on { &c0 } else { &c1 };
            for c in 0..3 {
                image[idx(c, y, x)] = col[c];
            }
        }
    }
    image
}

fn checker(rng: &mut ChaCha12Rng) -> (Vec<f64>, Vec<u8>) {
    let mut image = checker_base(rng);
    add_block_noise(rng, &mut image, 4, 0.75);
    let amp = rng.gen_range(0.05..0.2);
    add_noise(rng, &mut image, amp);
    let sal = rect_saliency(rng);
    (image, sal)
}

fn blobs(rng: &mut ChaCha12Rng) -> (Vec<f64>, Vec<u8>) {
    let base = rand_color(rng);
    let mut image = vec![0.0; 3 * S * S];
    for c in 0..3 {
        for i in 0..S * S {
            image[c * S * S + i] = base[c];
        }
    }
    let mut sal = vec![0u8; S * S];
    let n = rng.gen_range(1..=3usize);
    for _ in 0..n {
        let cx = rng.gen_range(8.0..(S - 8) as f64);
        let cy = rng.gen_range(8.0..(S - 8) as f64);
        let sigma = rng.gen_range(4.0..10.0);
        let col = rand_color(rng);
        for y in 0..S {
            for x in 0..S {
                let r2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let g = (-r2 / (2.0 * sigma * sigma)).exp();
                for c in 0..3 {
                    let v = &mut image[idx(c, y, x)];
                    *v = (*v + g * (col[c] - base[c])).clamp(0.0, 1.0);
                }
                if r2.sqrt() <= 2.0 * sigma {
                    sal[y * S + x] = 255;
                }
            }
        }
    }
    add_block_noise(rng, &mut image, 4, 0.75);
    let amp = rng.gen_range(0.02..0.1);
    add_noise(rng, &mut image, amp);
    (image, sal)
}

fn pasted(rng: &mut ChaCha12Rng) -> (Vec<f64>, Vec<u8>) {
    let mut image = if rng.gen_bool(0.5) { gradient_base(rng) } else { checker_base(rng) };
    let sal = rect_saliency(rng);
    // Fill the salient rectangle with a busier second texture.
    let c0 = rand_color(rng);
    let c1 = rand_color(rng);
    let cell = 1 + rng.gen_range(1..4usize);
    for y in 0..S {
        for x in 0..S {
            if sal[y * S + x] == 0 {
                continue;
            }
            let on = (x / cell + y / cell) % 2 == 0;
            let col = if on { &c0 } else { &c1 };
            for c in 0..3 {
                let noise = 0.2 * (rng.gen::<f64>() - 0.5);
                image[idx(c, y, x)] = (col[c] + noise).clamp(0.0, 1.0);
            }
        }
    }
    add_block_noise(rng, &mut image, 4, 0.75);
    let amp = rng.gen_range(0.05..0.15);
    add_noise(rng, &mut image, amp);
    (image, sal)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::{write_ppm, write_ppm_bytes};

    #[test]
    fn generation_is_deterministic_per_seed() {
        let a = synthetic_corpus(8, 3);
        let b = synthetic_corpus(8, 3);
        let c = synthetic_corpus(8, 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image, y.image);
            assert_eq!(x.saliency_px, y.saliency_px);
        }
        assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
    }

    #[test]
    fn textures_are_in_range_with_valid_saliency() {
        for item in synthetic_corpus(12, 9) {
            assert_eq!((item.w, item.h), (S, S));
            assert_eq!(item.image.len(), 3 * S * S);
            assert!(item.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let sal = item.saliency_px.as_ref().unwrap();
            assert_eq!(sal.len(), S * S);
            assert!(sal.iter().all(|&v| v == 0 || v == 255));
            let frac = sal.iter().filter(|&&v| v > 0).count() as f64 / sal.len() as f64;
            assert!(frac > 0.0 && frac < 1.0, "saliency fraction {frac} in {}", item.name);
        }
    }

    #[test]
    fn half_split_halves_match_statistically() {
        let item = half_split_item(5);
        let sal = item.saliency_px.as_ref().unwrap();
        let frac = sal.iter().filter(|&&v| v > 0).count() as f64 / sal.len() as f64;
        assert_eq!(frac, 0.5);
        let (mut ms, mut mn, mut ns, mut nn) = (0.0, 0.0, 0.0, 0.0);
        for c in 0..3 {
            for i in 0..S * S {
                let v = item.image[c * S * S + i];
                if sal[i] > 0 {
                    ms += v;
                    ns += 1.0;
                } else {
                    mn += v;
                    nn += 1.0;
                }
            }
        }
        let diff = (ms / ns - mn / nn).abs();
        assert!(diff < 0.05, "half means differ by {diff}");
    }

    #[test]
    fn synthetic_uri_parses_and_bad_counts_fail() {
        assert_eq!(load_corpus("synthetic:5", 1).unwrap().len(), 5);
        assert!(load_corpus("synthetic:0", 1).is_err());
        assert!(load_corpus("synthetic:x", 1).is_err());
    }

    #[test]
    fn directory_corpus_loads_sorted_with_optional_saliency() {
        let dir = tempfile::tempdir().unwrap();
        let img = synthetic_corpus(2, 11);
        write_ppm(dir.path().join("b.ppm"), &img[0].image, S, S).unwrap();
        write_ppm(dir.path().join("a.ppm"), &img[1].image, S, S).unwrap();
        // saliency sidecar for a.ppm only, as a white PGM
        let sal_bytes: Vec<u8> = format!("P5\n{S} {S}\n255\n")
            .into_bytes()
            .into_iter()
            .chain(std::iter::repeat(255u8).take(S * S))
            .collect();
        std::fs::write(dir.path().join("a.pgm"), sal_bytes).unwrap();
        let items = load_corpus(dir.path().to_str().unwrap(), 0).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].name, "a");
        assert!(items[0].saliency_px.is_some());
        assert!(items[1].saliency_px.is_none());
        // round trip through 8-bit quantization, so compare to re-read bytes
        let rt = write_ppm_bytes(&img[0].image, S, S).unwrap();
        let (back, _, _) = crate::image_io::read_ppm_bytes(&rt).unwrap();
        assert_eq!(items[1].image, back, "items[1] is b.ppm, written from img[0]");
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_corpus(dir.path().to_str().unwrap(), 0).is_err());
    }
}

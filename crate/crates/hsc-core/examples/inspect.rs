use hsc_core::checkpoint::Checkpoint;
use hsc_core::codec::Codec;
use hsc_core::corpus::load_corpus;
use hsc_core::metrics::psnr;

fn main() {
    let mut args = std::env::args().skip(1);
    let ckpt = args.next().expect("usage: inspect CKPT [count] [seed]");
    let count: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(20);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(999);
    let codec = Codec::from_checkpoint(&Checkpoint::load(&ckpt).unwrap()).unwrap();
    let items = load_corpus(&format!("synthetic:{count}"), seed).unwrap();
    let (mut sb, mut se, mut sk, mut s2, mut sp) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for it in &items {
        let out = codec.compress(&it.image, it.w, it.h, it.saliency_px.as_deref()).unwrap();
        let dec = codec.decompress(&out.bitstream).unwrap();
        let share = out.stats.stage2_bits as f64
            / (out.stats.stage1_bits + out.stats.stage2_bits).max(1) as f64;
        let p = psnr(&it.image, &dec.image).unwrap();
        println!(
            "{}: bpp {:.4} est {:.4} kept {:.3} s2share {:.3} psnr {:.2}",
            it.name, out.stats.bpp, out.stats.rate_estimate_bpp, out.stats.kept_fraction, share, p
        );
        sb += out.stats.bpp;
        se += out.stats.rate_estimate_bpp;
        sk += out.stats.kept_fraction;
        s2 += share;
        sp += p;
    }
    let n = items.len() as f64;
    println!(
        "MEAN bpp {:.4} est {:.4} kept {:.3} s2share {:.3} psnr {:.2}",
        sb / n, se / n, sk / n, s2 / n, sp / n
    );
}

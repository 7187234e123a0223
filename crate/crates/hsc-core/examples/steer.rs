use hsc_core::checkpoint::Checkpoint;
use hsc_core::codec::Codec;
use hsc_core::corpus::half_split_item;

fn region_psnr(a: &[f64], b: &[f64], mask: &[u8], want: bool) -> f64 {
    let mut se = 0.0;
    let mut n = 0usize;
    let px = mask.len();
    for c in 0..3 {
        for i in 0..px {
            if (mask[i] >= 128) == want {
                let d = a[c * px + i] - b[c * px + i];
                se += d * d;
                n += 1;
            }
        }
    }
    -10.0 * (se / n as f64).log10()
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let ck = Checkpoint::load(&args[1]).unwrap();
    let codec = Codec::from_checkpoint(&ck).unwrap();
    let n: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(20);
    let (mut bit_wins, mut psnr_wins) = (0, 0);
    for i in 0..n {
        let item = half_split_item(5000 + i as u64);
        let sal_px = item.saliency_px.as_deref().unwrap();
        let out = codec.compress(&item.image, item.w, item.h, Some(sal_px)).unwrap();
        let dec = codec.decompress(&out.bitstream).unwrap();
        let sal = &out.stats.saliency;
        let sites = sal.h * sal.w;
        let c1 = out.stats.stage1_site_bits.len() / sites;
        let (mut bs, mut bn, mut ns, mut nn) = (0.0, 0.0, 0usize, 0usize);
        for s in 0..sites {
            let b: f64 = (0..c1).map(|c| out.stats.stage1_site_bits[c * sites + s]).sum();
            if sal.data[s] > 0 {
                bs += b;
                ns += 1;
            } else {
                bn += b;
                nn += 1;
            }
        }
        let (ms, mn) = (bs / ns as f64, bn / nn as f64);
        let ps = region_psnr(&item.image, &dec.image, sal_px, true);
        let pn = region_psnr(&item.image, &dec.image, sal_px, false);
        if ms > mn { bit_wins += 1; }
        if ps > pn { psnr_wins += 1; }
        println!(
            "{i:2} bits/site sal {ms:6.2} non {mn:6.2} | psnr sal {ps:5.2} non {pn:5.2} | kept {:.3}",
            out.stats.kept_fraction
        );
    }
    println!("bit_wins {bit_wins}/{n} psnr_wins {psnr_wins}/{n}");
}

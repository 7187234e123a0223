//! Throwaway diagnostic: overfit one synthetic texture and print the loss
//! trajectory. Usage: overfit [steps] [lr]

use hsc_core::codec::Codec;
use hsc_core::config::{CodecConfig, TrainConfig};
use hsc_core::corpus::synthetic_corpus;
use hsc_core::mask::SaliencyMask;
use hsc_core::tape::Tape;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let steps: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(150);
    let lr: f64 = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4e-3);
    let cfg = CodecConfig::default();
    let tc = TrainConfig::default();
    let mut codec = Codec::new(cfg).unwrap();
    let item = &synthetic_corpus(4, 77)[1];
    let sal = SaliencyMask::all_ones(item.h / 8, item.w / 8);
    let t0 = std::time::Instant::now();
    for step in 0..steps {
        let mut tape = Tape::new();
        let vars = codec.params.bind(&mut tape).unwrap();
        let out = codec
            .train_forward(&mut tape, &vars, &item.image, item.h, item.w, &sal, &tc)
            .unwrap();
        tape.backward(out.loss).unwrap();
        let mut acc = codec.params.zero_grads();
        codec.params.accumulate(&tape, &vars, &mut acc);
        codec.params.adam_step(&acc, lr, Default::default()).unwrap();
        if step % 10 == 0 || step == steps - 1 {
            let psnr = -10.0 * out.mse.log10();
            println!(
                "step {step:4} loss {:9.4} rate {:.4} mse {:.5} psnr {psnr:6.2}",
                tape.value(out.loss),
                out.rate_bpp,
                out.mse
            );
        }
    }
    println!("elapsed {:.1}s", t0.elapsed().as_secs_f64());
}

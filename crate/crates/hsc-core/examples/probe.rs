use hsc_core::config::{CodecConfig, TrainConfig};
use hsc_core::trainer::train;

fn main() {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(1);
    let corpus = args.next().unwrap_or_else(|| "synthetic:500".into());
    let out = args.next().unwrap_or_else(|| "/tmp/probe".into());
    let cfg = CodecConfig::default();
    let tc = TrainConfig { epochs, corpus, ..TrainConfig::default() };
    let t0 = std::time::Instant::now();
    match train(&cfg, &tc, std::path::Path::new(&out)) {
        Ok(report) => {
            for s in &report.steps {
                println!(
                    "step {:3} epoch {} lr {:.1e} loss {:8.4} rate {:.4} mse {:.5} dpl {:.5} aux {:.5}",
                    s.step, s.epoch, s.lr, s.loss, s.rate_bpp, s.mse, s.dpl, s.aux
                );
            }
            println!("final_mean_bpp {:.4} elapsed {:.1?}", report.final_mean_bpp, t0.elapsed());
        }
        Err(e) => {
            println!("TRAIN ERROR after {:.1?}: {e}", t0.elapsed());
            std::process::exit(1);
        }
    }
}

//! `hsc`: train, compress, decompress, evaluate, sweep, and score the codec.
//!
//! Exit codes: 1 usage or bad config, 2 I/O, 3 malformed or mismatched
//! artifacts, 4 numerical failures (divergence, degenerate fits).

use std::fs;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use hsc_core::afc::{
    fit_channel_weights, load_records, record_features, twoafc_score, twoafc_score_from,
    weighted_tap_distance,
};
use hsc_core::checkpoint::Checkpoint;
use hsc_core::codec::{Bitstream, Codec};
use hsc_core::config::{apply_pairs, parse_kv, CodecConfig, TrainConfig};
use hsc_core::corpus::load_corpus;
use hsc_core::dpl::ChannelWeights;
use hsc_core::error::Error;
use hsc_core::image_io::{read_pgm, read_ppm, write_ppm};
use hsc_core::metrics::{ms_ssim, psnr};
use hsc_core::trainer::{eval, rd_sweep, train, write_eval_csv};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "hsc", version, about = "hierarchical saliency-driven image codec")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Config resolution shared by every subcommand: defaults, then the config
/// file, then inline --set pairs, then --seed. Commands that load a trained
/// model take their architecture from the checkpoint instead.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Key=value config file; # starts a comment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Inline config override, repeatable (e.g. --set c1=8).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Model seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<(CodecConfig, TrainConfig)> {
        let mut codec = CodecConfig::default();
        let mut tc = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path)?;
            apply_pairs(&mut codec, &mut tc, &parse_kv(&text)?)?;
        }
        let mut inline = Vec::with_capacity(self.set.len());
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
            inline.push((k.trim().to_string(), v.trim().to_string()));
        }
        apply_pairs(&mut codec, &mut tc, &inline)?;
        if let Some(seed) = self.seed {
            codec.seed = seed;
        }
        Ok((codec, tc))
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes model.ckpt, per-epoch checkpoints, and a step log.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Compress a PPM image to a bitstream.
    Compress {
        image: PathBuf,
        /// Trained model checkpoint.
        #[arg(long, short)]
        model: PathBuf,
        /// Output path; defaults to the image with extension .hsc.
        #[arg(long, short)]
        out: Option<PathBuf>,
        /// Saliency map (PGM at image resolution, >=128 marks salient).
        #[arg(long)]
        saliency: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Decode a bitstream back to a PPM image.
    Decompress {
        bitstream: PathBuf,
        #[arg(long, short)]
        model: PathBuf,
        /// Output path; defaults to the bitstream with extension .dec.ppm.
        #[arg(long, short)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compress and decode a corpus, writing per-image metrics to CSV.
    Eval {
        /// Corpus: a directory of PPMs or synthetic:<count>.
        corpus: String,
        #[arg(long, short)]
        model: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train or reuse one model per point and write an R-D curve.
    Sweep {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        out: PathBuf,
        /// Semicolon-separated override groups, one per sweep point,
        /// e.g. "target_bpp=0.2,c1=8;target_bpp=0.4,c1=12".
        #[arg(long)]
        points: String,
        /// Corpus every point is measured on.
        #[arg(long, default_value = "synthetic:50")]
        eval_corpus: String,
    },
    /// Fit perceptual channel weights on a 2AFC dataset.
    FitMetric {
        /// Directory of 2AFC records (JSON sidecars plus PPMs).
        dataset: PathBuf,
        #[arg(long, short)]
        model: PathBuf,
        /// Output weights file (checkpoint format).
        #[arg(long, short)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a metric's agreement with human 2AFC judgements.
    #[command(name = "score-2afc")]
    Score2Afc {
        dataset: PathBuf,
        #[arg(long, short)]
        model: PathBuf,
        /// Metric: psnr, ms-ssim, or dpl.
        #[arg(long, default_value = "dpl")]
        metric: String,
        /// Fitted channel weights for the dpl metric.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Io(_) => 2,
        Error::Format(_) | Error::DigestMismatch { .. } | Error::ChecksumMismatch { .. } | Error::Shape { .. } => 3,
        Error::Numerical(_) | Error::Degenerate(_) => 4,
    }
}

fn load_codec(path: &Path) -> Result<Codec> {
    Codec::from_checkpoint(&Checkpoint::load(path)?)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train { cfg, out } => {
            let (codec_cfg, train_cfg) = cfg.resolve()?;
            let report = train(&codec_cfg, &train_cfg, &out)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "trained {} steps; final-epoch mean rate {:.4} bpp; model at {}",
                report.steps.len(),
                report.final_mean_bpp,
                out.join("model.ckpt").display()
            );
        }
        Cmd::Compress { image, model, out, saliency, cfg: _ } => {
            let codec = load_codec(&model)?;
            let (img, w, h) = read_ppm(&image)?;
            let sal = match &saliency {
                Some(path) => {
                    let (map, mw, mh) = read_pgm(path)?;
                    if (mw, mh) != (w, h) {
                        return Err(Error::Format(format!(
                            "saliency map is {mw}x{mh} but the image is {w}x{h}"
                        )));
                    }
                    Some(map)
                }
                None => None,
            };
            let out = out.unwrap_or_else(|| image.with_extension("hsc"));
            let compressed = codec.compress(&img, w, h, sal.as_deref())?;
            compressed.bitstream.save(&out)?;
            println!(
                "{} -> {} ({} bits, {:.4} bpp, stage-2 share {:.3})",
                image.display(),
                out.display(),
                compressed.bitstream.total_bits(),
                compressed.stats.bpp,
                compressed.stats.stage2_bits as f64
                    / (compressed.stats.stage1_bits + compressed.stats.stage2_bits).max(1) as f64,
            );
        }
        Cmd::Decompress { bitstream, model, out, cfg: _ } => {
            let codec = load_codec(&model)?;
            let bs = Bitstream::load(&bitstream)?;
            let dec = codec.decompress(&bs)?;
            let out = out.unwrap_or_else(|| bitstream.with_extension("dec.ppm"));
            write_ppm(&out, &dec.image, dec.w, dec.h)?;
            println!("{} -> {} ({}x{})", bitstream.display(), out.display(), dec.w, dec.h);
        }
        Cmd::Eval { corpus, model, out, cfg } => {
            let (codec_cfg, _) = cfg.resolve()?;
            let codec = load_codec(&model)?;
            let items = load_corpus(&corpus, codec_cfg.seed)?;
            let rows = eval(&codec, &items)?;
            write_eval_csv(&rows, &out)?;
            let mean_bpp = rows.iter().map(|r| r.bpp).sum::<f64>() / rows.len().max(1) as f64;
            println!("wrote {} rows to {} (mean {:.4} bpp)", rows.len(), out.display(), mean_bpp);
        }
        Cmd::Sweep { cfg, out, points, eval_corpus } => {
            let (base_codec, base_train) = cfg.resolve()?;
            let mut runs = Vec::new();
            for (i, group) in points.split(';').filter(|g| !g.trim().is_empty()).enumerate() {
                let mut codec = base_codec.clone();
                let mut tc = base_train.clone();
                let mut pairs = Vec::new();
                for kv in group.split(',').filter(|s| !s.trim().is_empty()) {
                    let (k, v) = kv
                        .split_once('=')
                        .ok_or_else(|| Error::Config(format!("sweep point expects KEY=VALUE, got {kv:?}")))?;
                    pairs.push((k.trim().to_string(), v.trim().to_string()));
                }
                apply_pairs(&mut codec, &mut tc, &pairs)?;
                runs.push((format!("point-{i:02}"), codec, tc));
            }
            if runs.is_empty() {
                return Err(Error::Config("sweep needs at least one point in --points".into()));
            }
            let points = rd_sweep(&runs, &eval_corpus, base_codec.seed, &out)?;
            for p in &points {
                println!(
                    "{}: bpp {:.4} psnr {:.2} ms_ssim {:.4} dpl {:.5}",
                    p.label, p.bpp, p.psnr, p.ms_ssim, p.dpl
                );
            }
            println!("wrote {} and {}", out.join("sweep.csv").display(), out.join("sweep.dat").display());
        }
        Cmd::FitMetric { dataset, model, out, cfg: _ } => {
            let codec = load_codec(&model)?;
            let records = load_records(&dataset)?;
            let weights = fit_channel_weights(&records, &codec.extractor, &codec.params)?;
            let tensors: Vec<(String, Vec<usize>, Vec<f64>)> = weights
                .per_tap
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    (format!("dpl.w{i}"), vec![w.len()], w.iter().map(|&v| v as f32 as f64).collect())
                })
                .collect();
            Checkpoint { config: codec.config.clone(), tensors }.save(&out)?;
            let (fa, fb) = record_features(&records, &codec.extractor, &codec.params)?;
            let fractions: Vec<f64> = records.iter().map(|r| r.fraction_a).collect();
            let da: Vec<f64> = fa.iter().map(|f| weighted_tap_distance(&weights, f)).collect();
            let db: Vec<f64> = fb.iter().map(|f| weighted_tap_distance(&weights, f)).collect();
            println!(
                "fitted weights on {} records (train 2afc {:.4}) -> {}",
                records.len(),
                twoafc_score_from(&da, &db, &fractions),
                out.display()
            );
        }
        Cmd::Score2Afc { dataset, model, metric, weights, cfg: _ } => {
            let mut codec = load_codec(&model)?;
            let records = load_records(&dataset)?;
            let score = match metric.as_str() {
                "psnr" => twoafc_score(&records, |r, x, _, _| Ok(-psnr(r, x)?))?,
                "ms-ssim" => twoafc_score(&records, |r, x, w, h| Ok(1.0 - ms_ssim(r, x, 3, h, w)?))?,
                "dpl" => {
                    if let Some(path) = &weights {
                        let ck = Checkpoint::load(path)?;
                        if ck.config.digest() != codec.config.digest() {
                            return Err(Error::DigestMismatch {
                                artifact: ck.config.digest(),
                                model: codec.config.digest(),
                            });
                        }
                        ck.apply_subset_to(&mut codec.params)?;
                    }
                    let w = ChannelWeights::from_params(&codec.params, "dpl")?;
                    let (fa, fb) = record_features(&records, &codec.extractor, &codec.params)?;
                    let fractions: Vec<f64> = records.iter().map(|r| r.fraction_a).collect();
                    let da: Vec<f64> = fa.iter().map(|f| weighted_tap_distance(&w, f)).collect();
                    let db: Vec<f64> = fb.iter().map(|f| weighted_tap_distance(&w, f)).collect();
                    twoafc_score_from(&da, &db, &fractions)
                }
                other => {
                    return Err(Error::Config(format!(
                        "unknown metric {other:?}; expected psnr, ms-ssim, or dpl"
                    )))
                }
            };
            println!("2afc {metric} score {score:.6} over {} records", records.len());
        }
    }
    Ok(())
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli.cmd) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

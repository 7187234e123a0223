//! Rate-distortion training loop, corpus evaluation, and R-D sweeps.
//!
//! Training is deterministic for a fixed seed and corpus: batch order comes
//! from a seeded shuffle, per-image gradients are reduced in batch order, and
//! the worker count only changes who computes each item, never the sum.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::checkpoint::Checkpoint;
use crate::codec::{Codec, PAD_MULTIPLE, SALIENCY_THRESHOLD};
use crate::config::{CodecConfig, TrainConfig};
use crate::corpus::{load_corpus, CorpusItem};
use crate::dpl::pretrain_extractor;
use crate::error::{Error, Result};
use crate::image_io::mirror_pad;
use crate::mask::{heuristic_saliency, SaliencyMask};
use crate::metrics::{ms_ssim, mse, psnr};
use crate::nn::{AdamConfig, ParamSet};
use crate::tape::Tape;
use crate::worker_count;

const PRETRAIN_STEPS: usize = 40;
const PRETRAIN_LR: f64 = 2e-3;
const PRETRAIN_IMAGES: usize = 8;

/// One optimizer step's batch means.
#[derive(Debug, Clone)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub rate_bpp: f64,
    pub distortion: f64,
    pub mse: f64,
    pub dpl: f64,
    pub aux: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub checkpoint: Checkpoint,
    pub steps: Vec<StepStats>,
    /// Mean estimated rate over the final epoch's steps.
    pub final_mean_bpp: f64,
    pub warnings: Vec<String>,
}

struct TrainItem {
    image: Vec<f64>,
    h: usize,
    w: usize,
    sal: SaliencyMask,
}

fn prepare_item(item: &CorpusItem) -> Result<TrainItem> {
    let (image, ph, pw) = mirror_pad(&item.image, 3, item.h, item.w, PAD_MULTIPLE);
    let sal = match &item.saliency_px {
        Some(map) => {
            if map.len() != item.w * item.h {
                return Err(Error::shape(&[item.w * item.h], &[map.len()], format!("saliency map for {}", item.name)));
            }
            let asf: Vec<f64> = map.iter().map(|&v| v as f64).collect();
            let (padded, _, _) = mirror_pad(&asf, 1, item.h, item.w, PAD_MULTIPLE);
            let bytes: Vec<u8> = padded.iter().map(|&v| v as u8).collect();
            SaliencyMask::from_image_map(&bytes, pw, ph)?
        }
        None => heuristic_saliency(&image, 3, ph, pw, SALIENCY_THRESHOLD)?,
    };
    Ok(TrainItem { image, h: ph, w: pw, sal })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Seed the feature extractor by autoencoding a few corpus images, then copy
/// the weights into the codec, where they stay frozen.
fn seed_extractor(codec: &mut Codec, items: &[TrainItem], seed: u64) -> Result<()> {
    let dims = (items[0].h, items[0].w);
    let images: Vec<Vec<f64>> = items
        .iter()
        .filter(|it| (it.h, it.w) == dims)
        .take(PRETRAIN_IMAGES)
        .map(|it| it.image.clone())
        .collect();
    let mut scratch = ParamSet::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    pretrain_extractor(&mut scratch, &mut rng, "feat", &images, dims, PRETRAIN_STEPS, PRETRAIN_LR)?;
    for p in &scratch.params {
        codec.params.set_value(&p.name, &p.value)?;
    }
    Ok(())
}

/// Batch means in CSV column order: loss, rate, distortion, mse, dpl, aux.
type ItemOutcome = (Vec<Vec<f64>>, [f64; 6]);

fn item_pass(codec: &Codec, item: &TrainItem, tc: &TrainConfig) -> Result<ItemOutcome> {
    let mut tape = Tape::new();
    let vars = codec.params.bind(&mut tape)?;
    let out = codec.train_forward(&mut tape, &vars, &item.image, item.h, item.w, &item.sal, tc)?;
    let loss = tape.value(out.loss);
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss ({loss})")));
    }
    tape.backward(out.loss)?;
    let mut grads = codec.params.zero_grads();
    codec.params.accumulate(&tape, &vars, &mut grads);
    Ok((grads, [loss, out.rate_bpp, out.distortion, out.mse, out.dpl, out.aux]))
}

/// Train a fresh model on `tc.corpus`, writing `train-log.csv`, per-epoch
/// checkpoints, and `model.ckpt` under `out_dir`.
///
/// A non-finite loss or gradient aborts the run: the last checkpoint that
/// stepped cleanly is saved as `model.ckpt` and the error is returned.
pub fn train(config: &CodecConfig, tc: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    config.validate()?;
    tc.validate()?;
    fs::create_dir_all(out_dir)?;

    let corpus = load_corpus(&tc.corpus, config.seed)?;
    if corpus.is_empty() {
        return Err(Error::Config(format!("corpus {} is empty", tc.corpus)));
    }
    let items: Vec<TrainItem> = corpus.iter().map(prepare_item).collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    if config.beta == 0.0 {
        warnings.push("beta = 0 leaves reconstruction unconstrained; the rate term will empty the bottleneck".to_string());
    }
    if config.alpha == 0.0 {
        warnings.push("alpha = 0 removes all rate pressure; expect bpp well above target".to_string());
    }

    let mut codec = Codec::new(config.clone())?;
    if tc.dpl_weight > 0.0 {
        seed_extractor(&mut codec, &items, config.seed)?;
    }
    let frozen: Vec<usize> = codec
        .params
        .params
        .iter()
        .enumerate()
        .filter(|(_, p)| Codec::frozen_prefixes().iter().any(|pre| p.name.starts_with(pre)))
        .map(|(i, _)| i)
        .collect();

    let pool = thread_pool()?;
    let mut order_rng = ChaCha12Rng::seed_from_u64(config.seed.wrapping_add(0x0e70_c4a5));
    let batch = tc.batch_size.min(items.len());
    let mut csv = BufWriter::new(File::create(out_dir.join("train-log.csv"))?);
    writeln!(csv, "step,epoch,lr,loss,rate_bpp,distortion,mse,dpl,aux")?;

    let mut last_good = codec.checkpoint();
    let mut steps = Vec::new();
    let mut step = 0usize;
    for epoch in 0..tc.epochs {
        let lr = tc.lr * tc.lr_decay.powi((epoch / tc.lr_decay_every) as i32);
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.shuffle(&mut order_rng);
        for chunk in order.chunks_exact(batch) {
            let results: Vec<Result<ItemOutcome>> = pool
                .install(|| chunk.par_iter().map(|&ix| item_pass(&codec, &items[ix], tc)).collect());

            let mut grads = codec.params.zero_grads();
            let mut sums = [0.0f64; 6];
            let mut stepped = Ok(());
            for r in results {
                match r {
                    Ok((g, vals)) => {
                        for (slot, item_g) in grads.iter_mut().zip(&g) {
                            for (s, v) in slot.iter_mut().zip(item_g) {
                                *s += v;
                            }
                        }
                        for (s, v) in sums.iter_mut().zip(vals) {
                            *s += v;
                        }
                    }
                    Err(e) => {
                        stepped = Err(e);
                        break;
                    }
                }
            }
            if stepped.is_ok() {
                let scale = 1.0 / batch as f64;
                for g in &mut grads {
                    for v in g.iter_mut() {
                        *v *= scale;
                    }
                }
                for &i in &frozen {
                    grads[i].iter_mut().for_each(|v| *v = 0.0);
                }
                stepped = codec.params.adam_step(&grads, lr, AdamConfig::default());
            }
            match stepped {
                Ok(()) => {}
                Err(Error::Numerical(msg)) => {
                    last_good.save(out_dir.join("model.ckpt"))?;
                    csv.flush()?;
                    return Err(Error::Numerical(format!(
                        "training diverged at step {step}: {msg}; last good checkpoint saved"
                    )));
                }
                Err(e) => return Err(e),
            }
            let n = batch as f64;
            let row = StepStats {
                step,
                epoch,
                lr,
                loss: sums[0] / n,
                rate_bpp: sums[1] / n,
                distortion: sums[2] / n,
                mse: sums[3] / n,
                dpl: sums[4] / n,
                aux: sums[5] / n,
            };
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{}",
                row.step, row.epoch, row.lr, row.loss, row.rate_bpp, row.distortion, row.mse, row.dpl, row.aux
            )?;
            steps.push(row);
            last_good = codec.checkpoint();
            step += 1;
        }
        codec.checkpoint().save(out_dir.join(format!("epoch-{epoch}.ckpt")))?;
    }
    csv.flush()?;

    let checkpoint = codec.checkpoint();
    checkpoint.save(out_dir.join("model.ckpt"))?;
    let last_epoch: Vec<&StepStats> = steps.iter().filter(|s| s.epoch == tc.epochs - 1).collect();
    let final_mean_bpp = if last_epoch.is_empty() {
        f64::NAN
    } else {
        last_epoch.iter().map(|s| s.rate_bpp).sum::<f64>() / last_epoch.len() as f64
    };
    Ok(TrainReport { checkpoint, steps, final_mean_bpp, warnings })
}

/// Real-bitstream metrics for one corpus image.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub name: String,
    pub bpp: f64,
    pub rate_estimate_bpp: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub dpl: f64,
    /// Stage-2 payload bits over total payload bits.
    pub stage2_fraction: f64,
}

/// Compress, decode, and score every item. Rows keep corpus order.
pub fn eval(codec: &Codec, items: &[CorpusItem]) -> Result<Vec<EvalRow>> {
    let pool = thread_pool()?;
    let rows: Vec<Result<EvalRow>> = pool.install(|| {
        items
            .par_iter()
            .map(|item| {
                let out = codec.compress(&item.image, item.w, item.h, item.saliency_px.as_deref())?;
                let dec = codec.decompress(&out.bitstream)?;
                let total = (out.stats.stage1_bits + out.stats.stage2_bits) as f64;
                Ok(EvalRow {
                    name: item.name.clone(),
                    bpp: out.stats.bpp,
                    rate_estimate_bpp: out.stats.rate_estimate_bpp,
                    mse: mse(&item.image, &dec.image)?,
                    psnr: psnr(&item.image, &dec.image)?,
                    ms_ssim: ms_ssim(&item.image, &dec.image, 3, item.h, item.w)?,
                    dpl: codec.dpl_metric(&item.image, &dec.image, item.h, item.w)?,
                    stage2_fraction: if total > 0.0 { out.stats.stage2_bits as f64 / total } else { 0.0 },
                })
            })
            .collect()
    });
    rows.into_iter().collect()
}

pub fn write_eval_csv(rows: &[EvalRow], path: &Path) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    writeln!(f, "name,bpp,rate_estimate_bpp,mse,psnr,ms_ssim,dpl,stage2_fraction")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{}",
            r.name, r.bpp, r.rate_estimate_bpp, r.mse, r.psnr, r.ms_ssim, r.dpl, r.stage2_fraction
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Eval-corpus means for one trained model in a sweep.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub label: String,
    pub digest: u64,
    pub bpp: f64,
    pub psnr: f64,
    pub ms_ssim: f64,
    pub dpl: f64,
    pub mse: f64,
}

fn mean(rows: &[EvalRow], f: impl Fn(&EvalRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn write_sweep_files(points: &[SweepPoint], done: usize, total: usize, out_dir: &Path) -> Result<()> {
    let mut csv = BufWriter::new(File::create(out_dir.join("sweep.csv"))?);
    writeln!(csv, "label,bpp,psnr,ms_ssim,dpl,mse,digest")?;
    for p in points {
        writeln!(csv, "{},{},{},{},{},{},{:016x}", p.label, p.bpp, p.psnr, p.ms_ssim, p.dpl, p.mse, p.digest)?;
    }
    if done < total {
        writeln!(csv, "# partial: {done} of {total} runs completed before abort")?;
    }
    csv.flush()?;

    let mut dat = BufWriter::new(File::create(out_dir.join("sweep.dat"))?);
    writeln!(dat, "# bpp psnr ms_ssim dpl mse label")?;
    for p in points {
        writeln!(dat, "{} {} {} {} {} {}", p.bpp, p.psnr, p.ms_ssim, p.dpl, p.mse, p.label)?;
    }
    dat.flush()?;
    Ok(())
}

/// Path of the checkpoint a sweep run trains into (or reuses).
pub fn sweep_model_path(out_dir: &Path, label: &str) -> PathBuf {
    out_dir.join(format!("run-{label}")).join("model.ckpt")
}

/// Train or reuse one model per labeled config, score each on a shared eval
/// corpus, and write `sweep.csv` plus a gnuplot-ready `sweep.dat`, sorted by
/// bpp. A failed run aborts the sweep; files already written stay, and the
/// CSV carries a trailing `# partial` marker.
pub fn rd_sweep(
    runs: &[(String, CodecConfig, TrainConfig)],
    eval_corpus: &str,
    eval_seed: u64,
    out_dir: &Path,
) -> Result<Vec<SweepPoint>> {
    fs::create_dir_all(out_dir)?;
    let eval_items = load_corpus(eval_corpus, eval_seed)?;
    if eval_items.is_empty() {
        return Err(Error::Config(format!("eval corpus {eval_corpus} is empty")));
    }
    let mut points: Vec<SweepPoint> = Vec::new();
    for (i, (label, config, tc)) in runs.iter().enumerate() {
        let run = || -> Result<SweepPoint> {
            let model_path = sweep_model_path(out_dir, label);
            let checkpoint = match Checkpoint::load(&model_path) {
                Ok(ck) if ck.config.digest() == config.digest() => ck,
                _ => train(config, tc, model_path.parent().expect("run dir"))?.checkpoint,
            };
            let codec = Codec::from_checkpoint(&checkpoint)?;
            let rows = eval(&codec, &eval_items)?;
            Ok(SweepPoint {
                label: label.clone(),
                digest: config.digest(),
                bpp: mean(&rows, |r| r.bpp),
                psnr: mean(&rows, |r| r.psnr),
                ms_ssim: mean(&rows, |r| r.ms_ssim),
                dpl: mean(&rows, |r| r.dpl),
                mse: mean(&rows, |r| r.mse),
            })
        };
        match run() {
            Ok(p) => points.push(p),
            Err(e) => {
                points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
                write_sweep_files(&points, i, runs.len(), out_dir)?;
                return Err(e);
            }
        }
    }
    points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
    write_sweep_files(&points, runs.len(), runs.len(), out_dir)?;
    Ok(points)
}

//! Two-alternative forced choice: datasets, agreement scoring, and fitting
//! perceptual-metric weights to human preference fractions.
//!
//! A record holds a reference image and two reconstructions; `fraction_a` is
//! the share of human judgements that picked A as closer. A metric's 2AFC
//! score on a record is the share of judgements that agree with its ranking,
//! so a perfect score needs unanimous humans and a matching metric.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::dpl::{tap_sq_diffs, ChannelWeights, FeatureExtractor, TAP_CHANNELS};
use crate::error::{Error, Result};
use crate::image_io::{read_ppm, write_ppm};
use crate::nn::{AdamConfig, Init, ParamSet};
use crate::tape::Tape;

const FIT_STEPS: usize = 200;
const FIT_LR: f64 = 0.05;
const RANSAC_DRAWS: usize = 64;
const RIDGE: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct TwoAFCRecord {
    pub reference: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub w: usize,
    pub h: usize,
    /// Share of human judgements picking reconstruction A, in [0, 1].
    pub fraction_a: f64,
    pub method_a: String,
    pub method_b: String,
    pub bpp: f64,
}

impl TwoAFCRecord {
    pub fn validate(&self) -> Result<()> {
        let n = 3 * self.w * self.h;
        for (img, what) in [(&self.reference, "reference"), (&self.a, "a"), (&self.b, "b")] {
            if img.len() != n {
                return Err(Error::shape(&[n], &[img.len()], format!("2afc {what} image")));
            }
        }
        if !self.fraction_a.is_finite() || !(0.0..=1.0).contains(&self.fraction_a) {
            return Err(Error::Config(format!("fraction_a {} outside [0,1]", self.fraction_a)));
        }
        Ok(())
    }
}

/// JSON sidecar stored next to the three PPM files of a record.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    #[serde(rename = "ref")]
    reference: String,
    a: String,
    b: String,
    fraction_a: f64,
    method_a: String,
    method_b: String,
    bpp: f64,
}

/// Write `{stem}.json` plus `{stem}-ref/a/b.ppm` under `dir`.
pub fn save_record(dir: &Path, stem: &str, rec: &TwoAFCRecord) -> Result<()> {
    rec.validate()?;
    fs::create_dir_all(dir)?;
    let names = [format!("{stem}-ref.ppm"), format!("{stem}-a.ppm"), format!("{stem}-b.ppm")];
    for (name, img) in names.iter().zip([&rec.reference, &rec.a, &rec.b]) {
        write_ppm(dir.join(name), img, rec.w, rec.h)?;
    }
    let side = Sidecar {
        reference: names[0].clone(),
        a: names[1].clone(),
        b: names[2].clone(),
        fraction_a: rec.fraction_a,
        method_a: rec.method_a.clone(),
        method_b: rec.method_b.clone(),
        bpp: rec.bpp,
    };
    let text = serde_json::to_string_pretty(&side).map_err(|e| Error::Format(format!("sidecar encode: {e}")))?;
    fs::write(dir.join(format!("{stem}.json")), text)?;
    Ok(())
}

/// Load every `*.json` record in `dir`, sorted by file name.
pub fn load_records(dir: &Path) -> Result<Vec<TwoAFCRecord>> {
    let mut stems: Vec<_> = fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    stems.sort();
    let mut records = Vec::with_capacity(stems.len());
    for path in stems {
        let text = fs::read_to_string(&path)?;
        let side: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let (reference, w, h) = read_ppm(dir.join(&side.reference))?;
        let (a, aw, ah) = read_ppm(dir.join(&side.a))?;
        let (b, bw, bh) = read_ppm(dir.join(&side.b))?;
        if (aw, ah) != (w, h) || (bw, bh) != (w, h) {
            return Err(Error::Format(format!("{}: image dims disagree", path.display())));
        }
        let rec = TwoAFCRecord {
            reference,
            a,
            b,
            w,
            h,
            fraction_a: side.fraction_a,
            method_a: side.method_a,
            method_b: side.method_b,
            bpp: side.bpp,
        };
        rec.validate()?;
        records.push(rec);
    }
    Ok(records)
}

/// Mean share of human judgements agreeing with the metric's pick; ties go
/// to A. `distance(reference, reconstruction, w, h)` must return a finite
/// value where smaller means closer.
pub fn twoafc_score<F>(records: &[TwoAFCRecord], mut distance: F) -> Result<f64>
where
    F: FnMut(&[f64], &[f64], usize, usize) -> Result<f64>,
{
    if records.is_empty() {
        return Err(Error::Degenerate("2afc scoring needs at least one record".into()));
    }
    let mut acc = 0.0;
    for r in records {
        let da = distance(&r.reference, &r.a, r.w, r.h)?;
        let db = distance(&r.reference, &r.b, r.w, r.h)?;
        acc += if da <= db { r.fraction_a } else { 1.0 - r.fraction_a };
    }
    Ok(acc / records.len() as f64)
}

/// Score from precomputed per-record distances.
pub fn twoafc_score_from(d_a: &[f64], d_b: &[f64], fractions: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((da, db), p) in d_a.iter().zip(d_b).zip(fractions) {
        acc += if da <= db { *p } else { 1.0 - p };
    }
    acc / fractions.len() as f64
}

/// Per-tap squared-difference coefficients for both reconstructions of a
/// record; the weighted perceptual distance is `sum w^2 * coeff` over them.
pub fn record_features(
    records: &[TwoAFCRecord],
    extractor: &FeatureExtractor,
    params: &ParamSet,
) -> Result<(Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>)> {
    let mut fa = Vec::with_capacity(records.len());
    let mut fb = Vec::with_capacity(records.len());
    for r in records {
        fa.push(tap_sq_diffs(extractor, params, &r.reference, &r.a, r.h, r.w)?);
        fb.push(tap_sq_diffs(extractor, params, &r.reference, &r.b, r.h, r.w)?);
    }
    Ok((fa, fb))
}

/// Weighted distance over precomputed tap coefficients.
pub fn weighted_tap_distance(weights: &ChannelWeights, feats: &[Vec<f64>]) -> f64 {
    weights
        .per_tap
        .iter()
        .zip(feats)
        .map(|(w, s)| w.iter().zip(s).map(|(wv, sv)| wv * wv * sv).sum::<f64>())
        .sum()
}

/// Fit channel weights to human preferences by gradient descent on a
/// ranking cross-entropy: P(pick A) = sigmoid(gain * (D_B - D_A)) with the
/// distances linear in the squared weights. Weights are clamped to be
/// non-negative after every step.
pub fn fit_channel_weights_from(
    feats_a: &[Vec<Vec<f64>>],
    feats_b: &[Vec<Vec<f64>>],
    fractions: &[f64],
) -> Result<ChannelWeights> {
    let n = fractions.len();
    if n < 2 || feats_a.len() != n || feats_b.len() != n {
        return Err(Error::Degenerate(format!(
            "weight fitting needs at least 2 complete records, got {}/{}/{}",
            feats_a.len(),
            feats_b.len(),
            n
        )));
    }
    if fractions.iter().all(|p| (p - 0.5).abs() < 1e-12) {
        return Err(Error::Degenerate("every record sits at fraction 0.5; preferences carry no signal".into()));
    }
    // Margin features: D_B - D_A is linear in w^2 over these deltas.
    let deltas: Vec<Vec<Vec<f64>>> = (0..n)
        .map(|r| {
            feats_a[r]
                .iter()
                .zip(&feats_b[r])
                .map(|(a, b)| a.iter().zip(b).map(|(av, bv)| bv - av).collect())
                .collect()
        })
        .collect();
    for (r, d) in deltas.iter().enumerate() {
        if d.len() != TAP_CHANNELS.len() || d.iter().zip(TAP_CHANNELS).any(|(v, c)| v.len() != c) {
            return Err(Error::shape(&[TAP_CHANNELS.len()], &[d.len()], format!("record {r} tap features")));
        }
    }

    let mut ps = ParamSet::new();
    let mut rng = ChaCha12Rng::seed_from_u64(0);
    let widx: Vec<usize> = TAP_CHANNELS
        .iter()
        .enumerate()
        .map(|(l, &c)| ps.add(format!("w{l}"), vec![c], Init::Const(1.0), &mut rng))
        .collect();
    let gidx = ps.add("gain", vec![1], Init::Const(1.0), &mut rng);

    for _ in 0..FIT_STEPS {
        let mut tape = Tape::new();
        let vars = ps.bind(&mut tape)?;
        let w2: Vec<_> = widx.iter().map(|&i| tape.mul(vars[i], vars[i])).collect::<Result<_>>()?;
        let mut margins = Vec::with_capacity(n);
        for delta in &deltas {
            let mut acc = None;
            for (l, d) in delta.iter().enumerate() {
                let dv = tape.constant(d.clone(), vec![d.len()])?;
                let term = tape.mul(w2[l], dv)?;
                let s = tape.sum(term);
                acc = Some(match acc {
                    Some(t) => tape.add(t, s)?,
                    None => s,
                });
            }
            let m = tape.mul(acc.expect("taps"), vars[gidx])?;
            margins.push(m);
        }
        let marg = tape.concat0(&margins)?;
        let loss = tape.logistic_bce(marg, fractions)?;
        tape.backward(loss)?;
        let mut grads = ps.zero_grads();
        ps.accumulate(&tape, &vars, &mut grads);
        ps.adam_step(&grads, FIT_LR, AdamConfig::default())?;
        for (l, &i) in widx.iter().enumerate() {
            let clamped: Vec<f64> = ps.params[i].value.iter().map(|v| v.max(0.0)).collect();
            ps.set_value(&format!("w{l}"), &clamped)?;
        }
        let g = ps.params[gidx].value[0].max(1e-6);
        ps.set_value("gain", &[g])?;
    }
    let weights = ChannelWeights {
        per_tap: widx.iter().map(|&i| ps.params[i].value.clone()).collect(),
    };
    weights.validate()?;
    Ok(weights)
}

/// Fit channel weights directly from records via the extractor.
pub fn fit_channel_weights(
    records: &[TwoAFCRecord],
    extractor: &FeatureExtractor,
    params: &ParamSet,
) -> Result<ChannelWeights> {
    let (fa, fb) = record_features(records, extractor, params)?;
    let fractions: Vec<f64> = records.iter().map(|r| r.fraction_a).collect();
    fit_channel_weights_from(&fa, &fb, &fractions)
}

#[derive(Debug, Clone)]
pub struct ComboFit {
    /// One weight per input metric; the combined distance is their weighted sum.
    pub weights: Vec<f64>,
    /// Soft 2AFC agreement of the combination on the fitting records.
    pub score: f64,
}

/// Ridge-stabilized least squares for `X beta = y` via normal equations.
fn least_squares(rows: &[&[f64]], y: &[f64], m: usize) -> Vec<f64> {
    let mut ata = vec![vec![0.0; m]; m];
    let mut aty = vec![0.0; m];
    for (x, yv) in rows.iter().zip(y) {
        for i in 0..m {
            aty[i] += x[i] * yv;
            for j in 0..m {
                ata[i][j] += x[i] * x[j];
            }
        }
    }
    for (i, row) in ata.iter_mut().enumerate() {
        row[i] += RIDGE;
    }
    // Gaussian elimination with partial pivoting.
    let mut a = ata;
    let mut b = aty;
    for col in 0..m {
        let pivot = (col..m)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty");
        a.swap(col, pivot);
        b.swap(col, pivot);
        let d = a[col][col];
        if d.abs() < 1e-300 {
            continue;
        }
        for r in col + 1..m {
            let f = a[r][col] / d;
            for c in col..m {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut beta = vec![0.0; m];
    for col in (0..m).rev() {
        let mut v = b[col];
        for c in col + 1..m {
            v -= a[col][c] * beta[c];
        }
        beta[col] = if a[col][col].abs() < 1e-300 { 0.0 } else { v / a[col][col] };
    }
    beta
}

fn combo_score(beta: &[f64], d_a: &[Vec<f64>], d_b: &[Vec<f64>], fractions: &[f64]) -> f64 {
    let n = fractions.len();
    let combine = |d: &[Vec<f64>], r: usize| beta.iter().zip(d).map(|(w, col)| w * col[r]).sum::<f64>();
    let ca: Vec<f64> = (0..n).map(|r| combine(d_a, r)).collect();
    let cb: Vec<f64> = (0..n).map(|r| combine(d_b, r)).collect();
    twoafc_score_from(&ca, &cb, fractions)
}

/// Combine metrics into one distance by RANSAC over least-squares fits to
/// the signed preference margin. Candidates include every single metric and
/// the full-data fit, so the winner never scores below the best individual
/// metric on the fitting set. `d_a[m][r]` is metric `m`'s distance for
/// reconstruction A of record `r`.
pub fn fit_linear_combo(d_a: &[Vec<f64>], d_b: &[Vec<f64>], fractions: &[f64], seed: u64) -> Result<ComboFit> {
    let m = d_a.len();
    let n = fractions.len();
    if m < 2 || d_b.len() != m {
        return Err(Error::Degenerate(format!("combo fitting needs at least 2 metrics, got {m}/{}", d_b.len())));
    }
    if n < m {
        return Err(Error::Degenerate(format!("combo fitting needs at least {m} records, got {n}")));
    }
    if d_a.iter().chain(d_b).any(|col| col.len() != n) {
        return Err(Error::Degenerate("metric distance columns disagree in length".into()));
    }

    // Row r: per-metric margins d_B - d_A; target: signed human preference.
    let rows: Vec<Vec<f64>> = (0..n).map(|r| (0..m).map(|k| d_b[k][r] - d_a[k][r]).collect()).collect();
    let y: Vec<f64> = fractions.iter().map(|p| 2.0 * p - 1.0).collect();

    let mut best: Option<ComboFit> = None;
    let consider = |weights: Vec<f64>, best: &mut Option<ComboFit>| {
        let score = combo_score(&weights, d_a, d_b, fractions);
        if best.as_ref().is_none_or(|b| score > b.score) {
            *best = Some(ComboFit { weights, score });
        }
    };

    for k in 0..m {
        let mut e = vec![0.0; m];
        e[k] = 1.0;
        consider(e, &mut best);
    }
    let all_rows: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    consider(least_squares(&all_rows, &y, m), &mut best);

    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let subset = n.min((m + 1).max(n / 3).max(2));
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..RANSAC_DRAWS {
        order.shuffle(&mut rng);
        let draw_rows: Vec<&[f64]> = order[..subset].iter().map(|&r| rows[r].as_slice()).collect();
        let draw_y: Vec<f64> = order[..subset].iter().map(|&r| y[r]).collect();
        consider(least_squares(&draw_rows, &draw_y, m), &mut best);
    }
    Ok(best.expect("candidates considered"))
}

/// Exact one-sided sign test: P(X >= k) for X ~ Binomial(n, 1/2).
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let mut coeff = 1.0f64;
    let mut acc = 0.0;
    for i in 0..=n {
        if i >= k {
            acc += coeff;
        }
        coeff = coeff * (n - i) as f64 / (i + 1) as f64;
    }
    acc * 0.5f64.powi(n as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn flat_image(v: f64, w: usize, h: usize) -> Vec<f64> {
        vec![v; 3 * w * h]
    }

    fn record(fraction_a: f64) -> TwoAFCRecord {
        TwoAFCRecord {
            reference: flat_image(0.5, 8, 8),
            a: flat_image(0.5, 8, 8),
            b: flat_image(0.9, 8, 8),
            w: 8,
            h: 8,
            fraction_a,
            method_a: "m-a".into(),
            method_b: "m-b".into(),
            bpp: 0.4,
        }
    }

    #[test]
    fn score_is_one_when_metric_matches_unanimous_humans() {
        let records = vec![record(1.0), record(1.0)];
        let score = twoafc_score(&records, |r, x, _, _| {
            Ok(r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum())
        })
        .unwrap();
        assert_eq!(score, 1.0);
    }

    #[test]
    fn score_flips_with_preference_fraction() {
        let records = vec![record(0.25)];
        // Metric picks A (identical to reference), humans lean B.
        let score = twoafc_score(&records, |r, x, _, _| {
            Ok(r.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum())
        })
        .unwrap();
        assert!((score - 0.25).abs() < 1e-12);
    }

    #[test]
    fn records_round_trip_through_sidecar_files() {
        let dir = tempfile::tempdir().unwrap();
        // Values on the 8-bit grid so the PPM round trip is exact.
        let q = |v: usize| (v % 256) as f64 / 255.0;
        let mut rec = record(0.75);
        rec.reference = (0..3 * 64).map(q).collect();
        rec.a = (0..3 * 64).map(|i| q(i + 3)).collect();
        rec.b = (0..3 * 64).map(|i| q(i + 7)).collect();
        save_record(dir.path(), "trial-000", &rec).unwrap();
        save_record(dir.path(), "trial-001", &record(0.5)).unwrap();
        let back = load_records(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].reference, rec.reference);
        assert_eq!(back[0].a, rec.a);
        assert_eq!(back[0].b, rec.b);
        assert_eq!(back[0].fraction_a, 0.75);
        assert_eq!(back[0].method_a, "m-a");
        assert_eq!(back[0].bpp, 0.4);
    }

    #[test]
    fn all_half_fractions_are_degenerate() {
        let fa: Vec<Vec<Vec<f64>>> = vec![synthetic_feats(1.0, 0), synthetic_feats(1.0, 1)];
        let fb = fa.clone();
        let err = fit_channel_weights_from(&fa, &fb, &[0.5, 0.5]).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)), "got {err:?}");
    }

    fn synthetic_feats(base: f64, salt: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha12Rng::seed_from_u64(salt);
        TAP_CHANNELS
            .iter()
            .map(|&c| (0..c).map(|_| base * (0.02 + 0.01 * rng.gen::<f64>())).collect())
            .collect()
    }

    /// Preference always explained by tap 1, channel 3: the rejected side's
    /// distortion is a scaled copy of the preferred side's on that channel
    /// and identical everywhere else.
    fn discriminative_set(n: usize) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<Vec<f64>>>, Vec<f64>) {
        let (mut fa, mut fb, mut fr) = (Vec::new(), Vec::new(), Vec::new());
        for r in 0..n {
            let mut a = synthetic_feats(1.0, r as u64);
            let mut b = a.clone();
            let a_preferred = r % 2 == 0;
            if a_preferred {
                b[1][3] = a[1][3] * 5.0 + 0.5;
                fr.push(0.85);
            } else {
                a[1][3] = b[1][3] * 5.0 + 0.5;
                fr.push(0.15);
            }
            fa.push(a);
            fb.push(b);
        }
        (fa, fb, fr)
    }

    #[test]
    fn fitting_finds_the_discriminative_channel() {
        let (fa, fb, fr) = discriminative_set(24);
        let w = fit_channel_weights_from(&fa, &fb, &fr).unwrap();
        w.validate().unwrap();
        let peak = w.per_tap[1][3];
        for (l, tap) in w.per_tap.iter().enumerate() {
            for (c, &v) in tap.iter().enumerate() {
                assert!(v >= 0.0, "negative weight at {l}/{c}");
                if (l, c) != (1, 3) {
                    assert!(peak > v, "w[1][3]={peak} not above w[{l}][{c}]={v}");
                }
            }
        }
    }

    #[test]
    fn fitted_weights_score_at_least_all_ones_on_train() {
        let (fa, fb, fr) = discriminative_set(24);
        let fitted = fit_channel_weights_from(&fa, &fb, &fr).unwrap();
        let score_with = |w: &ChannelWeights| {
            let da: Vec<f64> = fa.iter().map(|f| weighted_tap_distance(w, f)).collect();
            let db: Vec<f64> = fb.iter().map(|f| weighted_tap_distance(w, f)).collect();
            twoafc_score_from(&da, &db, &fr)
        };
        assert!(score_with(&fitted) >= score_with(&ChannelWeights::ones()));
    }

    #[test]
    fn combo_keeps_a_perfect_metric_in_front() {
        let n = 30;
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut d_a = vec![Vec::new(), Vec::new()];
        let mut d_b = vec![Vec::new(), Vec::new()];
        let mut fr = Vec::new();
        for r in 0..n {
            let prefer_a = r % 3 != 0;
            fr.push(if prefer_a { 0.9 } else { 0.1 });
            // Metric 0 ranks perfectly; metric 1 is noise.
            let (da0, db0) = if prefer_a { (0.2, 0.8) } else { (0.8, 0.2) };
            d_a[0].push(da0);
            d_b[0].push(db0);
            d_a[1].push(rng.gen::<f64>());
            d_b[1].push(rng.gen::<f64>());
        }
        let singles: Vec<f64> = (0..2)
            .map(|k| twoafc_score_from(&d_a[k], &d_b[k], &fr))
            .collect();
        let fit = fit_linear_combo(&d_a, &d_b, &fr, 0).unwrap();
        let best_single = singles.iter().cloned().fold(f64::MIN, f64::max);
        assert!(fit.score >= best_single, "combo {} < best single {best_single}", fit.score);
        assert_eq!(fit.score, singles[0], "perfect metric sets the bar");
        assert!(
            fit.weights[0].abs() > fit.weights[1].abs(),
            "perfect metric should dominate: {:?}",
            fit.weights
        );
    }

    #[test]
    fn duplicated_metric_does_not_degrade_the_combo() {
        let (fa, fb, fr) = discriminative_set(20);
        let ones = ChannelWeights::ones();
        let da: Vec<f64> = fa.iter().map(|f| weighted_tap_distance(&ones, f)).collect();
        let db: Vec<f64> = fb.iter().map(|f| weighted_tap_distance(&ones, f)).collect();
        let single = fit_linear_combo(&[da.clone(), da.clone()], &[db.clone(), db.clone()], &fr, 3).unwrap();
        let reference = twoafc_score_from(&da, &db, &fr);
        assert!(single.score >= reference, "{} < {reference}", single.score);
    }

    #[test]
    fn combo_rejects_thin_datasets() {
        let err = fit_linear_combo(&[vec![1.0], vec![2.0]], &[vec![1.0], vec![2.0]], &[0.8], 0).unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn sign_test_matches_hand_computed_tail() {
        // Binomial(20, 1/2): sum of C(20,i) for i>=15 is 21700 of 2^20.
        assert!((sign_test_p(15, 20) - 21700.0 / 1048576.0).abs() < 1e-15);
        assert_eq!(sign_test_p(0, 20), 1.0);
        assert!((sign_test_p(20, 20) - 0.5f64.powi(20)).abs() < 1e-18);
        assert!((sign_test_p(10, 20) - 0.5881).abs() < 5e-5);
        assert!(sign_test_p(15, 20) < 0.05);
        assert!(sign_test_p(14, 20) > 0.05);
    }
}

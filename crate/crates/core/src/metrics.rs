//! Reconstruction quality and temporal stability measurement.
//!
//! Fidelity metrics (PSNR, SSIM) run in two domains: `-linear` compares
//! normalized radiance directly, `-mu` compresses both images with the
//! mu-law tonemap first. Stability metrics (mean luminance, luminance
//! standard deviation, temporal SSIM) describe a whole sequence of
//! display-referred frames.

use serde::{Deserialize, Serialize};

use crate::capture::LdrFrame;
use crate::radiometry::{gamma_to_linear, mu_tonemap, HdrImage, ImageBuf, LdrImage, RadiometryError};
use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("empty sequence")]
    EmptySequence,
    #[error("image sizes differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("sequence lengths differ: {0} outputs vs {1} ground truths")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Radiometry(#[from] RadiometryError),
}

/// Fidelity of identical images reports this sentinel instead of infinity.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;

fn check_sizes<T: Scalar>(a: &ImageBuf<T>, b: &ImageBuf<T>) -> Result<(), MetricsError> {
    if !a.same_size(b) {
        return Err(MetricsError::SizeMismatch(a.height(), a.width(), b.height(), b.width()));
    }
    Ok(())
}

pub fn mse<T: Scalar>(a: &ImageBuf<T>, b: &ImageBuf<T>) -> Result<f64, MetricsError> {
    check_sizes(a, b)?;
    let sum: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio against a unit peak, in dB, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr<T: Scalar>(a: &ImageBuf<T>, b: &ImageBuf<T>) -> Result<f64, MetricsError> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((-10.0 * e.log10()).min(PSNR_CAP_DB))
}

/// Normalized Gaussian window used by SSIM, shrunk to fit small images.
fn gaussian_window(n: usize) -> Vec<f64> {
    let mid = (n as f64 - 1.0) / 2.0;
    let mut w: Vec<f64> = (0..n)
        .map(|i| {
            let d = i as f64 - mid;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Mean structural similarity over all fully-contained windows, averaged
/// across channels. Uses an 11-tap Gaussian window (sigma 1.5) against a
/// unit dynamic range; the window shrinks to min(11, H, W) on small images.
pub fn ssim<T: Scalar>(a: &ImageBuf<T>, b: &ImageBuf<T>) -> Result<f64, MetricsError> {
    check_sizes(a, b)?;
    let (h, w) = (a.height(), a.width());
    let n = SSIM_WINDOW.min(h).min(w);
    let win = gaussian_window(n);
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut channel_means = Vec::with_capacity(crate::radiometry::CHANNELS);
    for c in 0..crate::radiometry::CHANNELS {
        let mut acc = 0.0;
        let mut count = 0usize;
        for y0 in 0..=(h - n) {
            for x0 in 0..=(w - n) {
                let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..n {
                    for dx in 0..n {
                        let wt = win[dy] * win[dx];
                        let x = a.get(c, y0 + dy, x0 + dx).as_f64();
                        let y = b.get(c, y0 + dy, x0 + dx).as_f64();
                        mx += wt * x;
                        my += wt * y;
                        mxx += wt * x * x;
                        myy += wt * y * y;
                        mxy += wt * x * y;
                    }
                }
                let vx = mxx - mx * mx;
                let vy = myy - my * my;
                let cov = mxy - mx * my;
                acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                count += 1;
            }
        }
        channel_means.push(acc / count as f64);
    }
    Ok(channel_means.iter().sum::<f64>() / channel_means.len() as f64)
}

/// PSNR after mu-law tonemapping both normalized radiance images.
pub fn psnr_mu<T: Scalar>(a: &HdrImage<T>, b: &HdrImage<T>, mu: f64) -> Result<f64, MetricsError> {
    psnr(mu_tonemap(a, mu)?.buf(), mu_tonemap(b, mu)?.buf())
}

/// SSIM after mu-law tonemapping both normalized radiance images.
pub fn ssim_mu<T: Scalar>(a: &HdrImage<T>, b: &HdrImage<T>, mu: f64) -> Result<f64, MetricsError> {
    ssim(mu_tonemap(a, mu)?.buf(), mu_tonemap(b, mu)?.buf())
}

pub fn psnr_linear<T: Scalar>(a: &HdrImage<T>, b: &HdrImage<T>) -> Result<f64, MetricsError> {
    psnr(a.buf(), b.buf())
}

pub fn ssim_linear<T: Scalar>(a: &HdrImage<T>, b: &HdrImage<T>) -> Result<f64, MetricsError> {
    ssim(a.buf(), b.buf())
}

/// Mean luminance of one display-referred frame: the plain mean over all
/// pixels and channels.
pub fn frame_luminance<T: Scalar>(frame: &LdrImage<T>) -> f64 {
    frame.buf().mean()
}

/// Mean of per-frame mean luminances.
pub fn l_avg<T: Scalar>(frames: &[LdrImage<T>]) -> Result<f64, MetricsError> {
    if frames.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    Ok(frames.iter().map(frame_luminance).sum::<f64>() / frames.len() as f64)
}

/// Luminance standard deviation: population standard deviation of the
/// per-frame mean luminances. Zero for any constant-luminance sequence.
pub fn lsd<T: Scalar>(frames: &[LdrImage<T>]) -> Result<f64, MetricsError> {
    let avg = l_avg(frames)?;
    let var: f64 = frames
        .iter()
        .map(|f| {
            let d = frame_luminance(f) - avg;
            d * d
        })
        .sum::<f64>()
        / frames.len() as f64;
    Ok(var.sqrt())
}

/// Temporal SSIM: mean SSIM over consecutive frame pairs. A single frame
/// has no pairs, so the statistic is absent.
pub fn t_ssim<T: Scalar>(frames: &[LdrImage<T>]) -> Result<Option<f64>, MetricsError> {
    if frames.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    if frames.len() == 1 {
        return Ok(None);
    }
    let mut acc = 0.0;
    for pair in frames.windows(2) {
        acc += ssim(pair[0].buf(), pair[1].buf())?;
    }
    Ok(Some(acc / (frames.len() - 1) as f64))
}

/// How a raw capture stream is mapped to display-referred frames before
/// stability statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StabilityDomain {
    /// Use the captured gamma-encoded values as displayed.
    Display,
    /// Undo each frame's exposure, normalize by the white point, then
    /// compress with the mu-law tonemap. Isolates flicker that survives
    /// exposure compensation (clipping, quantization, noise).
    TonemappedLinear { mu: f64, white_point: f64 },
}

/// Maps a capture stream into the display-referred frames the stability
/// metrics consume.
pub fn stability_frames<T: Scalar>(
    stream: &[LdrFrame<T>],
    domain: StabilityDomain,
) -> Result<Vec<LdrImage<T>>, MetricsError> {
    if stream.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    stream
        .iter()
        .map(|f| match domain {
            StabilityDomain::Display => Ok(f.image.clone()),
            StabilityDomain::TonemappedLinear { mu, white_point } => {
                let linear = gamma_to_linear(&f.image, &f.meta)?;
                Ok(mu_tonemap(&linear.scale(1.0 / white_point)?, mu)?)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameFidelity {
    pub frame: usize,
    pub psnr_mu: f64,
    pub psnr_linear: f64,
    pub ssim_mu: f64,
    pub ssim_linear: f64,
}

/// Full evaluation of one reconstructed sequence: per-frame fidelity where
/// ground truth exists, sequence-level stability always.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_frame: Vec<FrameFidelity>,
    pub mean_psnr_mu: Option<f64>,
    pub mean_psnr_linear: Option<f64>,
    pub mean_ssim_mu: Option<f64>,
    pub mean_ssim_linear: Option<f64>,
    pub lsd: f64,
    pub t_ssim: Option<f64>,
    pub l_avg: f64,
}

impl MetricsReport {
    /// Per-frame fidelity table. Sequence statistics live in the JSON form.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,psnr_mu,psnr_linear,ssim_mu,ssim_linear\n");
        for f in &self.per_frame {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6}\n",
                f.frame, f.psnr_mu, f.psnr_linear, f.ssim_mu, f.ssim_linear
            ));
        }
        out
    }
}

/// Scores a reconstructed sequence. `outputs` holds normalized radiance;
/// each slot of `ground_truths` optionally holds the matching normalized
/// reference radiance. Stability statistics are computed on the mu-law
/// tonemapped outputs.
pub fn evaluate_sequence<T: Scalar>(
    outputs: &[HdrImage<T>],
    ground_truths: &[Option<HdrImage<T>>],
    mu: f64,
) -> Result<MetricsReport, MetricsError> {
    if outputs.is_empty() {
        return Err(MetricsError::EmptySequence);
    }
    if ground_truths.len() != outputs.len() {
        return Err(MetricsError::LengthMismatch(outputs.len(), ground_truths.len()));
    }
    let mut per_frame = Vec::new();
    for (i, (out, gt)) in outputs.iter().zip(ground_truths).enumerate() {
        if let Some(gt) = gt {
            per_frame.push(FrameFidelity {
                frame: i,
                psnr_mu: psnr_mu(out, gt, mu)?,
                psnr_linear: psnr_linear(out, gt)?,
                ssim_mu: ssim_mu(out, gt, mu)?,
                ssim_linear: ssim_linear(out, gt)?,
            });
        }
    }
    let tonemapped: Vec<LdrImage<T>> =
        outputs.iter().map(|h| mu_tonemap(h, mu)).collect::<Result<_, _>>()?;
    let mean_of = |pick: fn(&FrameFidelity) -> f64| {
        (!per_frame.is_empty())
            .then(|| per_frame.iter().map(pick).sum::<f64>() / per_frame.len() as f64)
    };
    Ok(MetricsReport {
        mean_psnr_mu: mean_of(|f| f.psnr_mu),
        mean_psnr_linear: mean_of(|f| f.psnr_linear),
        mean_ssim_mu: mean_of(|f| f.ssim_mu),
        mean_ssim_linear: mean_of(|f| f.ssim_linear),
        lsd: lsd(&tonemapped)?,
        t_ssim: t_ssim(&tonemapped)?,
        l_avg: l_avg(&tonemapped)?,
        per_frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::derive_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn flat(v: f64) -> ImageBuf<f64> {
        ImageBuf::from_fn(12, 13, |_, _, _| v)
    }

    fn random_buf(h: usize, w: usize, label: &str) -> ImageBuf<f64> {
        let mut rng = derive_rng(77, label);
        ImageBuf::from_fn(h, w, |_, _, _| rng.random_range(0.0..1.0))
    }

    #[test]
    fn psnr_identical_is_capped() {
        let a = random_buf(8, 8, "cap");
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn psnr_matches_hand_value_at_mse_point_zero_one() {
        let p = psnr(&flat(0.2), &flat(0.3)).unwrap();
        assert!((p - 20.0).abs() < 1e-9, "got {p}");
    }

    #[test]
    fn ssim_identical_is_one_and_offset_is_below_one() {
        let a = random_buf(16, 16, "ssim");
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let s = ssim(&flat(0.3), &flat(0.8)).unwrap();
        assert!(s < 1.0, "luminance term must punish the offset, got {s}");
    }

    #[test]
    fn ssim_window_shrinks_below_eleven_pixels() {
        let a = random_buf(8, 8, "small-a");
        let b = random_buf(8, 8, "small-b");
        let s = ssim(&a, &b).unwrap();
        assert!((-1.0..=1.0).contains(&s));
    }

    #[test]
    fn mu_domain_metrics_equal_manual_composition() {
        let a = HdrImage::new(random_buf(10, 10, "mu-a")).unwrap();
        let b = HdrImage::new(random_buf(10, 10, "mu-b")).unwrap();
        let ta = mu_tonemap(&a, 5000.0).unwrap();
        let tb = mu_tonemap(&b, 5000.0).unwrap();
        assert_eq!(psnr_mu(&a, &b, 5000.0).unwrap(), psnr(ta.buf(), tb.buf()).unwrap());
        assert_eq!(ssim_mu(&a, &b, 5000.0).unwrap(), ssim(ta.buf(), tb.buf()).unwrap());
    }

    #[test]
    fn highlight_errors_score_higher_under_mu_than_linear() {
        // Ground truth: dark field with a bright square; reconstruction
        // errs only inside the highlight.
        let gt = ImageBuf::from_fn(16, 16, |_, y, x| if y < 4 && x < 4 { 1.0 } else { 0.05 });
        let out = gt.map_indexed(|_, y, x, v| if y < 4 && x < 4 { v - 0.2 } else { v });
        let gt = HdrImage::new(gt).unwrap();
        let out = HdrImage::new(out).unwrap();
        let p_mu = psnr_mu(&out, &gt, 5000.0).unwrap();
        let p_lin = psnr_linear(&out, &gt).unwrap();
        assert!(p_mu > p_lin, "mu-law must compress highlight errors: {p_mu} vs {p_lin}");
    }

    fn frames_of(means: &[f64]) -> Vec<LdrImage<f64>> {
        means.iter().map(|&v| LdrImage::new(flat(v), None).unwrap()).collect()
    }

    #[test]
    fn luminance_stats_match_hand_values() {
        assert_eq!(l_avg(&frames_of(&[0.5, 0.5, 0.5])).unwrap(), 0.5);
        assert!((l_avg(&frames_of(&[0.2, 0.4])).unwrap() - 0.3).abs() < 1e-12);
        assert!((lsd(&frames_of(&[0.2, 0.4])).unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(lsd(&frames_of(&[0.7; 5])).unwrap(), 0.0);
    }

    #[test]
    fn duplicating_every_frame_changes_nothing() {
        let base = frames_of(&[0.1, 0.5, 0.3]);
        let doubled = frames_of(&[0.1, 0.1, 0.5, 0.5, 0.3, 0.3]);
        assert!((l_avg(&base).unwrap() - l_avg(&doubled).unwrap()).abs() < 1e-12);
        assert!((lsd(&base).unwrap() - lsd(&doubled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn t_ssim_static_is_one_and_single_frame_absent() {
        let stat = frames_of(&[0.4, 0.4, 0.4]);
        assert!((t_ssim(&stat).unwrap().unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(t_ssim(&frames_of(&[0.4])).unwrap(), None);
        assert!(matches!(t_ssim::<f64>(&[]), Err(MetricsError::EmptySequence)));
    }

    #[test]
    fn evaluate_sequence_caps_on_perfect_reconstruction() {
        let seq: Vec<HdrImage<f64>> = (0..3)
            .map(|i| HdrImage::new(random_buf(9, 9, &format!("seq{i}"))).unwrap())
            .collect();
        let gts: Vec<Option<HdrImage<f64>>> = seq.iter().cloned().map(Some).collect();
        let report = evaluate_sequence(&seq, &gts, 5000.0).unwrap();
        assert_eq!(report.per_frame.len(), 3);
        assert_eq!(report.mean_psnr_mu.unwrap(), PSNR_CAP_DB);
        assert!((report.mean_ssim_linear.unwrap() - 1.0).abs() < 1e-12);
        assert!(report.lsd >= 0.0);
        let json = serde_json::to_string(&report).unwrap();
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(report, back);
        assert!(report.to_csv().lines().count() == 4);
    }

    #[test]
    fn evaluate_sequence_without_ground_truth_keeps_stability_only() {
        let seq = vec![HdrImage::new(random_buf(9, 9, "nogt")).unwrap(); 2];
        let report = evaluate_sequence(&seq, &[None, None], 5000.0).unwrap();
        assert!(report.per_frame.is_empty());
        assert_eq!(report.mean_psnr_mu, None);
        assert!(report.t_ssim.is_some());
    }

    #[test]
    fn evaluate_sequence_rejects_empty_and_mismatched() {
        assert!(matches!(
            evaluate_sequence::<f64>(&[], &[], 5000.0),
            Err(MetricsError::EmptySequence)
        ));
        let seq = vec![HdrImage::new(random_buf(9, 9, "mm")).unwrap()];
        assert!(matches!(
            evaluate_sequence(&seq, &[], 5000.0),
            Err(MetricsError::LengthMismatch(1, 0))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn ssim_is_symmetric(seed in 0u64..500) {
            let a = random_buf(9, 9, &format!("sym-a-{seed}"));
            let b = random_buf(9, 9, &format!("sym-b-{seed}"));
            let ab = ssim(&a, &b).unwrap();
            let ba = ssim(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-9);
        }

        #[test]
        fn psnr_is_symmetric_and_nonnegative_for_unit_range(seed in 0u64..500) {
            let a = random_buf(6, 7, &format!("pa-{seed}"));
            let b = random_buf(6, 7, &format!("pb-{seed}"));
            let ab = psnr(&a, &b).unwrap();
            prop_assert_eq!(ab, psnr(&b, &a).unwrap());
            prop_assert!(ab > 0.0);
        }
    }
}

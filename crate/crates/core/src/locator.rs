//! Injection-band localization from per-layer entropy and
//! activation-gradient profiles.
//!
//! Both profiles are normalized so that "low entropy" and "low gradient"
//! score high, combined into a per-layer score, and turned into a band of
//! layers either via local maxima of the combined score or via the greedy
//! rule (entropy argmin + first layer whose normalized gradient falls
//! under a threshold), each expanded ±s layers and clipped.
//!
//! Ties resolve to the lowest index everywhere, so results are
//! deterministic and identical across repeated runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocatorMethod {
    SkiMaxima,
    Greedy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocatorConfig {
    pub method: LocatorMethod,
    /// Weight on the entropy score in the convex combination.
    pub alpha_mix: f64,
    /// Greedy rule: first layer whose normalized gradient drops below this.
    pub threshold: f64,
    /// Band expansion radius.
    pub s: usize,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        LocatorConfig {
            method: LocatorMethod::Greedy,
            alpha_mix: 0.5,
            threshold: 0.25,
            s: 1,
        }
    }
}

/// Full locator output: profiles, scores, candidates, and the band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkiResult {
    pub h: Vec<f64>,
    pub g: Vec<f64>,
    pub h_tilde: Vec<f64>,
    pub g_tilde: Vec<f64>,
    pub ski: Vec<f64>,
    pub alpha_mix: f64,
    pub candidates: Vec<usize>,
    pub band: Vec<usize>,
    pub s: usize,
    pub method: LocatorMethod,
    /// Greedy: argmin of the entropy profile.
    pub entropy_min_layer: Option<usize>,
    /// Greedy: first layer with normalized gradient below the threshold.
    pub grad_below_layer: Option<usize>,
    pub grad_threshold: Option<f64>,
    /// Set when no layer fell below the threshold; the band was built
    /// from the entropy minimum alone.
    pub grad_below_missing: bool,
}

fn check_profile(name: &str, xs: &[f64]) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::InvalidInput(format!("{name} profile is empty")));
    }
    if xs.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidInput(format!(
            "{name} profile must be finite and nonnegative"
        )));
    }
    Ok(())
}

/// Invert-and-normalize both profiles: a layer at the profile maximum
/// scores 0, lower raw values score closer to 1.
pub fn normalize(h: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_profile("entropy", h)?;
    check_profile("gradient", g)?;
    if h.len() != g.len() {
        return Err(Error::InvalidInput(format!(
            "profile lengths differ: {} vs {}",
            h.len(),
            g.len()
        )));
    }
    let inv = |xs: &[f64], name: &str| -> Result<Vec<f64>> {
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max <= 0.0 {
            return Err(Error::Degenerate(format!(
                "{name} profile is all zero; normalization undefined"
            )));
        }
        Ok(xs.iter().map(|&x| 1.0 - x / max).collect())
    };
    Ok((inv(h, "entropy")?, inv(g, "gradient")?))
}

/// Convex combination `alpha * h_tilde + (1 - alpha) * g_tilde`.
pub fn ski_scores(h_tilde: &[f64], g_tilde: &[f64], alpha_mix: f64) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&alpha_mix) {
        return Err(Error::InvalidInput(format!(
            "alpha {alpha_mix} outside [0, 1]"
        )));
    }
    if h_tilde.len() != g_tilde.len() {
        return Err(Error::InvalidInput("score lengths differ".into()));
    }
    Ok(h_tilde
        .iter()
        .zip(g_tilde.iter())
        .map(|(&h, &g)| alpha_mix * h + (1.0 - alpha_mix) * g)
        .collect())
}

/// Strict local maxima with plateau handling: a maximal run of equal
/// values strictly higher than both boundary neighbors (missing
/// neighbors count as -inf) contributes its lowest index.
pub fn local_maxima(xs: &[f64]) -> Vec<usize> {
    let n = xs.len();
    let mut out = Vec::new();
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[j + 1] == xs[i] {
            j += 1;
        }
        let left = if i == 0 { f64::NEG_INFINITY } else { xs[i - 1] };
        let right = if j + 1 >= n { f64::NEG_INFINITY } else { xs[j + 1] };
        if xs[i] > left && xs[i] > right {
            out.push(i);
        }
        i = j + 1;
    }
    out
}

/// Union of `[c - s, c + s]` windows, clipped to `[0, len)`, sorted and
/// deduplicated.
pub fn expand_band(candidates: &[usize], s: usize, len: usize) -> Vec<usize> {
    let mut band = Vec::new();
    for &c in candidates {
        let lo = c.saturating_sub(s);
        let hi = (c + s).min(len.saturating_sub(1));
        for l in lo..=hi {
            band.push(l);
        }
    }
    band.sort_unstable();
    band.dedup();
    band
}

/// Candidates and band from a precomputed score profile.
pub fn band_from_maxima(ski: &[f64], s: usize) -> (Vec<usize>, Vec<usize>) {
    let candidates = local_maxima(ski);
    let band = expand_band(&candidates, s, ski.len());
    (candidates, band)
}

/// Score-based localization: normalize, combine, take local maxima of
/// the combined score, expand ±s.
pub fn locate_band_maxima(h: &[f64], g: &[f64], alpha_mix: f64, s: usize) -> Result<SkiResult> {
    let (h_tilde, g_tilde) = normalize(h, g)?;
    let ski = ski_scores(&h_tilde, &g_tilde, alpha_mix)?;
    let (candidates, band) = band_from_maxima(&ski, s);
    Ok(SkiResult {
        h: h.to_vec(),
        g: g.to_vec(),
        h_tilde,
        g_tilde,
        ski,
        alpha_mix,
        candidates,
        band,
        s,
        method: LocatorMethod::SkiMaxima,
        entropy_min_layer: None,
        grad_below_layer: None,
        grad_threshold: None,
        grad_below_missing: false,
    })
}

/// Greedy localization: the entropy-minimum layer plus the first layer
/// whose normalized activation gradient (value / profile max) drops
/// below `threshold`, each expanded ±s. When no layer is below the
/// threshold the band comes from the entropy minimum alone and the
/// result is flagged.
pub fn locate_band_greedy(h: &[f64], g: &[f64], threshold: f64, s: usize) -> Result<SkiResult> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidInput(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let (h_tilde, g_tilde) = normalize(h, g)?;
    // lowest index wins ties
    let mut l_h = 0;
    for (i, &v) in h.iter().enumerate() {
        if v < h[l_h] {
            l_h = i;
        }
    }
    let g_max = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut l_g = None;
    for (i, &v) in g.iter().enumerate() {
        if v / g_max < threshold {
            l_g = Some(i);
            break;
        }
    }
    let mut candidates = vec![l_h];
    if let Some(lg) = l_g {
        candidates.push(lg);
    }
    candidates.sort_unstable();
    candidates.dedup();
    let band = expand_band(&candidates, s, h.len());
    // combined score at the default mixing weight, for the report
    let ski = ski_scores(&h_tilde, &g_tilde, 0.5)?;
    Ok(SkiResult {
        h: h.to_vec(),
        g: g.to_vec(),
        h_tilde,
        g_tilde,
        ski,
        alpha_mix: 0.5,
        candidates,
        band,
        s,
        method: LocatorMethod::Greedy,
        entropy_min_layer: Some(l_h),
        grad_below_layer: l_g,
        grad_threshold: Some(threshold),
        grad_below_missing: l_g.is_none(),
    })
}

/// Dispatch on the configured method.
pub fn locate(h: &[f64], g: &[f64], cfg: &LocatorConfig) -> Result<SkiResult> {
    match cfg.method {
        LocatorMethod::SkiMaxima => locate_band_maxima(h, g, cfg.alpha_mix, cfg.s),
        LocatorMethod::Greedy => locate_band_greedy(h, g, cfg.threshold, cfg.s),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_hand_cases() {
        let (ht, gt) = normalize(&[2.0, 1.0, 2.0], &[3.0, 3.0, 1.0]).unwrap();
        assert_eq!(ht, vec![0.0, 0.5, 0.0]);
        assert_eq!(gt[0], 0.0);
        assert_eq!(gt[1], 0.0);
        assert!((gt[2] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn normalize_constant_profile_is_all_zero() {
        let (ht, _) = normalize(&[5.0, 5.0, 5.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(ht, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_all_zero_profile_is_degenerate() {
        assert!(matches!(
            normalize(&[0.0, 0.0], &[1.0, 2.0]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            normalize(&[1.0, 2.0], &[0.0, 0.0]),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn ski_alpha_endpoints_reduce_exactly() {
        let ht = vec![0.0, 0.5, 0.0];
        let gt = vec![0.0, 0.0, 2.0 / 3.0];
        assert_eq!(ski_scores(&ht, &gt, 1.0).unwrap(), ht);
        assert_eq!(ski_scores(&ht, &gt, 0.0).unwrap(), gt);
        let mid = ski_scores(&ht, &gt, 0.5).unwrap();
        assert_eq!(mid[0], 0.0);
        assert_eq!(mid[1], 0.25);
        assert!((mid[2] - 1.0 / 3.0).abs() < 1e-15);
        // argmax is layer 2
        let argmax = mid
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 2);
    }

    #[test]
    fn ski_alpha_out_of_range_is_invalid() {
        assert!(ski_scores(&[0.0], &[0.0], 1.5).is_err());
        assert!(ski_scores(&[0.0], &[0.0], -0.1).is_err());
    }

    #[test]
    fn maxima_interior_peak_with_expansion() {
        let (cands, band) = band_from_maxima(&[0.0, 1.0, 0.0, 0.0], 1);
        assert_eq!(cands, vec![1]);
        assert_eq!(band, vec![0, 1, 2]);
    }

    #[test]
    fn maxima_monotone_profile_clips_at_top() {
        let (cands, band) = band_from_maxima(&[0.1, 0.2, 0.3, 0.4], 1);
        assert_eq!(cands, vec![3]);
        assert_eq!(band, vec![2, 3]);
    }

    #[test]
    fn zero_radius_band_is_candidates() {
        let (cands, band) = band_from_maxima(&[0.0, 1.0, 0.0, 1.0, 0.0], 0);
        assert_eq!(cands, band);
        assert_eq!(cands, vec![1, 3]);
    }

    #[test]
    fn plateau_yields_lowest_index() {
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0, 0.0]), vec![1]);
        assert_eq!(local_maxima(&[1.0, 1.0, 0.0]), vec![0]);
        // plateau not higher than right neighbor is no maximum
        assert_eq!(local_maxima(&[0.0, 1.0, 1.0, 2.0]), vec![3]);
    }

    // The published 12-layer case: entropy argmin at 5, first
    // below-threshold gradient at 0, radius 1 -> {0, 1, 4, 5, 6}.
    #[test]
    fn greedy_reproduces_published_band() {
        let mut h = vec![3.0; 12];
        h[5] = 1.0;
        // normalized gradient profile: layer 0 far below 0.25, others high
        let mut g = vec![1.0; 12];
        g[0] = 0.1;
        let r = locate_band_greedy(&h, &g, 0.25, 1).unwrap();
        assert_eq!(r.entropy_min_layer, Some(5));
        assert_eq!(r.grad_below_layer, Some(0));
        assert_eq!(r.band, vec![0, 1, 4, 5, 6]);
        assert!(!r.grad_below_missing);
    }

    #[test]
    fn greedy_without_threshold_crossing_flags_and_uses_entropy_only() {
        let mut h = vec![3.0; 6];
        h[0] = 0.5;
        let g = vec![1.0, 0.9, 0.8, 0.9, 1.0, 0.95];
        let r = locate_band_greedy(&h, &g, 0.25, 1).unwrap();
        assert!(r.grad_below_missing);
        assert_eq!(r.grad_below_layer, None);
        assert_eq!(r.band, vec![0, 1]);
    }

    #[test]
    fn greedy_threshold_bounds_are_enforced() {
        let h = vec![1.0, 2.0];
        let g = vec![1.0, 2.0];
        assert!(locate_band_greedy(&h, &g, 0.0, 1).is_err());
        assert!(locate_band_greedy(&h, &g, 1.0, 1).is_err());
    }

    // Scaling the gradient profile by any positive constant leaves the
    // normalized scores (up to float noise), candidates, and band intact.
    #[test]
    fn localization_is_scale_invariant() {
        let h = vec![2.0, 1.4, 0.9, 1.1, 2.2, 2.5];
        let g = vec![0.08, 0.3, 0.9, 1.0, 0.95, 0.85];
        let base = locate_band_greedy(&h, &g, 0.25, 1).unwrap();
        for c in [1e-6, 0.5, 3.0, 1e9] {
            let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
            let r = locate_band_greedy(&h, &gs, 0.25, 1).unwrap();
            assert_eq!(r.band, base.band, "c = {c}");
            assert_eq!(r.candidates, base.candidates);
            for (a, b) in r.g_tilde.iter().zip(base.g_tilde.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
            let m = locate_band_maxima(&h, &gs, 0.5, 1).unwrap();
            let mb = locate_band_maxima(&h, &g, 0.5, 1).unwrap();
            assert_eq!(m.band, mb.band);
        }
    }

    #[test]
    fn band_is_always_contained_and_deterministic() {
        let mut rng = crate::rng::Rng::new(20);
        for _ in 0..200 {
            let l = 1 + rng.below(14);
            let h: Vec<f64> = (0..l).map(|_| rng.uniform() + 0.01).collect();
            let g: Vec<f64> = (0..l).map(|_| rng.uniform() + 0.01).collect();
            let s = rng.below(3);
            let a = locate_band_maxima(&h, &g, 0.5, s).unwrap();
            let b = locate_band_maxima(&h, &g, 0.5, s).unwrap();
            assert_eq!(a, b);
            assert!(a.band.iter().all(|&x| x < l));
            assert!(a.band.len() <= l);
            assert!(!a.band.is_empty());
            let gr = locate_band_greedy(&h, &g, 0.25, s).unwrap();
            assert!(gr.band.iter().all(|&x| x < l));
        }
    }

    // When the entropy argmin is a strict maximum of the alpha=1 score,
    // the greedy entropy pick lands inside the maxima band.
    #[test]
    fn greedy_entropy_pick_agrees_with_alpha_one_maxima() {
        let h = vec![2.0, 1.8, 0.7, 1.5, 2.1];
        let g = vec![1.0, 0.8, 0.6, 0.9, 1.0];
        let maxima = locate_band_maxima(&h, &g, 1.0, 1).unwrap();
        let greedy = locate_band_greedy(&h, &g, 0.25, 1).unwrap();
        let lh = greedy.entropy_min_layer.unwrap();
        assert!(maxima.band.contains(&lh));
    }
}

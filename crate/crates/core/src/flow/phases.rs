//! Category activation curves across layers and the three-phase partition
//! derived from category emergence layers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{ActivationStore, CategoryMap, FeatureCategory};

/// Per-category activation curve over layers: smoothed with a centered
/// window-3 moving average (edges truncated), then normalized within the
/// category so the peak is 1.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CurveSet {
    /// (category, normalized curve of length n_layers)
    pub curves: Vec<(FeatureCategory, Vec<f64>)>,
    /// Categories omitted because no feature of theirs ever activates.
    pub omitted: Vec<FeatureCategory>,
}

impl CurveSet {
    pub fn get(&self, c: FeatureCategory) -> Option<&[f64]> {
        self.curves.iter().find(|(cat, _)| *cat == c).map(|(_, v)| v.as_slice())
    }
}

fn smooth3(curve: &[f64]) -> Vec<f64> {
    let n = curve.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(n - 1);
            let mut s = 0.0;
            for v in &curve[lo..=hi] {
                s += v;
            }
            s / (hi - lo + 1) as f64
        })
        .collect()
}

/// Mean activation of each category's features per layer, over all store
/// instances. Categories with all-zero activation are omitted.
pub fn category_curves(store: &ActivationStore, map: &CategoryMap) -> CurveSet {
    let n_layers = store.n_layers();
    let mut set = CurveSet::default();
    for cat in [FeatureCategory::Syntax, FeatureCategory::Concept, FeatureCategory::Emotion] {
        let members = map.of_category(cat);
        if members.is_empty() {
            set.omitted.push(cat);
            continue;
        }
        let mut raw = vec![0.0f64; n_layers];
        for layer in 0..n_layers {
            let feats: Vec<usize> =
                members.iter().filter(|f| f.layer == layer).map(|f| f.feature).collect();
            if feats.is_empty() {
                continue;
            }
            let mut total = 0.0f64;
            for row in store.rows() {
                let z = &row[layer];
                for &f in &feats {
                    total += z.get(f) as f64;
                }
            }
            raw[layer] = total / (store.len() as f64 * feats.len() as f64);
        }
        let smoothed = smooth3(&raw);
        let max = smoothed.iter().cloned().fold(0.0f64, f64::max);
        if max <= 0.0 {
            set.omitted.push(cat);
            continue;
        }
        let normalized = smoothed.iter().map(|&v| v / max).collect();
        set.curves.push((cat, normalized));
    }
    set
}

/// Paper-scale default persistence requirement.
pub const EMERGENCE_K_DEFAULT: usize = 5;
pub const EMERGENCE_TAU_DEFAULT: f64 = 0.05;

/// Persistence window scaled to shallow models: k = 5 at 26 layers and
/// proportionally fewer below, never under 2.
pub fn scaled_k(n_layers: usize) -> usize {
    if n_layers >= 2 * EMERGENCE_K_DEFAULT {
        EMERGENCE_K_DEFAULT
    } else {
        ((EMERGENCE_K_DEFAULT as f64 * n_layers as f64 / 26.0).round() as usize).max(2)
    }
}

/// Earliest layer where the curve exceeds tau * max(curve) for at least k
/// consecutive layers; None when no such layer exists.
pub fn emergence_layer(curve: &[f64], tau: f64, k: usize) -> Option<usize> {
    let n = curve.len();
    if n == 0 || k == 0 || k > n {
        return None;
    }
    let max = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0) {
        return None;
    }
    let bar = tau * max;
    'outer: for start in 0..=(n - k) {
        for j in 0..k {
            if !(curve[start + j] > bar) {
                continue 'outer;
            }
        }
        return Some(start);
    }
    None
}

/// Layer-range partition of the network into phases 1..3.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseMap {
    pub b1: usize,
    pub b2: usize,
    pub n_layers: usize,
    pub emergence_syntax: Option<usize>,
    pub emergence_concept: Option<usize>,
    pub emergence_emotion: Option<usize>,
    pub warning: Option<String>,
}

impl PhaseMap {
    pub fn phase(&self, layer: usize) -> usize {
        if layer < self.b1 {
            1
        } else if layer < self.b2 {
            2
        } else {
            3
        }
    }

    pub fn layers_of(&self, phase: usize) -> std::ops::Range<usize> {
        match phase {
            1 => 0..self.b1,
            2 => self.b1..self.b2,
            3 => self.b2..self.n_layers,
            _ => panic!("phase index must be 1..=3"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b1 <= self.b2 && self.b2 <= self.n_layers) {
            return Err(Error::config("phase boundaries must satisfy 0 <= b1 <= b2 <= n_layers"));
        }
        Ok(())
    }
}

/// Phase boundaries from category emergence layers: b1 at concept
/// emergence, b2 at emotion emergence (or n_layers when emotion never
/// emerges, with a warning).
pub fn phase_boundaries(
    emergence_syntax: Option<usize>,
    emergence_concept: Option<usize>,
    emergence_emotion: Option<usize>,
    n_layers: usize,
) -> Result<PhaseMap> {
    if emergence_syntax.is_none() {
        return Err(Error::Eval("syntax category never emerges; cannot anchor phase 1".into()));
    }
    let b1 = emergence_concept
        .ok_or_else(|| Error::Eval("concept emergence missing; cannot form phases".into()))?;
    let (b2, mut warning) = match emergence_emotion {
        Some(e) => (e, None),
        None => (
            n_layers,
            Some("emotion category never emerges; phase 3 set to the empty tail".to_string()),
        ),
    };
    if b2 < b1 {
        return Err(Error::Eval(format!(
            "emotion emerges at layer {} before concept at {}; violates phase ordering",
            b2, b1
        )));
    }
    if b1 == b2 && warning.is_none() {
        warning = Some("empty phase 2: concept and emotion emerge at the same layer".to_string());
    }
    let map = PhaseMap {
        b1,
        b2,
        n_layers,
        emergence_syntax,
        emergence_concept,
        emergence_emotion,
        warning,
    };
    map.validate()?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent brute-force scan used as the oracle.
    fn emergence_oracle(curve: &[f64], tau: f64, k: usize) -> Option<usize> {
        let max = curve.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(max > 0.0) || k == 0 || k > curve.len() {
            return None;
        }
        (0..curve.len()).find(|&start| {
            start + k <= curve.len() && (start..start + k).all(|i| curve[i] > tau * max)
        })
    }

    #[test]
    fn emergence_hand_example() {
        let curve = [0.0, 0.0, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0];
        assert_eq!(emergence_layer(&curve, 0.05, 5), Some(2));
    }

    #[test]
    fn constant_positive_curve_emerges_at_zero() {
        assert_eq!(emergence_layer(&[0.4; 8], 0.05, 5), Some(0));
    }

    #[test]
    fn all_zero_curve_never_emerges() {
        assert_eq!(emergence_layer(&[0.0; 8], 0.05, 5), None);
    }

    #[test]
    fn k_scaling_rule() {
        assert_eq!(scaled_k(26), 5);
        assert_eq!(scaled_k(12), 5);
        assert_eq!(scaled_k(8), 2);
        assert_eq!(scaled_k(3), 2);
    }

    #[test]
    fn matches_oracle_on_random_curves() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let curve: Vec<f64> =
                (0..n).map(|_| if rng.gen_bool(0.2) { 0.0 } else { rng.gen_range(0.0..1.0) }).collect();
            let tau = rng.gen_range(0.01..0.5);
            let k = rng.gen_range(1..=n);
            assert_eq!(
                emergence_layer(&curve, tau, k),
                emergence_oracle(&curve, tau, k),
                "curve {:?} tau {} k {}",
                curve,
                tau,
                k
            );
        }
    }

    proptest! {
        #[test]
        fn emergence_monotone_in_tau(
            curve in proptest::collection::vec(0.0f64..1.0, 1..16),
            tau_lo in 0.01f64..0.3,
            bump in 0.0f64..0.5,
            k in 1usize..6,
        ) {
            let k = k.min(curve.len());
            let tau_hi = tau_lo + bump;
            let lo = emergence_layer(&curve, tau_lo, k);
            let hi = emergence_layer(&curve, tau_hi, k);
            match (lo, hi) {
                (None, Some(_)) => prop_assert!(false, "larger tau cannot create emergence"),
                (Some(a), Some(b)) => prop_assert!(b >= a, "larger tau gave earlier layer"),
                _ => {}
            }
        }
    }

    #[test]
    fn phase_boundaries_definition() {
        let m = phase_boundaries(Some(0), Some(3), Some(6), 8).unwrap();
        assert_eq!((m.b1, m.b2), (3, 6));
        assert_eq!(m.layers_of(1), 0..3);
        assert_eq!(m.layers_of(2), 3..6);
        assert_eq!(m.layers_of(3), 6..8);
        // phases partition [0, n_layers)
        let mut count = vec![0usize; 8];
        for p in 1..=3 {
            for l in m.layers_of(p) {
                count[l] += 1;
            }
        }
        assert!(count.iter().all(|&c| c == 1));
    }

    #[test]
    fn empty_phase_two_is_permitted_with_warning() {
        let m = phase_boundaries(Some(0), Some(2), Some(2), 8).unwrap();
        assert_eq!((m.b1, m.b2), (2, 2));
        assert!(m.warning.is_some());
        assert_eq!(m.layers_of(2), 2..2);
    }

    #[test]
    fn missing_concept_emergence_is_error() {
        assert!(phase_boundaries(Some(0), None, Some(5), 8).is_err());
    }

    #[test]
    fn missing_syntax_emergence_is_error() {
        assert!(phase_boundaries(None, Some(2), Some(5), 8).is_err());
    }

    #[test]
    fn emotion_before_concept_is_error() {
        assert!(phase_boundaries(Some(0), Some(5), Some(3), 8).is_err());
    }

    #[test]
    fn missing_emotion_extends_phase_two() {
        let m = phase_boundaries(Some(0), Some(3), None, 8).unwrap();
        assert_eq!(m.b2, 8);
        assert!(m.warning.is_some());
        assert_eq!(m.layers_of(3), 8..8);
    }
}

//! Automatic metrics: emotion accuracy with per-group breakdowns, distinct
//! n-grams, single-window structural similarity, blur-probability averaging,
//! and a toy cosine lip-sync judge.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;

use crate::error::EmpatheiaError;
use crate::features::strided_indices;

/// Exact-match ratio over parallel prediction/gold label lists.
pub fn emotion_accuracy(preds: &[&str], golds: &[&str]) -> Result<f64, EmpatheiaError> {
    if preds.len() != golds.len() {
        return Err(EmpatheiaError::domain(format!(
            "{} predictions vs {} golds",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Err(EmpatheiaError::domain("accuracy of an empty set is undefined"));
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Correct/total tallies for one breakdown group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GroupTally {
    pub correct: usize,
    pub total: usize,
}

impl GroupTally {
    pub fn accuracy(self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Per-group exact-match tallies; group keys come from the caller (gold
/// emotion, gender, age). Weighted by totals they recompose the overall
/// accuracy exactly.
pub fn accuracy_breakdown(
    preds: &[&str],
    golds: &[&str],
    groups: &[&str],
) -> Result<BTreeMap<String, GroupTally>, EmpatheiaError> {
    if preds.len() != golds.len() || preds.len() != groups.len() {
        return Err(EmpatheiaError::domain(format!(
            "{} predictions, {} golds, {} group keys",
            preds.len(),
            golds.len(),
            groups.len()
        )));
    }
    if preds.is_empty() {
        return Err(EmpatheiaError::domain("accuracy of an empty set is undefined"));
    }
    let mut out: BTreeMap<String, GroupTally> = BTreeMap::new();
    for ((p, g), key) in preds.iter().zip(golds).zip(groups) {
        let t = out
            .entry(key.to_string())
            .or_insert(GroupTally { correct: 0, total: 0 });
        t.total += 1;
        if p == g {
            t.correct += 1;
        }
    }
    Ok(out)
}

/// Whitespace tokenization, lowercased, for distinct-n comparability.
pub fn tokenize_response(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

/// Unique n-grams across all responses over total n-grams.
pub fn distinct_n(responses: &[Vec<String>], n: usize) -> Result<f64, EmpatheiaError> {
    if n == 0 {
        return Err(EmpatheiaError::domain("n-gram order must be at least 1"));
    }
    let mut unique: BTreeSet<&[String]> = BTreeSet::new();
    let mut total = 0usize;
    for response in responses {
        for gram in response.windows(n) {
            unique.insert(gram);
            total += 1;
        }
    }
    if total == 0 {
        return Err(EmpatheiaError::domain(format!(
            "no {n}-grams: every response is shorter than {n} tokens"
        )));
    }
    Ok(unique.len() as f64 / total as f64)
}

/// Single-window structural similarity over two equal-shaped grids.
pub fn ssim(x: &Array2<f64>, y: &Array2<f64>, c1: f64, c2: f64) -> Result<f64, EmpatheiaError> {
    if x.dim() != y.dim() {
        return Err(EmpatheiaError::dimension(format!(
            "grid shapes differ: {:?} vs {:?}",
            x.dim(),
            y.dim()
        )));
    }
    if x.is_empty() {
        return Err(EmpatheiaError::domain("similarity of empty grids is undefined"));
    }
    if c1 <= 0.0 || c2 <= 0.0 {
        return Err(EmpatheiaError::domain(format!(
            "stabilizing constants must be positive, got c1={c1}, c2={c2}"
        )));
    }
    let n = x.len() as f64;
    let mu_x = x.sum() / n;
    let mu_y = y.sum() / n;
    let var_x = x.iter().map(|&v| (v - mu_x).powi(2)).sum::<f64>() / n;
    let var_y = y.iter().map(|&v| (v - mu_y).powi(2)).sum::<f64>() / n;
    let cov = x
        .iter()
        .zip(y.iter())
        .map(|(&a, &b)| (a - mu_x) * (b - mu_y))
        .sum::<f64>()
        / n;
    Ok(((2.0 * mu_x * mu_y + c1) * (2.0 * cov + c2))
        / ((mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)))
}

/// Mean of per-edge blur-detection probabilities.
pub fn cpbd(edge_blur_probs: &[f64]) -> Result<f64, EmpatheiaError> {
    if edge_blur_probs.is_empty() {
        return Err(EmpatheiaError::domain("no edges: blur probability undefined"));
    }
    for &p in edge_blur_probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(EmpatheiaError::domain(format!(
                "edge probability {p} is outside [0, 1]"
            )));
        }
    }
    Ok(edge_blur_probs.iter().sum::<f64>() / edge_blur_probs.len() as f64)
}

/// Trivial gradient-magnitude edge probe: one probability per interior cell,
/// squashed into [0, 1).
pub fn edge_probs_from_grid(grid: &Array2<f64>) -> Vec<f64> {
    let (rows, cols) = grid.dim();
    if rows < 2 || cols < 2 {
        return Vec::new();
    }
    let mut probs = Vec::with_capacity((rows - 1) * (cols - 1));
    for i in 0..rows - 1 {
        for j in 0..cols - 1 {
            let dx = grid[(i + 1, j)] - grid[(i, j)];
            let dy = grid[(i, j + 1)] - grid[(i, j)];
            let g = (dx * dx + dy * dy).sqrt();
            probs.push(g / (1.0 + g));
        }
    }
    probs
}

/// Ratio of aligned frames.
pub fn sync_confidence(aligned: usize, total: usize) -> Result<f64, EmpatheiaError> {
    if total == 0 {
        return Err(EmpatheiaError::domain("no frames: sync confidence undefined"));
    }
    if aligned > total {
        return Err(EmpatheiaError::domain(format!(
            "{aligned} aligned frames exceed {total} total"
        )));
    }
    Ok(aligned as f64 / total as f64)
}

/// Toy alignment judge: pair frames across the two streams (the longer one
/// strided down), compare cosine over the shared leading dims, count pairs
/// at or above tau. Returns (aligned, total).
pub fn toy_sync_judge(
    audio: &Array2<f64>,
    video: &Array2<f64>,
    tau: f64,
) -> Result<(usize, usize), EmpatheiaError> {
    if audio.nrows() == 0 || video.nrows() == 0 {
        return Err(EmpatheiaError::domain("sync judge needs frames in both streams"));
    }
    let n = audio.nrows().min(video.nrows());
    let w = audio.ncols().min(video.ncols());
    if w == 0 {
        return Err(EmpatheiaError::domain("sync judge needs nonempty feature rows"));
    }
    let a_idx = strided_indices(audio.nrows(), n);
    let v_idx = strided_indices(video.nrows(), n);
    let mut aligned = 0usize;
    for k in 0..n {
        let a = audio.row(a_idx[k]);
        let v = video.row(v_idx[k]);
        let dot: f64 = (0..w).map(|j| a[j] * v[j]).sum();
        let na: f64 = (0..w).map(|j| a[j] * a[j]).sum::<f64>().sqrt();
        let nv: f64 = (0..w).map(|j| v[j] * v[j]).sum::<f64>().sqrt();
        let cos = if na == 0.0 || nv == 0.0 { 0.0 } else { dot / (na * nv) };
        if cos >= tau {
            aligned += 1;
        }
    }
    Ok((aligned, n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn accuracy_hand_counts() {
        assert_eq!(emotion_accuracy(&["sad", "happy"], &["sad", "happy"]).unwrap(), 1.0);
        assert_eq!(
            emotion_accuracy(&["sad", "happy", "fear", "sad"], &["sad", "happy", "angry", "sad"])
                .unwrap(),
            0.75
        );
        assert!(emotion_accuracy(&["sad"], &[]).is_err());
        assert!(emotion_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn breakdown_recomposes_overall_exactly() {
        let preds = ["sad", "sad", "fear", "angry", "sad"];
        let golds = ["sad", "sad", "sad", "fear", "sad"];
        // group by gold emotion: sad right 3 of 4 times, fear never
        let groups = golds;
        let b = accuracy_breakdown(&preds, &golds, &groups).unwrap();
        assert_eq!(b["sad"].accuracy(), 0.75);
        assert_eq!(b["fear"].accuracy(), 0.0);
        let total: usize = b.values().map(|t| t.total).sum();
        let correct: usize = b.values().map(|t| t.correct).sum();
        assert_eq!(total, preds.len());
        assert_eq!(
            correct as f64 / total as f64,
            emotion_accuracy(&preds, &golds).unwrap()
        );
    }

    #[test]
    fn distinct_hand_counts() {
        let corpus = vec![toks(&["i", "am", "am", "sad"])];
        assert_eq!(distinct_n(&corpus, 1).unwrap(), 0.75);
        assert_eq!(distinct_n(&corpus, 2).unwrap(), 1.0);
        let same = vec![toks(&["a", "a", "a", "a"])];
        assert_eq!(distinct_n(&same, 1).unwrap(), 0.25);
        // pooled across responses: {a b} unique over 4 total
        let two = vec![toks(&["a", "b"]), toks(&["a", "b"])];
        assert_eq!(distinct_n(&two, 1).unwrap(), 0.5);
        assert!(distinct_n(&[toks(&["one"])], 2).is_err());
        assert!(distinct_n(&[], 1).is_err());
        assert_eq!(tokenize_response("The  quick Fox"), toks(&["the", "quick", "fox"]));
    }

    #[test]
    fn ssim_identity_symmetry_and_guards() {
        let x = Array2::from_shape_fn((8, 8), |(i, j)| ((i * 8 + j) as f64 * 0.37).sin());
        let y = Array2::from_shape_fn((8, 8), |(i, j)| ((i * 3 + j) as f64 * 0.21).cos());
        let c1 = 1e-4;
        let c2 = 9e-4;
        assert!((ssim(&x, &x, c1, c2).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim(&x, &y, c1, c2).unwrap(), ssim(&y, &x, c1, c2).unwrap());
        let v = ssim(&x, &y, c1, c2).unwrap();
        assert!((-1.0..=1.0).contains(&v));
        // anti-correlated zero-mean grids push the score negative
        let zm = Array2::from_shape_fn((4, 4), |(i, j)| if (i + j) % 2 == 0 { 1.0 } else { -1.0 });
        assert!(ssim(&zm, &zm.mapv(|v| -v), c1, c2).unwrap() < 0.0);
        assert!(ssim(&x, &Array2::zeros((4, 4)), c1, c2).is_err());
        assert!(ssim(&x, &y, 0.0, c2).is_err());
        assert!(ssim(&x, &y, c1, -1.0).is_err());
    }

    #[test]
    fn cpbd_hand_counts_and_mean_linearity() {
        assert_eq!(cpbd(&[0.5, 0.5, 0.5]).unwrap(), 0.5);
        assert!((cpbd(&[0.2, 0.4, 0.6]).unwrap() - 0.4).abs() < 1e-12);
        assert_eq!(cpbd(&[0.7]).unwrap(), 0.7);
        let a = [0.1, 0.9, 0.3, 0.5, 0.2];
        let doubled: Vec<f64> = a.iter().chain(a.iter()).copied().collect();
        assert_eq!(cpbd(&a).unwrap(), cpbd(&doubled).unwrap());
        assert!(cpbd(&[]).is_err());
        assert!(cpbd(&[1.2]).is_err());
        assert!(cpbd(&[-0.1]).is_err());
    }

    #[test]
    fn edge_probe_shape_and_range() {
        let grid = Array2::from_shape_fn((5, 6), |(i, j)| (i as f64 - j as f64) * 0.8);
        let probs = edge_probs_from_grid(&grid);
        assert_eq!(probs.len(), 4 * 5);
        assert!(probs.iter().all(|p| (0.0..1.0).contains(p)));
        assert!(edge_probs_from_grid(&Array2::zeros((1, 4))).is_empty());
        assert!(cpbd(&probs).is_ok());
    }

    #[test]
    fn sync_ratio_and_toy_judge() {
        assert_eq!(sync_confidence(4, 4).unwrap(), 1.0);
        assert_eq!(sync_confidence(3, 4).unwrap(), 0.75);
        assert!(sync_confidence(1, 0).is_err());
        assert!(sync_confidence(5, 4).is_err());

        // nonnegative cosines with tau = 0 -> everything aligned
        let a = Array2::from_elem((4, 3), 0.5);
        let v = Array2::from_elem((6, 5), 0.25);
        let (aligned, total) = toy_sync_judge(&a, &v, 0.0).unwrap();
        assert_eq!((aligned, total), (4, 4));
        assert_eq!(sync_confidence(aligned, total).unwrap(), 1.0);

        // opposed vectors fall below a 0.5 threshold
        let opp = Array2::from_elem((4, 3), -0.5);
        let (aligned, total) = toy_sync_judge(&a, &opp, 0.5).unwrap();
        assert_eq!((aligned, total), (0, 4));

        // zero rows count as cosine 0: aligned at tau 0, not at tau 0.5
        let zero = Array2::zeros((4, 3));
        assert_eq!(toy_sync_judge(&a, &zero, 0.0).unwrap().0, 4);
        assert_eq!(toy_sync_judge(&a, &zero, 0.5).unwrap().0, 0);

        assert!(toy_sync_judge(&Array2::zeros((0, 3)), &v, 0.5).is_err());
    }
}

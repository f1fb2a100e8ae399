//! Confusion-matrix metrics (per-class accuracy, OA, AA, Kappa), multi-trial
//! aggregation, the Table-style text report, and classification-map images.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Metrics of one run. The confusion matrix is truth-major (rows = truth);
/// entries are sample counts, or summed weights for the pixel-weighted
/// variant.
#[derive(Debug, Clone)]
pub struct ClassificationReport {
    pub confusion: Vec<Vec<f64>>,
    /// Per class 1..=C; None when the class is absent from the truth.
    pub per_class: Vec<Option<f64>>,
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
}

/// Unweighted metrics: every superpixel counts once.
pub fn compute_metrics(pred: &[u16], truth: &[u16]) -> Result<ClassificationReport> {
    let weights = vec![1.0; pred.len()];
    compute_metrics_weighted(pred, truth, &weights)
}

/// Metrics with per-sample weights (e.g. member-pixel counts, so accuracy is
/// pixel- rather than superpixel-weighted).
pub fn compute_metrics_weighted(pred: &[u16], truth: &[u16], weights: &[f64]) -> Result<ClassificationReport> {
    if pred.is_empty() {
        return Err(Error::contract("compute_metrics", "empty input"));
    }
    if pred.len() != truth.len() || pred.len() != weights.len() {
        return Err(Error::contract(
            "compute_metrics",
            format!(
                "length mismatch: {} predictions, {} labels, {} weights",
                pred.len(),
                truth.len(),
                weights.len()
            ),
        ));
    }
    let classes = pred
        .iter()
        .chain(truth)
        .copied()
        .max()
        .map(usize::from)
        .unwrap_or(0);
    if pred.iter().chain(truth).any(|&l| l == 0) {
        return Err(Error::contract("compute_metrics", "labels must be in 1..=C"));
    }

    let mut confusion = vec![vec![0.0f64; classes]; classes];
    for ((&p, &t), &w) in pred.iter().zip(truth).zip(weights) {
        confusion[usize::from(t) - 1][usize::from(p) - 1] += w;
    }

    let total: f64 = confusion.iter().flatten().sum();
    let trace: f64 = (0..classes).map(|i| confusion[i][i]).sum();
    let oa = trace / total;

    let mut per_class = Vec::with_capacity(classes);
    let mut present = 0usize;
    let mut aa_sum = 0.0;
    for i in 0..classes {
        let row: f64 = confusion[i].iter().sum();
        if row > 0.0 {
            let acc = confusion[i][i] / row;
            per_class.push(Some(acc));
            aa_sum += acc;
            present += 1;
        } else {
            per_class.push(None);
        }
    }
    let aa = aa_sum / present as f64;

    let mut pe = 0.0;
    for i in 0..classes {
        let row: f64 = confusion[i].iter().sum();
        let col: f64 = (0..classes).map(|j| confusion[j][i]).sum();
        pe += row * col;
    }
    pe /= total * total;
    let kappa = if pe >= 1.0 {
        // single-class degenerate case
        if oa >= 1.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (oa - pe) / (1.0 - pe)
    };

    Ok(ClassificationReport {
        confusion,
        per_class,
        oa,
        aa,
        kappa,
    })
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n = 1).
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}

/// Per-metric mean and std over independent runs.
#[derive(Debug, Clone)]
pub struct TrialSummary {
    pub n: usize,
    pub oa: (f64, f64),
    pub aa: (f64, f64),
    pub kappa: (f64, f64),
    /// Aggregated over the trials where the class was present.
    pub per_class: Vec<Option<(f64, f64)>>,
}

pub fn aggregate_trials(reports: &[ClassificationReport]) -> Result<TrialSummary> {
    if reports.is_empty() {
        return Err(Error::contract("aggregate_trials", "no reports"));
    }
    let classes = reports.iter().map(|r| r.per_class.len()).max().unwrap();
    let collect = |f: &dyn Fn(&ClassificationReport) -> f64| -> Vec<f64> {
        reports.iter().map(f).collect()
    };
    let mut per_class = Vec::with_capacity(classes);
    for c in 0..classes {
        let values: Vec<f64> = reports
            .iter()
            .filter_map(|r| r.per_class.get(c).copied().flatten())
            .collect();
        per_class.push(if values.is_empty() { None } else { Some(mean_std(&values)) });
    }
    Ok(TrialSummary {
        n: reports.len(),
        oa: mean_std(&collect(&|r| r.oa)),
        aa: mean_std(&collect(&|r| r.aa)),
        kappa: mean_std(&collect(&|r| r.kappa)),
        per_class,
    })
}

/// Aligned per-class table with an OA/AA/Kappa footer; cells are
/// "mean±std" percentages.
pub fn format_report(summary: &TrialSummary) -> String {
    let cell = |m: f64, s: f64| format!("{:.2}\u{b1}{:.2}", 100.0 * m, 100.0 * s);
    let mut out = String::new();
    writeln!(out, "{:<8}{:>16}   (over {} trial{})", "Class", "Accuracy", summary.n, if summary.n == 1 { "" } else { "s" }).unwrap();
    for (i, entry) in summary.per_class.iter().enumerate() {
        let text = match entry {
            Some((m, s)) => cell(*m, *s),
            None => "-".to_string(),
        };
        writeln!(out, "{:<8}{:>16}", i + 1, text).unwrap();
    }
    writeln!(out, "{:<8}{:>16}", "OA", cell(summary.oa.0, summary.oa.1)).unwrap();
    writeln!(out, "{:<8}{:>16}", "AA", cell(summary.aa.0, summary.aa.1)).unwrap();
    writeln!(out, "{:<8}{:>16}", "Kappa", cell(summary.kappa.0, summary.kappa.1)).unwrap();
    out
}

/// A fixed, well-spaced color per class.
pub fn default_palette(classes: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 16] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ];
    (0..classes)
        .map(|c| {
            if c < BASE.len() {
                BASE[c]
            } else {
                // golden-angle hue walk for anything beyond the fixed set
                let h = (c as f64 * 0.618_033_988_749_895) % 1.0;
                hsv_to_rgb(h, 0.85, 0.9)
            }
        })
        .collect()
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match (i as i64).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

/// Render node predictions back onto the pixel grid as a binary P6 image:
/// one pixel per cube pixel, class color from the palette, background black.
pub fn emit_map(
    height: usize,
    width: usize,
    members: &[Vec<usize>],
    predictions: &[u16],
    palette: &[[u8; 3]],
    path: &Path,
) -> Result<()> {
    if predictions.len() < members.len() {
        return Err(Error::contract(
            "emit_map",
            format!("{} predictions for {} nodes", predictions.len(), members.len()),
        ));
    }
    let mut rgb = vec![0u8; height * width * 3];
    for (node, pixels) in members.iter().enumerate() {
        let class = predictions[node];
        if class == 0 {
            continue;
        }
        let color = palette[(usize::from(class) - 1) % palette.len()];
        for &p in pixels {
            rgb[p * 3..p * 3 + 3].copy_from_slice(&color);
        }
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(&rgb);
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let labels = vec![1u16, 2, 3, 1, 2, 3];
        let r = compute_metrics(&labels, &labels).unwrap();
        assert_eq!(r.oa, 1.0);
        assert_eq!(r.aa, 1.0);
        assert_eq!(r.kappa, 1.0);
    }

    #[test]
    fn chance_agreement_has_zero_kappa() {
        // confusion [[25,25],[25,25]] as explicit label vectors
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for t in 1..=2u16 {
            for p in 1..=2u16 {
                for _ in 0..25 {
                    truth.push(t);
                    pred.push(p);
                }
            }
        }
        let r = compute_metrics(&pred, &truth).unwrap();
        assert!((r.oa - 0.5).abs() < 1e-12);
        assert!(r.kappa.abs() < 1e-12);
    }

    #[test]
    fn hand_worked_two_class_example() {
        // confusion [[30,10],[5,55]]
        let mut pred = Vec::new();
        let mut truth = Vec::new();
        for (t, p, n) in [(1u16, 1u16, 30), (1, 2, 10), (2, 1, 5), (2, 2, 55)] {
            for _ in 0..n {
                truth.push(t);
                pred.push(p);
            }
        }
        let r = compute_metrics(&pred, &truth).unwrap();
        assert!((r.oa - 0.85).abs() < 1e-12);
        assert!((r.aa - 0.8333333333333333).abs() < 1e-12);
        assert!((r.kappa - 0.6808510638297871).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_tally_on_random_vectors() {
        let mut rng = crate::rng::stream(3, "metrics-oracle");
        for _case in 0..2000 {
            let classes = rng.gen_range(1..=6u16);
            let len = rng.gen_range(1..=200usize);
            let pred: Vec<u16> = (0..len).map(|_| rng.gen_range(1..=classes)).collect();
            let truth: Vec<u16> = (0..len).map(|_| rng.gen_range(1..=classes)).collect();
            let r = compute_metrics(&pred, &truth).unwrap();

            // oracle: per-pair tally
            let c = usize::from(pred.iter().chain(&truth).copied().max().unwrap());
            let mut table = vec![vec![0usize; c]; c];
            for (&p, &t) in pred.iter().zip(&truth) {
                table[usize::from(t) - 1][usize::from(p) - 1] += 1;
            }
            let correct: usize = (0..c).map(|i| table[i][i]).sum();
            assert_eq!(r.oa, correct as f64 / len as f64);
            for i in 0..c {
                let row: usize = table[i].iter().sum();
                match r.per_class[i] {
                    Some(acc) => assert_eq!(acc, table[i][i] as f64 / row as f64),
                    None => assert_eq!(row, 0),
                }
            }
            let mut pe = 0.0;
            for i in 0..c {
                let row: usize = table[i].iter().sum();
                let col: usize = (0..c).map(|j| table[j][i]).sum();
                pe += (row * col) as f64;
            }
            pe /= (len * len) as f64;
            if pe < 1.0 {
                assert!((r.kappa - (r.oa - pe) / (1.0 - pe)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn kappa_invariant_under_class_relabeling() {
        let mut rng = crate::rng::stream(5, "metrics-perm");
        let pred: Vec<u16> = (0..300).map(|_| rng.gen_range(1..=4u16)).collect();
        let truth: Vec<u16> = (0..300).map(|_| rng.gen_range(1..=4u16)).collect();
        let r = compute_metrics(&pred, &truth).unwrap();
        let perm = [3u16, 1, 4, 2];
        let map = |v: &[u16]| v.iter().map(|&l| perm[usize::from(l) - 1]).collect::<Vec<_>>();
        let rp = compute_metrics(&map(&pred), &map(&truth)).unwrap();
        assert!((r.kappa - rp.kappa).abs() < 1e-12);
        assert!((r.oa - rp.oa).abs() < 1e-12);
    }

    #[test]
    fn kappa_is_one_iff_diagonal() {
        let truth = vec![1u16, 2, 1, 2];
        let diag = compute_metrics(&truth, &truth).unwrap();
        assert_eq!(diag.kappa, 1.0);
        let off = compute_metrics(&[1, 2, 2, 2], &truth).unwrap();
        assert!(off.kappa < 1.0);
    }

    #[test]
    fn degenerate_single_class_kappa() {
        // p_e = 1: all mass in one truth/pred cell
        let r = compute_metrics(&[1, 1, 1], &[1, 1, 1]).unwrap();
        assert_eq!(r.kappa, 1.0);
        // single truth class, imperfect predictions -> oa < 1. Here p_e < 1
        // because predictions spread over two columns.
        let r2 = compute_metrics(&[1, 2, 1], &[1, 1, 1]).unwrap();
        assert!(r2.kappa.abs() < 1e-12);
    }

    #[test]
    fn weighted_with_unit_weights_equals_unweighted() {
        let pred = vec![1u16, 2, 2, 3, 1];
        let truth = vec![1u16, 2, 3, 3, 2];
        let a = compute_metrics(&pred, &truth).unwrap();
        let b = compute_metrics_weighted(&pred, &truth, &[1.0; 5]).unwrap();
        assert_eq!(a.oa, b.oa);
        assert_eq!(a.kappa, b.kappa);
    }

    #[test]
    fn weights_shift_overall_accuracy() {
        let pred = vec![1u16, 2];
        let truth = vec![1u16, 1];
        let w = compute_metrics_weighted(&pred, &truth, &[3.0, 1.0]).unwrap();
        assert!((w.oa - 0.75).abs() < 1e-12);
    }

    #[test]
    fn empty_input_rejected() {
        assert!(compute_metrics(&[], &[]).is_err());
    }

    #[test]
    fn single_trial_aggregation_has_zero_std() {
        let r = compute_metrics(&[1, 2, 2], &[1, 2, 1]).unwrap();
        let s = aggregate_trials(std::slice::from_ref(&r)).unwrap();
        assert_eq!(s.n, 1);
        assert_eq!(s.oa.1, 0.0);
        assert_eq!(s.oa.0, r.oa);
    }

    #[test]
    fn two_trial_aggregation_matches_hand_arithmetic() {
        let a = compute_metrics(&[1, 1, 1, 1, 1, 1, 1, 1, 1, 2], &[1u16; 10]).unwrap(); // OA 0.9
        let b = compute_metrics(&[1u16; 10], &[1u16; 10]).unwrap(); // OA 1.0
        let s = aggregate_trials(&[a, b]).unwrap();
        assert!((s.oa.0 - 0.95).abs() < 1e-12);
        assert!((s.oa.1 - 0.07071067811865475).abs() < 1e-12);
    }

    #[test]
    fn aggregation_is_order_invariant() {
        let a = compute_metrics(&[1, 2, 2], &[1, 2, 1]).unwrap();
        let b = compute_metrics(&[1, 1, 2], &[1, 2, 1]).unwrap();
        let s1 = aggregate_trials(&[a.clone(), b.clone()]).unwrap();
        let s2 = aggregate_trials(&[b, a]).unwrap();
        assert_eq!(s1.oa, s2.oa);
        assert_eq!(s1.kappa, s2.kappa);
    }

    #[test]
    fn report_layout_has_per_class_rows_and_footer() {
        let r = compute_metrics(&[1, 2, 2, 1], &[1, 2, 1, 1]).unwrap();
        let s = aggregate_trials(&[r]).unwrap();
        let text = format_report(&s);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("Class"));
        assert!(lines[1].trim_start().starts_with('1'));
        assert!(text.contains("OA"));
        assert!(text.contains("AA"));
        assert!(text.contains("Kappa"));
        assert!(text.contains('\u{b1}'));
    }

    #[test]
    fn all_background_map_is_black() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ppm");
        emit_map(2, 3, &[], &[], &default_palette(4), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert!(bytes[header.len()..].iter().all(|&b| b == 0));
        assert_eq!(bytes.len(), header.len() + 2 * 3 * 3);
    }

    #[test]
    fn two_distinct_classes_paint_two_colors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ppm");
        // 1x4 image, nodes own pixels {0,1} and {2,3}
        emit_map(
            1,
            4,
            &[vec![0, 1], vec![2, 3]],
            &[1, 2],
            &default_palette(4),
            &path,
        )
        .unwrap();
        let bytes = fs::read(&path).unwrap();
        let data = &bytes[b"P6\n4 1\n255\n".len()..];
        let colors: std::collections::BTreeSet<[u8; 3]> = data
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        assert_eq!(colors.len(), 2);
        assert!(!colors.contains(&[0, 0, 0]));
    }

    #[test]
    fn map_dimensions_match_cube() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.ppm");
        emit_map(5, 7, &[vec![0]], &[3], &default_palette(4), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n7 5\n255\n"));
        assert_eq!(bytes.len(), b"P6\n7 5\n255\n".len() + 5 * 7 * 3);
    }
}

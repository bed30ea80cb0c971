//! Image- and pixel-level AUROC and F1-max.
//!
//! AUROC is the Mann–Whitney statistic (ties counted half) computed from
//! rank sums in O(n log n). F1-max sweeps every distinct score threshold
//! with predict-positive meaning score ≥ t. Pixel metrics pool all pixels
//! of the dataset into one scored set.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{self, ModelState};
use crate::tensor::Tensor;

/// Scores with binary labels; the substrate of both metrics.
#[derive(Clone, Debug, Default)]
pub struct ScoredSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, score: f64, label: bool) {
        self.scores.push(score);
        self.labels.push(label);
    }

    pub fn extend(&mut self, scores: &[f64], labels: &[bool]) {
        assert_eq!(scores.len(), labels.len());
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn num_positive(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }
}

/// Rank-sum AUROC with average ranks over ties.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let np = s.num_positive();
    let nn = s.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUROC needs both classes, got {} positive / {} negative",
            np, nn
        )));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].partial_cmp(&s.scores[b]).expect("finite scores"));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the average
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if s.labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (np * (np + 1)) as f64 / 2.0;
    Ok(u / (np as f64 * nn as f64))
}

/// Maximum F1 over thresholds t ∈ {distinct scores} ∪ {−∞}, predicting
/// positive when score ≥ t. F1 is 0 when precision + recall is 0.
pub fn f1_max(s: &ScoredSet) -> Result<f64> {
    let np = s.num_positive();
    if np == 0 {
        return Err(Error::UndefinedMetric("F1-max needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].partial_cmp(&s.scores[a]).expect("finite scores"));

    let mut best = 0.0f64;
    let mut tp = 0usize;
    let mut predicted = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            predicted += 1;
            if s.labels[idx] {
                tp += 1;
            }
        }
        // threshold = this distinct score: everything so far predicted positive
        let precision = tp as f64 / predicted as f64;
        let recall = tp as f64 / np as f64;
        if precision + recall > 0.0 {
            best = best.max(2.0 * precision * recall / (precision + recall));
        }
        i = j + 1;
    }
    Ok(best)
}

/// ROC curve points (fpr, tpr), one per distinct threshold, for plotting.
pub fn roc_points(s: &ScoredSet) -> Result<Vec<(f64, f64)>> {
    let np = s.num_positive();
    let nn = s.len() - np;
    if np == 0 || nn == 0 {
        return Err(Error::UndefinedMetric("ROC needs both classes".into()));
    }
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].partial_cmp(&s.scores[a]).expect("finite scores"));
    let mut pts = vec![(0.0, 0.0)];
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && s.scores[order[j + 1]] == s.scores[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            if s.labels[idx] {
                tp += 1;
            } else {
                fp += 1;
            }
        }
        pts.push((fp as f64 / nn as f64, tp as f64 / np as f64));
        i = j + 1;
    }
    Ok(pts)
}

/// One evaluation sample: image, ground-truth mask, image label, class tag.
#[derive(Clone, Debug)]
pub struct EvalSample {
    pub id: String,
    pub class_tag: String,
    pub image: Tensor,
    /// [H × W] binary
    pub mask: Tensor,
    pub label: bool,
}

/// Anything that maps an image to (anomaly map in [0,1], image score).
/// The model implements it through its forward pass; tests may wire an
/// oracle straight to the ground truth.
pub trait Scorer {
    fn score_sample(&self, sample: &EvalSample) -> Result<(Tensor, f64)>;
}

impl Scorer for ModelState {
    fn score_sample(&self, sample: &EvalSample) -> Result<(Tensor, f64)> {
        let pred = model::predict(&sample.image, self)?;
        Ok((pred.anomaly_map, pred.image_score))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ClassReport {
    pub class: String,
    pub n_images: usize,
    pub image_auroc: Option<f64>,
    pub image_f1max: Option<f64>,
    pub pixel_auroc: Option<f64>,
    pub pixel_f1max: Option<f64>,
    /// set when a slice metric is undefined (single-class slice)
    pub note: Option<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub image_auroc: f64,
    pub image_f1max: f64,
    pub pixel_auroc: f64,
    pub pixel_f1max: f64,
    pub n_images: usize,
    pub n_pixels: usize,
    pub per_class: Vec<ClassReport>,
}

impl MetricsReport {
    /// Aligned-column text table, one row per class plus the pooled total.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<20} {:>10} {:>10} {:>10} {:>10}\n",
            "class", "img_auroc", "img_f1", "px_auroc", "px_f1"
        ));
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{:.4}", x),
            None => "n/a".to_string(),
        };
        for c in &self.per_class {
            out.push_str(&format!(
                "{:<20} {:>10} {:>10} {:>10} {:>10}\n",
                c.class,
                fmt(c.image_auroc),
                fmt(c.image_f1max),
                fmt(c.pixel_auroc),
                fmt(c.pixel_f1max)
            ));
        }
        out.push_str(&format!(
            "{:<20} {:>10.4} {:>10.4} {:>10.4} {:>10.4}\n",
            "ALL", self.image_auroc, self.image_f1max, self.pixel_auroc, self.pixel_f1max
        ));
        out
    }
}

fn slice_metrics(image_set: &ScoredSet, pixel_set: &ScoredSet) -> (ClassReport, Option<String>) {
    let mut note = None;
    let mut get = |r: Result<f64>| match r {
        Ok(v) => Some(v),
        Err(e) => {
            note.get_or_insert_with(|| e.to_string());
            None
        }
    };
    let image_auroc = get(auroc(image_set));
    let image_f1max = get(f1_max(image_set));
    let pixel_auroc = get(auroc(pixel_set));
    let pixel_f1max = get(f1_max(pixel_set));
    (
        ClassReport {
            class: String::new(),
            n_images: image_set.len(),
            image_auroc,
            image_f1max,
            pixel_auroc,
            pixel_f1max,
            note: None,
        },
        note,
    )
}

/// Image metrics over the scores, pixel metrics over all pixels pooled into
/// one set, plus a per-class breakdown computed the same way per tag.
/// Undefined per-class metrics are recorded as notes, never fatal; the
/// pooled metrics require both image labels.
pub fn evaluate_dataset<S: Scorer>(scorer: &S, samples: &[EvalSample]) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::UndefinedMetric("empty evaluation set".into()));
    }
    let mut image_set = ScoredSet::new();
    let mut pixel_set = ScoredSet::new();
    let mut classes: Vec<String> = Vec::new();
    let mut per_class_img: Vec<ScoredSet> = Vec::new();
    let mut per_class_px: Vec<ScoredSet> = Vec::new();

    for sample in samples {
        let (map, score) = scorer.score_sample(sample)?;
        if map.shape() != sample.mask.shape() {
            return Err(Error::dim(
                "evaluate_dataset",
                format!("map {:?} vs mask {:?}", map.shape(), sample.mask.shape()),
            ));
        }
        let px_labels: Vec<bool> = sample.mask.data().iter().map(|&v| v > 0.5).collect();
        image_set.push(score, sample.label);
        pixel_set.extend(map.data(), &px_labels);

        let ci = match classes.iter().position(|c| c == &sample.class_tag) {
            Some(i) => i,
            None => {
                classes.push(sample.class_tag.clone());
                per_class_img.push(ScoredSet::new());
                per_class_px.push(ScoredSet::new());
                classes.len() - 1
            }
        };
        per_class_img[ci].push(score, sample.label);
        per_class_px[ci].extend(map.data(), &px_labels);
    }

    let image_auroc = auroc(&image_set)?;
    let image_f1max = f1_max(&image_set)?;
    let pixel_auroc = auroc(&pixel_set)?;
    let pixel_f1max = f1_max(&pixel_set)?;

    let mut per_class = Vec::new();
    for (i, class) in classes.iter().enumerate() {
        let (mut report, note) = slice_metrics(&per_class_img[i], &per_class_px[i]);
        report.class = class.clone();
        report.note = note;
        per_class.push(report);
    }

    Ok(MetricsReport {
        image_auroc,
        image_f1max,
        pixel_auroc,
        pixel_f1max,
        n_images: image_set.len(),
        n_pixels: pixel_set.len(),
        per_class,
    })
}

/// Pooled pixel scored set for a model over samples; used by recomputation
/// oracles and the threshold sweep.
pub fn pooled_pixels<S: Scorer>(scorer: &S, samples: &[EvalSample]) -> Result<ScoredSet> {
    let mut set = ScoredSet::new();
    for sample in samples {
        let (map, _) = scorer.score_sample(sample)?;
        let labels: Vec<bool> = sample.mask.data().iter().map(|&v| v > 0.5).collect();
        set.extend(map.data(), &labels);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(scores: &[f64], labels: &[bool]) -> ScoredSet {
        ScoredSet {
            scores: scores.to_vec(),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn auroc_spec_example() {
        let s = set(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]);
        assert_eq!(auroc(&s).unwrap(), 0.75);
    }

    #[test]
    fn auroc_perfect_separation() {
        let s = set(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]);
        assert_eq!(auroc(&s).unwrap(), 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let s = set(&[0.5, 0.5, 0.5, 0.5], &[false, true, false, true]);
        assert_eq!(auroc(&s).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_class_undefined() {
        let s = set(&[0.1, 0.2], &[true, true]);
        assert!(matches!(auroc(&s), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn f1_max_trivial_separation() {
        let s = set(&[0.9, 0.1], &[true, false]);
        assert_eq!(f1_max(&s).unwrap(), 1.0);
    }

    #[test]
    fn f1_max_spec_sweep_example() {
        // all-positive prediction attains 0.8
        let s = set(&[0.2, 0.6, 0.7], &[true, false, true]);
        assert!((f1_max(&s).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn f1_max_all_positive_labels() {
        let s = set(&[0.3, 0.6, 0.1], &[true, true, true]);
        assert_eq!(f1_max(&s).unwrap(), 1.0);
    }

    #[test]
    fn f1_max_no_positives_undefined() {
        let s = set(&[0.3, 0.6], &[false, false]);
        assert!(matches!(f1_max(&s), Err(Error::UndefinedMetric(_))));
    }

    struct OracleScorer;
    impl Scorer for OracleScorer {
        fn score_sample(&self, sample: &EvalSample) -> Result<(Tensor, f64)> {
            Ok((
                sample.mask.clone(),
                if sample.label { 1.0 } else { 0.0 },
            ))
        }
    }

    struct ConstantScorer;
    impl Scorer for ConstantScorer {
        fn score_sample(&self, sample: &EvalSample) -> Result<(Tensor, f64)> {
            Ok((Tensor::full(sample.mask.shape(), 0.5), 0.5))
        }
    }

    fn toy_samples() -> Vec<EvalSample> {
        let mk = |id: &str, tag: &str, label: bool, mask_bits: [f64; 4]| EvalSample {
            id: id.into(),
            class_tag: tag.into(),
            image: Tensor::zeros(&[3, 2, 2]),
            mask: Tensor::from_vec(&[2, 2], mask_bits.to_vec()).unwrap(),
            label,
        };
        vec![
            mk("0", "bolt", false, [0.0, 0.0, 0.0, 0.0]),
            mk("1", "bolt", true, [1.0, 0.0, 0.0, 0.0]),
            mk("2", "gear", false, [0.0, 0.0, 0.0, 0.0]),
            mk("3", "gear", true, [0.0, 1.0, 1.0, 0.0]),
        ]
    }

    #[test]
    fn oracle_model_scores_all_ones() {
        let report = evaluate_dataset(&OracleScorer, &toy_samples()).unwrap();
        assert_eq!(report.image_auroc, 1.0);
        assert_eq!(report.image_f1max, 1.0);
        assert_eq!(report.pixel_auroc, 1.0);
        assert_eq!(report.pixel_f1max, 1.0);
        assert_eq!(report.per_class.len(), 2);
    }

    #[test]
    fn constant_model_aurocs_half() {
        let report = evaluate_dataset(&ConstantScorer, &toy_samples()).unwrap();
        assert_eq!(report.image_auroc, 0.5);
        assert_eq!(report.pixel_auroc, 0.5);
    }

    #[test]
    fn pooled_pixels_match_hand_pooling() {
        let samples = toy_samples();
        let report = evaluate_dataset(&OracleScorer, &samples).unwrap();
        let mut hand = ScoredSet::new();
        for s in &samples {
            for &v in s.mask.data() {
                hand.push(v, v > 0.5);
            }
        }
        assert_eq!(report.n_pixels, hand.len());
        assert_eq!(report.pixel_auroc, auroc(&hand).unwrap());
        assert_eq!(report.pixel_f1max, f1_max(&hand).unwrap());
    }

    #[test]
    fn single_class_slice_is_noted_not_fatal() {
        let mut samples = toy_samples();
        // a class with only normal images
        samples.push(EvalSample {
            id: "4".into(),
            class_tag: "washer".into(),
            image: Tensor::zeros(&[3, 2, 2]),
            mask: Tensor::zeros(&[2, 2]),
            label: false,
        });
        let report = evaluate_dataset(&OracleScorer, &samples).unwrap();
        let washer = report.per_class.iter().find(|c| c.class == "washer").unwrap();
        assert!(washer.image_auroc.is_none());
        assert!(washer.note.is_some());
    }

    #[test]
    fn table_has_expected_columns() {
        let report = evaluate_dataset(&OracleScorer, &toy_samples()).unwrap();
        let table = report.to_table();
        assert!(table.contains("img_auroc"));
        assert!(table.contains("px_f1"));
        assert!(table.contains("ALL"));
    }
}

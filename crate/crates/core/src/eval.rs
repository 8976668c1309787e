//! Average precision of prompt configurations over externally produced
//! detections.
//!
//! Detections from every prompt of one configuration are pooled per image,
//! collapsed to the single target class and de-duplicated with greedy NMS.
//! The merged set is then matched greedily against ground truth at a fixed
//! IoU threshold and AP is the area under the precision envelope
//! (all-point interpolation).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::fsio;

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_NMS_IOU: f64 = 0.5;

/// Axis-aligned box in pixel coordinates with `min < max` on both axes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let finite = [x_min, y_min, x_max, y_max].iter().all(|v| v.is_finite());
        if !finite || x_min >= x_max || y_min >= y_max {
            return Err(Error::InvalidInput(format!(
                "invalid box [{x_min}, {y_min}, {x_max}, {y_max}]"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    fn lexicographic(&self, other: &BBox) -> Ordering {
        self.to_array()
            .iter()
            .zip(other.to_array().iter())
            .map(|(a, b)| a.total_cmp(b))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let w = a.x_max.min(b.x_max) - a.x_min.max(b.x_min);
    let h = a.y_max.min(b.y_max) - a.y_min.max(b.y_min);
    if w <= 0.0 || h <= 0.0 {
        return 0.0;
    }
    let inter = w * h;
    (inter / (a.area() + b.area() - inter)).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthSet {
    pub class_name: String,
    pub images: BTreeMap<String, Vec<BBox>>,
}

impl GroundTruthSet {
    pub fn num_boxes(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
    pub prompt: String,
}

impl ScoredBox {
    pub fn new(bbox: BBox, score: f64, prompt: impl Into<String>) -> Result<Self> {
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::InvalidInput(format!(
                "detection score {score} outside [0, 1]"
            )));
        }
        Ok(ScoredBox {
            bbox,
            score,
            prompt: prompt.into(),
        })
    }
}

/// Detections of one prompt configuration, per image. An image present
/// with an empty list was evaluated and produced nothing.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionSet {
    pub config_label: String,
    pub images: BTreeMap<String, Vec<ScoredBox>>,
}

impl DetectionSet {
    pub fn new(config_label: impl Into<String>) -> Self {
        DetectionSet {
            config_label: config_label.into(),
            images: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, image_id: impl Into<String>, det: ScoredBox) {
        self.images.entry(image_id.into()).or_default().push(det);
    }

    pub fn len(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distinct prompt texts, in first-seen order.
    pub fn prompts(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        self.images
            .values()
            .flatten()
            .filter(|d| seen.insert(d.prompt.clone()))
            .map(|d| d.prompt.clone())
            .collect()
    }

    /// One set per prompt, each covering this set's full image universe.
    pub fn split_by_prompt(&self) -> Vec<DetectionSet> {
        let prompts = self.prompts();
        if prompts.len() <= 1 {
            return vec![self.clone()];
        }
        prompts
            .iter()
            .map(|p| DetectionSet {
                config_label: self.config_label.clone(),
                images: self
                    .images
                    .iter()
                    .map(|(id, dets)| {
                        (
                            id.clone(),
                            dets.iter().filter(|d| &d.prompt == p).cloned().collect(),
                        )
                    })
                    .collect(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub config_label: String,
    pub ap: f64,
    pub iou_threshold: f64,
    /// (recall, precision) after each ranked detection.
    pub pr_points: Vec<(f64, f64)>,
    pub tp: usize,
    pub fp: usize,
    pub num_gt: usize,
}

/// Pool the per-prompt sets of one configuration and suppress duplicates.
///
/// Within each image, detections are visited by descending score and a
/// detection is dropped when its IoU with an already kept one exceeds
/// `nms_iou`. Survivors keep their original relative order.
pub fn merge_prompt_detections(sets: &[DetectionSet], nms_iou: f64) -> Result<DetectionSet> {
    let Some(first) = sets.first() else {
        return Err(Error::InvalidInput("no detection sets to merge".into()));
    };
    let universe: BTreeSet<&String> = first.images.keys().collect();
    for set in &sets[1..] {
        let other: BTreeSet<&String> = set.images.keys().collect();
        if other != universe {
            let diff: Vec<&str> = universe
                .symmetric_difference(&other)
                .map(|s| s.as_str())
                .collect();
            return Err(Error::InvalidInput(format!(
                "detection sets cover different images: {}",
                diff.join(", ")
            )));
        }
    }

    let mut merged = DetectionSet::new(first.config_label.clone());
    for image in universe {
        let pooled: Vec<ScoredBox> = sets
            .iter()
            .flat_map(|s| s.images[image].iter().cloned())
            .collect();
        merged.images.insert(image.clone(), nms(pooled, nms_iou));
    }
    Ok(merged)
}

fn nms(dets: Vec<ScoredBox>, threshold: f64) -> Vec<ScoredBox> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .total_cmp(&dets[a].score)
            .then_with(|| dets[a].bbox.lexicographic(&dets[b].bbox))
            .then_with(|| dets[a].prompt.cmp(&dets[b].prompt))
            .then(a.cmp(&b))
    });
    let mut keep = vec![false; dets.len()];
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| iou(&dets[k].bbox, &dets[i].bbox) <= threshold)
        {
            kept.push(i);
            keep[i] = true;
        }
    }
    dets.into_iter()
        .zip(keep)
        .filter_map(|(d, k)| k.then_some(d))
        .collect()
}

/// AP of one (already merged) detection set.
pub fn average_precision(
    gt: &GroundTruthSet,
    det: &DetectionSet,
    iou_threshold: f64,
) -> Result<EvalResult> {
    let num_gt = gt.num_boxes();
    if num_gt == 0 {
        return Err(Error::UndefinedMetric(format!(
            "ground truth for {:?} has no boxes",
            gt.class_name
        )));
    }
    if let Some(unknown) = det.images.keys().find(|id| !gt.images.contains_key(*id)) {
        return Err(Error::InvalidInput(format!(
            "detections reference image {unknown:?} which is not in the ground truth"
        )));
    }

    let mut ranked: Vec<(&str, &ScoredBox)> = det
        .images
        .iter()
        .flat_map(|(id, dets)| dets.iter().map(move |d| (id.as_str(), d)))
        .collect();
    ranked.sort_by(|(ia, a), (ib, b)| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| ia.cmp(ib))
            .then_with(|| a.bbox.lexicographic(&b.bbox))
            .then_with(|| a.prompt.cmp(&b.prompt))
    });

    let mut matched: BTreeMap<&str, Vec<bool>> = gt
        .images
        .iter()
        .map(|(id, boxes)| (id.as_str(), vec![false; boxes.len()]))
        .collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pr_points = Vec::with_capacity(ranked.len());
    for (image, d) in ranked {
        let truths = &gt.images[image];
        let used = matched.get_mut(image).expect("image present");
        let mut best: Option<(usize, f64)> = None;
        for (g, truth) in truths.iter().enumerate() {
            if used[g] {
                continue;
            }
            let overlap = iou(&d.bbox, truth);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((g, overlap));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        pr_points.push((tp as f64 / num_gt as f64, tp as f64 / (tp + fp) as f64));
    }

    Ok(EvalResult {
        config_label: det.config_label.clone(),
        ap: envelope_area(&pr_points),
        iou_threshold,
        pr_points,
        tp,
        fp,
        num_gt,
    })
}

/// Σ (r_i − r_{i−1}) · max_{j ≥ i} p_j over the PR sequence, r_0 = 0.
fn envelope_area(points: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut running = 0.0f64;
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        running = running.max(p);
        envelope[i] = running;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (&(r, _), &p) in points.iter().zip(&envelope) {
        area += (r - prev_recall) * p;
        prev_recall = r;
    }
    area.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub nms_iou: f64,
    pub iou_threshold: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            nms_iou: DEFAULT_NMS_IOU,
            iou_threshold: DEFAULT_IOU_THRESHOLD,
        }
    }
}

/// Merge and score each configuration; results follow input order.
pub fn compare_configurations(
    gt: &GroundTruthSet,
    configs: &[DetectionSet],
    options: EvalOptions,
) -> Result<Vec<EvalResult>> {
    compare_configurations_with(Execution::default(), gt, configs, options)
}

pub fn compare_configurations_with(
    exec: Execution,
    gt: &GroundTruthSet,
    configs: &[DetectionSet],
    options: EvalOptions,
) -> Result<Vec<EvalResult>> {
    if configs.is_empty() {
        return Err(Error::InvalidInput("no configurations to compare".into()));
    }
    exec.map(configs, |config| {
        let merged = merge_prompt_detections(&config.split_by_prompt(), options.nms_iou)?;
        average_precision(gt, &merged, options.iou_threshold)
    })
    .into_iter()
    .collect()
}

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    class: String,
    images: Vec<GroundTruthImage>,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthImage {
    id: String,
    boxes: Vec<[f64; 4]>,
}

#[derive(Serialize, Deserialize)]
struct DetectionsFile {
    config: String,
    detections: Vec<DetectionRecord>,
    /// Images evaluated, including those without detections.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    images: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DetectionRecord {
    image: String,
    #[serde(rename = "box")]
    bbox: [f64; 4],
    score: f64,
    prompt: String,
}

pub fn ground_truth_from_json(text: &str) -> Result<GroundTruthSet> {
    let file: GroundTruthFile = serde_json::from_str(text)
        .map_err(|e| Error::InvalidInput(format!("malformed ground-truth file: {e}")))?;
    let mut images = BTreeMap::new();
    for img in file.images {
        let boxes = img
            .boxes
            .iter()
            .map(|&b| BBox::from_array(b))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::InvalidInput(format!("image {:?}: {e}", img.id)))?;
        if images.insert(img.id.clone(), boxes).is_some() {
            return Err(Error::InvalidInput(format!(
                "image id {:?} listed twice",
                img.id
            )));
        }
    }
    Ok(GroundTruthSet {
        class_name: file.class,
        images,
    })
}

pub fn ground_truth_to_json(gt: &GroundTruthSet) -> String {
    let file = GroundTruthFile {
        class: gt.class_name.clone(),
        images: gt
            .images
            .iter()
            .map(|(id, boxes)| GroundTruthImage {
                id: id.clone(),
                boxes: boxes.iter().map(|b| b.to_array()).collect(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&file).expect("ground truth serializes") + "\n"
}

pub fn detections_from_json(text: &str) -> Result<DetectionSet> {
    let file: DetectionsFile = serde_json::from_str(text)
        .map_err(|e| Error::InvalidInput(format!("malformed detections file: {e}")))?;
    let mut set = DetectionSet::new(file.config);
    for id in file.images {
        set.images.entry(id).or_default();
    }
    for (i, rec) in file.detections.into_iter().enumerate() {
        let det = BBox::from_array(rec.bbox)
            .and_then(|b| ScoredBox::new(b, rec.score, rec.prompt))
            .map_err(|e| Error::InvalidInput(format!("detection {i}: {e}")))?;
        set.push(rec.image, det);
    }
    Ok(set)
}

pub fn detections_to_json(set: &DetectionSet) -> String {
    let file = DetectionsFile {
        config: set.config_label.clone(),
        detections: set
            .images
            .iter()
            .flat_map(|(id, dets)| {
                dets.iter().map(move |d| DetectionRecord {
                    image: id.clone(),
                    bbox: d.bbox.to_array(),
                    score: d.score,
                    prompt: d.prompt.clone(),
                })
            })
            .collect(),
        images: set.images.keys().cloned().collect(),
    };
    serde_json::to_string_pretty(&file).expect("detections serialize") + "\n"
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthSet> {
    let text = fsio::read_to_string(path)?;
    ground_truth_from_json(&text).map_err(|e| Error::data_file(path, e.to_string()))
}

pub fn load_detections(path: &Path) -> Result<DetectionSet> {
    let text = fsio::read_to_string(path)?;
    detections_from_json(&text).map_err(|e| Error::data_file(path, e.to_string()))
}

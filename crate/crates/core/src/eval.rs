//! Instance segmentation metrics over point-set masks: per-class precision
//! and recall at an IoU threshold, and AP at IoU 0.5.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::SceneInstances;

pub const IOU_THRESHOLD: f64 = 0.5;

/// |A ∩ B| / |A ∪ B| over ascending index lists.
pub fn mask_iou(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::Undefined("IoU of two empty point sets".into()));
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredMatch {
    /// Index into the prediction list.
    pub pred: usize,
    pub class: usize,
    pub confidence: f64,
    pub gt: Option<usize>,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Predictions in descending confidence order.
    pub preds: Vec<PredMatch>,
    pub gt_classes: Vec<usize>,
    pub gt_covered: Vec<bool>,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.preds.iter().filter(|p| p.gt.is_some()).count()
    }
}

/// Greedy matching: predictions in descending confidence (earlier index on
/// ties) each take the unmatched same-class ground truth of highest IoU,
/// provided the IoU reaches `tau`.
pub fn match_instances(preds: &SceneInstances, gts: &SceneInstances, tau: f64) -> Result<MatchResult> {
    let mut order: Vec<usize> = (0..preds.instances.len()).collect();
    order.sort_by(|&a, &b| {
        preds.instances[b]
            .confidence
            .total_cmp(&preds.instances[a].confidence)
            .then(a.cmp(&b))
    });
    let mut covered = vec![false; gts.instances.len()];
    let mut out = Vec::with_capacity(order.len());
    for pi in order {
        let p = &preds.instances[pi];
        let mut best: Option<(f64, usize)> = None;
        for (gi, g) in gts.instances.iter().enumerate() {
            if covered[gi] || g.class != p.class {
                continue;
            }
            let iou = mask_iou(&p.points, &g.points)?;
            if iou >= tau && best.map_or(true, |(b, _)| iou > b) {
                best = Some((iou, gi));
            }
        }
        if let Some((_, gi)) = best {
            covered[gi] = true;
        }
        out.push(PredMatch {
            pred: pi,
            class: p.class,
            confidence: p.confidence,
            gt: best.map(|b| b.1),
            iou: best.map_or(0.0, |b| b.0),
        });
    }
    Ok(MatchResult {
        preds: out,
        gt_classes: gts.instances.iter().map(|g| g.class).collect(),
        gt_covered: covered,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ClassCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ClassCounts {
    pub fn num_gt(&self) -> usize {
        self.tp + self.fn_
    }
    pub fn num_pred(&self) -> usize {
        self.tp + self.fp
    }
    /// 0 when the class has no predictions.
    pub fn precision(&self) -> f64 {
        if self.num_pred() == 0 {
            0.0
        } else {
            self.tp as f64 / self.num_pred() as f64
        }
    }
    pub fn recall(&self) -> f64 {
        if self.num_gt() == 0 {
            0.0
        } else {
            self.tp as f64 / self.num_gt() as f64
        }
    }
}

/// Per-class counts summed over scenes.
pub fn class_counts(matches: &[MatchResult]) -> BTreeMap<usize, ClassCounts> {
    let mut counts: BTreeMap<usize, ClassCounts> = BTreeMap::new();
    for m in matches {
        for p in &m.preds {
            let c = counts.entry(p.class).or_default();
            if p.gt.is_some() {
                c.tp += 1;
            } else {
                c.fp += 1;
            }
        }
        for (&class, &cov) in m.gt_classes.iter().zip(&m.gt_covered) {
            if !cov {
                counts.entry(class).or_default().fn_ += 1;
            }
        }
    }
    counts
}

/// Unweighted class means of precision and recall over classes that have
/// ground truth somewhere in the set.
pub fn mean_precision_recall(matches: &[MatchResult]) -> Result<(f64, f64)> {
    let counts = class_counts(matches);
    let present: Vec<&ClassCounts> = counts.values().filter(|c| c.num_gt() > 0).collect();
    if present.is_empty() {
        return Err(Error::Empty("ground-truth instances"));
    }
    let n = present.len() as f64;
    Ok((
        present.iter().map(|c| c.precision()).sum::<f64>() / n,
        present.iter().map(|c| c.recall()).sum::<f64>() / n,
    ))
}

/// All-point interpolated AP from ranked hits (descending confidence).
pub fn average_precision(ranked_hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(ranked_hits.len());
    let mut rec = Vec::with_capacity(ranked_hits.len());
    for (k, &hit) in ranked_hits.iter().enumerate() {
        tp += usize::from(hit);
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / num_gt as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_recall = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        if *r > last_recall {
            ap += (r - last_recall) * p;
            last_recall = *r;
        }
    }
    ap
}

/// Per-class AP@50 over a scene set, and its mean over classes with ground
/// truth. Predictions from all scenes are ranked together.
pub fn average_precision_50(matches: &[MatchResult]) -> Result<(BTreeMap<usize, f64>, f64)> {
    let counts = class_counts(matches);
    let mut ranked: BTreeMap<usize, Vec<(f64, usize, bool)>> = BTreeMap::new();
    let mut seq = 0usize;
    for m in matches {
        for p in &m.preds {
            ranked.entry(p.class).or_default().push((p.confidence, seq, p.gt.is_some()));
            seq += 1;
        }
    }
    let mut per_class = BTreeMap::new();
    for (&class, c) in &counts {
        if c.num_gt() == 0 {
            continue;
        }
        let mut list = ranked.remove(&class).unwrap_or_default();
        list.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let hits: Vec<bool> = list.iter().map(|x| x.2).collect();
        per_class.insert(class, average_precision(&hits, c.num_gt()));
    }
    if per_class.is_empty() {
        return Err(Error::Empty("ground-truth instances"));
    }
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    Ok((per_class, mean))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub class: String,
    pub num_gt: usize,
    pub num_pred: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ClassRow>,
    pub m_prec: f64,
    pub m_rec: f64,
    pub m_ap50: f64,
}

/// Matches every (prediction, ground truth) scene pair and summarizes.
/// `names[c]` labels class `c` when present.
pub fn evaluate(pairs: &[(SceneInstances, SceneInstances)], names: &[String]) -> Result<EvalReport> {
    let matches = pairs
        .iter()
        .map(|(p, g)| match_instances(p, g, IOU_THRESHOLD))
        .collect::<Result<Vec<_>>>()?;
    let (m_prec, m_rec) = mean_precision_recall(&matches)?;
    let (ap, m_ap50) = average_precision_50(&matches)?;
    let rows = class_counts(&matches)
        .into_iter()
        .filter(|(_, c)| c.num_gt() > 0)
        .map(|(class, c)| ClassRow {
            class: names.get(class).cloned().unwrap_or_else(|| class.to_string()),
            num_gt: c.num_gt(),
            num_pred: c.num_pred(),
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            precision: c.precision(),
            recall: c.recall(),
            ap50: ap[&class],
        })
        .collect();
    Ok(EvalReport {
        rows,
        m_prec,
        m_rec,
        m_ap50,
    })
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<12} {:>6} {:>6} {:>6} {:>8} {:>8} {:>8}\n",
            "class", "gt", "pred", "tp", "prec", "rec", "AP@50"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>6} {:>6} {:>8.3} {:>8.3} {:>8.3}",
                r.class, r.num_gt, r.num_pred, r.tp, r.precision, r.recall, r.ap50
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>6} {:>6} {:>8.3} {:>8.3} {:>8.3}",
            "mean", "", "", "", self.m_prec, self.m_rec, self.m_ap50
        );
        s
    }

    /// Per-class rows followed by a `mean` row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.serialize(ClassRow {
            class: "mean".into(),
            num_gt: self.rows.iter().map(|r| r.num_gt).sum(),
            num_pred: self.rows.iter().map(|r| r.num_pred).sum(),
            tp: self.rows.iter().map(|r| r.tp).sum(),
            fp: self.rows.iter().map(|r| r.fp).sum(),
            fn_: self.rows.iter().map(|r| r.fn_).sum(),
            precision: self.m_prec,
            recall: self.m_rec,
            ap50: self.m_ap50,
        })?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

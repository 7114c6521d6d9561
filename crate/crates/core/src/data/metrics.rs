//! Segmentation metrics: per-class intersection over union averaged over
//! classes, and the ShapeNet part-segmentation class/instance averages.

use std::fmt;

use crate::error::{Error, Result};

/// Per-class IoU and their average over classes with a non-empty union.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub intersection: Vec<u64>,
    pub union: Vec<u64>,
    /// `None` for classes whose union is empty; those are left out of the
    /// average.
    pub per_class: Vec<Option<f64>>,
    pub average: f64,
}

impl IouReport {
    pub fn excluded_classes(&self) -> Vec<usize> {
        (0..self.per_class.len())
            .filter(|&c| self.per_class[c].is_none())
            .collect()
    }

    /// `class,iou` rows for classes in the average, then `average,<value>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (c, iou) in self.per_class.iter().enumerate() {
            if let Some(iou) = iou {
                out.push_str(&format!("{c},{iou}\n"));
            }
        }
        out.push_str(&format!("average,{}\n", self.average));
        out
    }
}

impl fmt::Display for IouReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6}  {:>12}  {:>12}  {:>8}", "class", "intersection", "union", "iou")?;
        for c in 0..self.per_class.len() {
            match self.per_class[c] {
                Some(iou) => writeln!(
                    f,
                    "{c:>6}  {:>12}  {:>12}  {iou:>8.4}",
                    self.intersection[c], self.union[c]
                )?,
                None => writeln!(f, "{c:>6}  {:>12}  {:>12}  excluded (empty union)", 0, 0)?,
            }
        }
        write!(f, "average IoU: {:.4}", self.average)
    }
}

/// Accumulates confusion counts over any number of labelled clouds.
#[derive(Debug, Clone)]
pub struct SegMetrics {
    num_classes: usize,
    ignore_label: Option<i32>,
    intersection: Vec<u64>,
    union: Vec<u64>,
    evaluated: u64,
}

impl SegMetrics {
    pub fn new(num_classes: usize, ignore_label: Option<i32>) -> Self {
        Self {
            num_classes,
            ignore_label,
            intersection: vec![0; num_classes],
            union: vec![0; num_classes],
            evaluated: 0,
        }
    }

    /// Adds one cloud's predictions. Points whose ground truth is the ignore
    /// label are skipped entirely.
    pub fn add(&mut self, pred: &[i32], gt: &[i32]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!(
                "{} predictions for {} ground-truth labels",
                pred.len(),
                gt.len()
            )));
        }
        let class = |l: i32| (l >= 0 && (l as usize) < self.num_classes).then_some(l as usize);
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == self.ignore_label {
                continue;
            }
            self.evaluated += 1;
            match (class(p), class(g)) {
                (Some(p), Some(g)) if p == g => {
                    self.intersection[p] += 1;
                    self.union[p] += 1;
                }
                (p, g) => {
                    if let Some(p) = p {
                        self.union[p] += 1;
                    }
                    if let Some(g) = g {
                        self.union[g] += 1;
                    }
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> Result<IouReport> {
        if self.evaluated == 0 {
            return Err(Error::EmptyEvaluation("no labelled points to evaluate".into()));
        }
        let per_class: Vec<Option<f64>> = self
            .intersection
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::EmptyEvaluation("every class has an empty union".into()));
        }
        let average = present.iter().sum::<f64>() / present.len() as f64;
        Ok(IouReport {
            intersection: self.intersection.clone(),
            union: self.union.clone(),
            per_class,
            average,
        })
    }
}

/// Per-class IoU of `pred` against `gt`, averaged over classes.
pub fn compute_iou(
    pred: &[i32],
    gt: &[i32],
    num_classes: usize,
    ignore_label: Option<i32>,
) -> Result<IouReport> {
    let mut m = SegMetrics::new(num_classes, ignore_label);
    m.add(pred, gt)?;
    m.report()
}

/// One evaluated shape: its category, the number of part labels in that
/// category, and per-point labels.
#[derive(Debug, Clone)]
pub struct ShapeObject {
    pub category: String,
    pub num_parts: usize,
    pub pred: Vec<i32>,
    pub gt: Vec<i32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryScore {
    pub category: String,
    pub objects: usize,
    /// Mean of per-object mIoU; `None` if the category had no objects.
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeNetReport {
    /// Mean over categories of the per-category mIoU.
    pub class_average: f64,
    /// Mean over all objects of the per-object mIoU.
    pub instance_average: f64,
    pub per_category: Vec<CategoryScore>,
    pub warnings: Vec<String>,
}

impl fmt::Display for ShapeNetReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<16}  {:>7}  {:>8}", "category", "objects", "mIoU")?;
        for c in &self.per_category {
            match c.miou {
                Some(m) => writeln!(f, "{:<16}  {:>7}  {m:>8.4}", c.category, c.objects)?,
                None => writeln!(f, "{:<16}  {:>7}  excluded", c.category, c.objects)?,
            }
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        writeln!(f, "class average mIoU: {:.4}", self.class_average)?;
        write!(f, "instance average mIoU: {:.4}", self.instance_average)
    }
}

/// Class-average and instance-average mIoU over a set of shapes.
///
/// Each object's mIoU is its class-averaged IoU over the category's part
/// labels. Categories listed in `categories` but without objects are
/// reported with a warning and excluded from the class average.
pub fn shapenet_miou(objects: &[ShapeObject], categories: &[String]) -> Result<ShapeNetReport> {
    let mut names: Vec<String> = categories.to_vec();
    for o in objects {
        if !names.contains(&o.category) {
            names.push(o.category.clone());
        }
    }
    let mut sums = vec![(0.0, 0usize); names.len()];
    let mut all = Vec::with_capacity(objects.len());
    for o in objects {
        let miou = compute_iou(&o.pred, &o.gt, o.num_parts, None)?.average;
        let c = names.iter().position(|n| *n == o.category).unwrap();
        sums[c].0 += miou;
        sums[c].1 += 1;
        all.push(miou);
    }
    if all.is_empty() {
        return Err(Error::EmptyEvaluation("no objects to evaluate".into()));
    }
    let mut warnings = Vec::new();
    let per_category: Vec<CategoryScore> = names
        .iter()
        .zip(&sums)
        .map(|(name, &(sum, count))| {
            if count == 0 {
                warnings.push(format!("category '{name}' has no objects and is excluded"));
            }
            CategoryScore {
                category: name.clone(),
                objects: count,
                miou: (count > 0).then(|| sum / count as f64),
            }
        })
        .collect();
    let scored: Vec<f64> = per_category.iter().filter_map(|c| c.miou).collect();
    Ok(ShapeNetReport {
        class_average: scored.iter().sum::<f64>() / scored.len() as f64,
        instance_average: all.iter().sum::<f64>() / all.len() as f64,
        per_category,
        warnings,
    })
}

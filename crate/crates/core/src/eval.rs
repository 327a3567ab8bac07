//! Datasets in the neutral layout and mIoU scoring.
//!
//! ```text
//! DATA/
//!   classes.txt        one class per line, line i = label i
//!   images/<stem>.ppm
//!   labels/<stem>.pgm  pixel = class index, 255 = ignore
//! ```

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::netpbm::{self, GrayImage};
use crate::pipeline::{read_class_names, sliding_window_segment, InferenceConfig, TextBank};

pub const IGNORE_INDEX: u8 = 255;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub stem: String,
    pub image: PathBuf,
    pub label: PathBuf,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub classes: Vec<String>,
    pub ignore_index: u8,
}

impl Dataset {
    /// Pairs `images/*.ppm` with `labels/*.pgm` by stem, sorted by stem.
    pub fn open(dir: &Path) -> Result<Self> {
        let classes = read_class_names(&dir.join("classes.txt"))?;
        if classes.is_empty() {
            return Err(Error::Data(format!("{}: classes.txt lists no classes", dir.display())));
        }
        let images_dir = dir.join("images");
        let labels_dir = dir.join("labels");
        let read = std::fs::read_dir(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
        let mut samples = Vec::new();
        for entry in read {
            let path = entry.map_err(|e| Error::io(&images_dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("ppm") {
                continue;
            }
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Data(format!("non UTF-8 file name {}", path.display())))?
                .to_owned();
            let label = labels_dir.join(format!("{stem}.pgm"));
            if !label.is_file() {
                return Err(Error::Data(format!("no label for image `{stem}`")));
            }
            samples.push(Sample {
                stem,
                image: path,
                label,
            });
        }
        samples.sort_by(|a, b| a.stem.cmp(&b.stem));
        if samples.is_empty() {
            return Err(Error::Data(format!("{} contains no .ppm images", images_dir.display())));
        }
        Ok(Self {
            samples,
            classes,
            ignore_index: IGNORE_INDEX,
        })
    }
}

/// `counts[gt][pred]` pixel tallies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every non-ignored pixel of one prediction.
    pub fn accumulate(&mut self, pred: &GrayImage, gt: &GrayImage, ignore_index: u8) -> Result<()> {
        if (pred.width, pred.height) != (gt.width, gt.height) {
            return Err(Error::Data(format!(
                "prediction {}x{} vs label {}x{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        let c = self.classes;
        let mut delta = vec![0u64; c * c];
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == ignore_index {
                continue;
            }
            let (g, p) = (usize::from(g), usize::from(p));
            if g >= c {
                return Err(Error::Data(format!("label value {g} outside 0..{c}")));
            }
            if p >= c {
                return Err(Error::Data(format!("predicted class {p} outside 0..{c}")));
            }
            delta[g * c + p] += 1;
        }
        for (a, d) in self.counts.iter_mut().zip(delta) {
            *a += d;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Consistency("confusion matrices differ in class count".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class IoU; `None` where the class is absent from both sides.
    pub fn ious(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..c).map(|p| self.get(k, p)).sum();
                let col: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let present: Vec<f64> = self.ious().into_iter().flatten().collect();
        if present.is_empty() {
            return Err(Error::Domain("no class has any pixels".into()));
        }
        Ok(present.iter().sum::<f64>() / present.len() as f64)
    }
}

pub fn miou(conf: &ConfusionMatrix) -> Result<f64> {
    conf.miou()
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub classes: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub ious: Vec<Option<f64>>,
    pub miou: f64,
}

/// Segments every sample and scores against its label.
pub fn evaluate(dataset: &Dataset, bundle: &ModelBundle, bank: &TextBank, cfg: &InferenceConfig) -> Result<EvalReport> {
    if bank.num_classes() != dataset.classes.len() {
        return Err(Error::Consistency(format!(
            "text bank has {} classes, dataset has {}",
            bank.num_classes(),
            dataset.classes.len()
        )));
    }
    let c = dataset.classes.len();
    let per_sample: Vec<ConfusionMatrix> = dataset
        .samples
        .par_iter()
        .map(|s| {
            let image = netpbm::read_ppm(&s.image)?;
            let label = netpbm::read_pgm(&s.label)?;
            if (image.width, image.height) != (label.width, label.height) {
                return Err(Error::Data(format!("`{}`: image and label sizes differ", s.stem)));
            }
            let seg = sliding_window_segment(&image, bundle, bank, cfg)?;
            let mut conf = ConfusionMatrix::new(c);
            conf.accumulate(&seg.mask, &label, dataset.ignore_index)
                .map_err(|e| Error::Data(format!("`{}`: {e}", s.stem)))?;
            Ok(conf)
        })
        .collect::<Result<_>>()?;
    let mut confusion = ConfusionMatrix::new(c);
    for m in &per_sample {
        confusion.merge(m)?;
    }
    Ok(EvalReport {
        classes: dataset.classes.clone(),
        ious: confusion.ious(),
        miou: confusion.miou()?,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask(w: usize, h: usize, data: &[u8]) -> GrayImage {
        GrayImage::new(w, h, data.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = mask(2, 2, &[0, 1, 1, 0]);
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&gt, &gt, 255).unwrap();
        assert_eq!((conf.get(0, 0), conf.get(1, 1), conf.get(0, 1), conf.get(1, 0)), (2, 2, 0, 0));
        assert_eq!(conf.miou().unwrap(), 1.0);
    }

    #[test]
    fn ignore_pixels_are_skipped() {
        let gt = mask(2, 1, &[255, 255]);
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&mask(2, 1, &[0, 1]), &gt, 255).unwrap();
        assert_eq!(conf, ConfusionMatrix::new(2));
        assert!(matches!(conf.miou(), Err(Error::Domain(_))));
    }

    #[test]
    fn hand_tally_2x2() {
        // gt: 0 1 / 1 1   pred: 0 0 / 1 0
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&mask(2, 2, &[0, 0, 1, 0]), &mask(2, 2, &[0, 1, 1, 1]), 255).unwrap();
        assert_eq!([conf.get(0, 0), conf.get(0, 1), conf.get(1, 0), conf.get(1, 1)], [1, 0, 2, 1]);
        // IoU0 = 1/(1+3-1) = 1/3, IoU1 = 1/(3+1-1) = 1/3
        assert!((conf.miou().unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn half_split_all_zero_prediction() {
        let gt: Vec<u8> = (0..16).map(|i| if i % 4 < 2 { 0 } else { 1 }).collect();
        let mut conf = ConfusionMatrix::new(2);
        conf.accumulate(&mask(4, 4, &[0; 16]), &mask(4, 4, &gt), 255).unwrap();
        assert_eq!(conf.ious(), vec![Some(0.5), Some(0.0)]);
        assert_eq!(conf.miou().unwrap(), 0.25);
    }

    #[test]
    fn absent_class_excluded() {
        let mut conf = ConfusionMatrix::new(3);
        conf.accumulate(&mask(2, 1, &[0, 2]), &mask(2, 1, &[0, 2]), 255).unwrap();
        assert_eq!(conf.ious(), vec![Some(1.0), None, Some(1.0)]);
        assert_eq!(conf.miou().unwrap(), 1.0);
    }

    #[test]
    fn out_of_range_label() {
        let mut conf = ConfusionMatrix::new(2);
        let err = conf.accumulate(&mask(1, 1, &[0]), &mask(1, 1, &[7]), 255).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
        assert!(conf.accumulate(&mask(1, 1, &[0]), &mask(2, 1, &[0, 0]), 255).is_err());
    }

    proptest! {
        #[test]
        fn miou_bounds_and_order_independence(a in prop::collection::vec(0u8..3, 12), b in prop::collection::vec(0u8..3, 12),
                                              c in prop::collection::vec(0u8..3, 12), d in prop::collection::vec(0u8..3, 12)) {
            let (pa, ga, pb, gb) = (mask(4, 3, &a), mask(4, 3, &b), mask(4, 3, &c), mask(4, 3, &d));
            let mut x = ConfusionMatrix::new(3);
            x.accumulate(&pa, &ga, 255).unwrap();
            x.accumulate(&pb, &gb, 255).unwrap();
            let mut y = ConfusionMatrix::new(3);
            y.accumulate(&pb, &gb, 255).unwrap();
            y.accumulate(&pa, &ga, 255).unwrap();
            prop_assert_eq!(&x, &y);
            prop_assert_eq!(x.total(), 24);
            let m = x.miou().unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
            let diagonal = (0..3).all(|g| (0..3).all(|p| g == p || x.get(g, p) == 0));
            prop_assert_eq!(m == 1.0, diagonal);
        }
    }
}

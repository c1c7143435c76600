use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassIou {
    pub intersection: u64,
    pub union: u64,
}

impl ClassIou {
    /// `None` when the class appears in neither prediction nor ground truth.
    pub fn iou(&self) -> Option<f64> {
        (self.union > 0).then(|| self.intersection as f64 / self.union as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiouReport {
    pub per_class: Vec<ClassIou>,
    /// Mean IoU over present classes (0 when none are present).
    pub mean: f64,
    pub pixel_accuracy: f64,
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `inter/union` fractions in exact rational arithmetic, rounded once.
fn rational_mean(classes: &[ClassIou]) -> f64 {
    let (mut num, mut den, mut n) = (0u128, 1u128, 0u128);
    for c in classes.iter().filter(|c| c.union > 0) {
        let (a, b) = (c.intersection as u128, c.union as u128);
        num = num * b + a * den;
        den *= b;
        let g = gcd(num, den).max(1);
        num /= g;
        den /= g;
        n += 1;
    }
    if n == 0 {
        return 0.0;
    }
    den *= n;
    let g = gcd(num, den).max(1);
    (num / g) as f64 / (den / g) as f64
}

/// Accumulates per-class intersection and union over many label maps.
#[derive(Debug, Clone)]
pub struct IouAccumulator {
    classes: Vec<ClassIou>,
    correct: u64,
    total: u64,
}

impl IouAccumulator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            classes: vec![ClassIou::default(); num_classes],
            correct: 0,
            total: 0,
        }
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("miou", &[pred.len()], &[gt.len()]));
        }
        let k = self.classes.len();
        if let Some(&bad) = pred.iter().chain(gt).find(|&&c| c as usize >= k) {
            return Err(Error::Invalid(format!("class {bad} outside {k} classes")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                self.classes[p as usize].intersection += 1;
                self.classes[p as usize].union += 1;
                self.correct += 1;
            } else {
                self.classes[p as usize].union += 1;
                self.classes[g as usize].union += 1;
            }
        }
        self.total += pred.len() as u64;
        Ok(())
    }

    pub fn report(&self) -> MiouReport {
        MiouReport {
            per_class: self.classes.clone(),
            mean: rational_mean(&self.classes),
            pixel_accuracy: self.correct as f64 / self.total.max(1) as f64,
        }
    }
}

pub fn miou(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<MiouReport> {
    let mut acc = IouAccumulator::new(num_classes);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

/// `class_name,iou` rows (absent classes as `nan`) and a final `mean` row.
pub fn write_eval_csv(path: &Path, report: &MiouReport, class_names: &[&str]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path).map_err(Error::io(path))?);
    let mut text = String::from("class_name,iou\n");
    for (i, c) in report.per_class.iter().enumerate() {
        let name = class_names.get(i).copied().unwrap_or("class");
        match c.iou() {
            Some(v) => text.push_str(&format!("{name},{v:.6}\n")),
            None => text.push_str(&format!("{name},nan\n")),
        }
    }
    text.push_str(&format!("mean,{:.6}\n", report.mean));
    w.write_all(text.as_bytes()).map_err(Error::io(path))?;
    w.flush().map_err(Error::io(path))
}

const PALETTE: [[u8; 3]; 4] = [[0, 0, 0], [40, 90, 230], [160, 60, 200], [40, 190, 80]];

/// Indexed 8-bit PNG of a label raster.
pub fn write_label_png(path: &Path, labels: &[u8], height: usize, width: usize) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::shape(
            "write_label_png",
            &[labels.len()],
            &[height, width],
        ));
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_palette(PALETTE.concat());
    let encode = |e: png::EncodingError| Error::Data(format!("{}: {e}", path.display()));
    let mut writer = enc.write_header().map_err(encode)?;
    writer.write_image_data(labels).map_err(encode)?;
    writer.finish().map_err(encode)
}

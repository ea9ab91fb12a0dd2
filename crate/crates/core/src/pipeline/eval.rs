use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::{akd, fid, locate_keypoints, mkr, psnr, FeatureNet, FeatureStats, KeypointSet, LocatorConfig};

/// Metric report of one evaluation. `None` marks a metric that is
/// undefined for the given frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub frames: usize,
    pub akd: Option<f64>,
    pub mkr: Option<f64>,
    pub fid_full: Option<f64>,
    pub fid_foreground: Option<f64>,
    pub psnr: f64,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
        let rows = [
            ("frames", self.frames.to_string()),
            ("AKD", fmt(self.akd)),
            ("MKR", fmt(self.mkr)),
            ("FID (full)", fmt(self.fid_full)),
            ("FID (foreground)", fmt(self.fid_foreground)),
            ("PSNR (dB)", format!("{:.2}", self.psnr)),
        ];
        let mut out = String::from("metric            value\n");
        for (k, v) in rows {
            out.push_str(&format!("{k:<18}{v}\n"));
        }
        out
    }
}

/// PNG files of a directory in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    out.sort();
    Ok(out)
}

fn foreground_box(points: &KeypointSet, h: usize, w: usize) -> Option<[usize; 4]> {
    let vis: Vec<[f64; 2]> = points.points.iter().flatten().copied().collect();
    if vis.is_empty() {
        return None;
    }
    let margin = (h.max(w) / 8) as f64;
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for [x, y] in vis {
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
    let b = [
        clamp(y0 - margin, h),
        clamp(y1 + margin + 1.0, h),
        clamp(x0 - margin, w),
        clamp(x1 + margin + 1.0, w),
    ];
    (b[1] > b[0] && b[3] > b[2]).then_some(b)
}

/// Crops both images to the dilated keypoint bounding box of `reference`.
pub fn foreground_crop(generated: &Image, reference: &Image, locator: &LocatorConfig) -> (Image, Image) {
    let kp = locate_keypoints(reference, locator);
    match foreground_box(&kp, reference.height(), reference.width()) {
        Some([y0, y1, x0, x1]) => (generated.crop(y0, y1, x0, x1), reference.crop(y0, y1, x0, x1)),
        None => (generated.clone(), reference.clone()),
    }
}

fn fid_of(features: &FeatureNet, a: &[&Image], b: &[&Image]) -> Result<Option<f64>> {
    if a.len() < 2 {
        return Ok(None);
    }
    let fa = FeatureStats::from_features(&features.embed(a)?)?;
    let fb = FeatureStats::from_features(&features.embed(b)?)?;
    Ok(Some(fid(&fb, &fa)?))
}

/// Scores generated frames against reference frames pairwise. Keypoints of
/// both sides come from the marker locator; a reference marker that cannot
/// be found in the generated frame counts as missing.
pub fn evaluate_frames(generated: &[Image], reference: &[Image], features: Option<&FeatureNet>) -> Result<EvalReport> {
    if generated.len() != reference.len() {
        return Err(Error::InvalidInput(format!(
            "{} generated frames but {} reference frames",
            generated.len(),
            reference.len()
        )));
    }
    if generated.is_empty() {
        return Err(Error::InvalidInput("no frames to evaluate".into()));
    }
    let locator = LocatorConfig::default();
    let gt: Vec<KeypointSet> = reference.iter().map(|r| locate_keypoints(r, &locator)).collect();
    let pred: Vec<KeypointSet> = generated.iter().map(|g| locate_keypoints(g, &locator)).collect();
    let defined = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let akd_v = defined(akd(&gt, &pred))?;
    let mkr_v = defined(mkr(&gt, &pred))?;
    let mut total = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        total += psnr(g, r)?;
    }
    let (fid_full, fid_foreground) = match features {
        None => (None, None),
        Some(net) => {
            let gref: Vec<&Image> = generated.iter().collect();
            let rref: Vec<&Image> = reference.iter().collect();
            let full = fid_of(net, &gref, &rref)?;
            let crops: Vec<(Image, Image)> = generated
                .iter()
                .zip(reference)
                .map(|(g, r)| foreground_crop(g, r, &locator))
                .collect();
            let gc: Vec<&Image> = crops.iter().map(|c| &c.0).collect();
            let rc: Vec<&Image> = crops.iter().map(|c| &c.1).collect();
            (full, fid_of(net, &gc, &rc)?)
        }
    };
    Ok(EvalReport {
        frames: generated.len(),
        akd: akd_v,
        mkr: mkr_v,
        fid_full,
        fid_foreground,
        psnr: total / generated.len() as f64,
    })
}

/// Mean PSNR over the foreground crops of each frame pair.
pub fn foreground_psnr(generated: &[Image], reference: &[Image]) -> Result<f64> {
    if generated.len() != reference.len() || generated.is_empty() {
        return Err(Error::InvalidInput("frame lists differ in length or are empty".into()));
    }
    let locator = LocatorConfig::default();
    let mut total = 0.0;
    for (g, r) in generated.iter().zip(reference) {
        let (gc, rc) = foreground_crop(g, r, &locator);
        total += psnr(&gc, &rc)?;
    }
    Ok(total / generated.len() as f64)
}

pub fn load_frames(dir: &Path) -> Result<Vec<Image>> {
    list_frames(dir)?.iter().map(|p| Image::load_png(p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::PSNR_CAP;
    use crate::synthdata::{render_figure, FigureSpec, PoseParams};

    fn frames() -> Vec<Image> {
        let spec = FigureSpec::new(32);
        let mut p = PoseParams::standing();
        (0..3)
            .map(|i| {
                p.arms[0].shoulder = 0.4 + 0.3 * i as f64;
                render_figure(&spec, &p).unwrap().0
            })
            .collect()
    }

    #[test]
    fn identity_eval() {
        let f = frames();
        let r = evaluate_frames(&f, &f, None).unwrap();
        assert_eq!(r.akd, Some(0.0));
        assert_eq!(r.mkr, Some(0.0));
        assert_eq!(r.psnr, PSNR_CAP);
        assert!(r.table().contains("AKD"));
    }

    #[test]
    fn blank_output_misses_every_keypoint() {
        let f = frames();
        let blank: Vec<Image> = f.iter().map(|_| Image::filled(32, 32, [0.0; 3])).collect();
        let r = evaluate_frames(&blank, &f, None).unwrap();
        assert_eq!(r.mkr, Some(1.0));
        assert_eq!(r.akd, None);
        assert!(evaluate_frames(&blank[..2], &f, None).is_err());
    }

    #[test]
    fn listing_is_name_ordered() {
        let dir = tempfile::tempdir().unwrap();
        let f = frames();
        for (i, name) in ["frame_0002.png", "frame_0000.png", "frame_0001.png"].iter().enumerate() {
            f[i].save_png(&dir.path().join(name)).unwrap();
        }
        fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let names: Vec<String> = list_frames(dir.path())
            .unwrap()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["frame_0000.png", "frame_0001.png", "frame_0002.png"]);
    }
}

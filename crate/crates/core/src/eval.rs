//! Held-out evaluation: masked PSNR/SSIM tables for novel views and novel
//! poses, and the input-view sweep over a 12-camera ring.

use crate::body::BodyState;
use crate::error::{Error, Result};
use crate::geometry::PixelRect;
use crate::image::Image;
use crate::losses::{psnr, ssim, SSIM_WINDOW};
use crate::model::Model;
use crate::synthcap::{Dataset, Split};
use crate::trainer::frame_states;

/// Metrics of one rendered frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Fraction of image pixels inside the metric mask.
    pub coverage: f64,
}

/// Grows `rect` symmetrically to at least the SSIM window, within the image.
pub fn ssim_rect(rect: &PixelRect, width: usize, height: usize) -> PixelRect {
    let grow = |lo: usize, hi: usize, size: usize| {
        let need = SSIM_WINDOW.min(size);
        if hi - lo >= need {
            return (lo, hi);
        }
        let extra = need - (hi - lo);
        let lo = lo.saturating_sub(extra / 2 + extra % 2);
        let lo = lo.min(size - need);
        (lo, (lo + need).max(hi))
    };
    let (x0, x1) = grow(rect.x0, rect.x1.max(rect.x0), width);
    let (y0, y1) = grow(rect.y0, rect.y1.max(rect.y0), height);
    PixelRect { x0, y0, x1, y1 }
}

/// PSNR over the pixels of `rect` and SSIM over its crop.
pub fn frame_metrics(id: impl Into<String>, pred: &Image, gt: &Image, rect: &PixelRect) -> Result<MetricRow> {
    let mask = rect.mask(gt.width, gt.height);
    let s = ssim_rect(rect, gt.width, gt.height);
    Ok(MetricRow {
        id: id.into(),
        psnr: psnr(pred, gt, Some(&mask)),
        ssim: ssim(&pred.crop(s.x0, s.y0, s.x1, s.y1), &gt.crop(s.x0, s.y0, s.x1, s.y1))?,
        coverage: rect.area() as f64 / (gt.width * gt.height) as f64,
    })
}

pub fn mean_of(rows: &[MetricRow]) -> (f64, f64) {
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        rows.iter().map(|r| r.ssim).sum::<f64>() / n,
    )
}

/// Per-frame metrics of one protocol.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricTable {
    pub name: String,
    pub rows: Vec<MetricRow>,
}

impl MetricTable {
    pub fn mean(&self) -> (f64, f64) {
        mean_of(&self.rows)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("# {}\nid\tpsnr\tssim\tcoverage\n", self.name);
        for r in &self.rows {
            s += &format!("{}\t{:.6}\t{:.6}\t{:.6}\n", r.id, r.psnr, r.ssim, r.coverage);
        }
        let (p, q) = self.mean();
        s += &format!("mean\t{p:.6}\t{q:.6}\t-\n");
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub novel_view: MetricTable,
    pub novel_pose: MetricTable,
}

impl EvalReport {
    pub fn to_text(&self) -> String {
        format!("{}\n{}", self.novel_view.to_text(), self.novel_pose.to_text())
    }
}

/// Input view for the novel-view protocol: another camera of the same pose,
/// rotating the offset with the pose index so every offset is visited.
pub fn novel_view_input(p: usize, v: usize, views: usize) -> usize {
    (v + 1 + p % (views - 1)) % views
}

/// Input pose for the novel-pose protocol: the next pose, same camera.
pub fn novel_pose_input(p: usize, poses: usize) -> usize {
    (p + 1) % poses
}

fn check_split(data: &Dataset, split: Split) -> Result<Vec<usize>> {
    let subjects = data.split(split);
    if subjects.is_empty() {
        return Err(Error::Data(format!("no {split:?} subjects in the dataset")));
    }
    for &s in &subjects {
        if data.subjects[s].frames.len() != data.poses * data.views {
            return Err(Error::Data(format!("subject {} is missing frames", data.subjects[s].subject.id)));
        }
    }
    Ok(subjects)
}

/// Renders every frame of `split` from another view (same pose) and from
/// another pose (same view) and scores it against ground truth.
pub fn evaluate(model: &Model, data: &Dataset, split: Split) -> Result<EvalReport> {
    let subjects = check_split(data, split)?;
    if data.views < 2 || data.poses < 2 {
        return Err(Error::Data("evaluation needs at least two views and two poses".into()));
    }
    let states = frame_states(model, data)?;
    let mut nv = Vec::new();
    let mut np = Vec::new();
    for &s in &subjects {
        let id = data.subjects[s].subject.id;
        for p in 0..data.poses {
            for v in 0..data.views {
                let t = p * data.views + v;
                let iv = p * data.views + novel_view_input(p, v, data.views);
                let ip = novel_pose_input(p, data.poses) * data.views + v;
                let name = format!("s{id:02}_p{p}_v{v}");
                nv.push(score(model, data, &states, s, iv, t, &name)?);
                np.push(score(model, data, &states, s, ip, t, &name)?);
            }
        }
    }
    Ok(EvalReport {
        novel_view: MetricTable {
            name: "novel_view".into(),
            rows: nv,
        },
        novel_pose: MetricTable {
            name: "novel_pose".into(),
            rows: np,
        },
    })
}

fn score(
    model: &Model,
    data: &Dataset,
    states: &[Vec<BodyState>],
    s: usize,
    input: usize,
    target: usize,
    name: &str,
) -> Result<MetricRow> {
    let frames = &data.subjects[s].frames;
    let (fi, ft) = (&frames[input], &frames[target]);
    let out = model.render_view(fi, &states[s][input], &ft.cam, &states[s][target])?;
    frame_metrics(name, &out.image, &ft.image, &out.rect)
}

/// Ring size the sweep requires.
pub const SWEEP_VIEWS: usize = 12;

/// Angular gap in degrees between ring cameras `i` and `j`, pooled so that
/// `Δ` and `360° − Δ` coincide.
pub fn view_gap(i: usize, j: usize, views: usize) -> f64 {
    let d = i.abs_diff(j);
    d.min(views - d) as f64 * 360.0 / views as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    /// Mean PSNR over all other targets, per input view.
    pub per_view: Vec<(usize, f64, usize)>,
    /// Mean PSNR per angular gap (degrees, mean, count), ascending.
    pub buckets: Vec<(f64, f64, usize)>,
}

impl SweepReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# per_input_view\nview\tyaw_deg\tmean_psnr\ttargets\n");
        let n = self.per_view.len().max(1) as f64;
        for &(v, m, c) in &self.per_view {
            s += &format!("{v}\t{:.1}\t{m:.6}\t{c}\n", v as f64 * 360.0 / n);
        }
        s += "\n# angle_difference\ndelta_deg\tmean_psnr\tcount\n";
        for &(d, m, c) in &self.buckets {
            s += &format!("{d:.1}\t{m:.6}\t{c}\n");
        }
        s
    }
}

/// For each input view of the ring, renders every other view of the same
/// subject and pose and averages masked PSNR, for the given subjects and
/// poses.
pub fn sweep_views(model: &Model, data: &Dataset, subjects: &[usize], poses: &[usize]) -> Result<SweepReport> {
    if data.views != SWEEP_VIEWS {
        return Err(Error::Data(format!(
            "view sweep needs a {SWEEP_VIEWS}-camera ring, dataset has {}",
            data.views
        )));
    }
    if subjects.is_empty() || poses.is_empty() {
        return Err(Error::Data("view sweep needs at least one subject and pose".into()));
    }
    for &s in subjects {
        if s >= data.subjects.len() || data.subjects[s].frames.len() != data.poses * data.views {
            return Err(Error::Data(format!("subject index {s} is missing or incomplete")));
        }
    }
    if let Some(&p) = poses.iter().find(|&&p| p >= data.poses) {
        return Err(Error::Data(format!("pose {p} is not in the dataset")));
    }
    let n = data.views;
    let states = frame_states(model, data)?;
    let mut per_view = vec![(0.0, 0usize); n];
    let mut buckets = vec![(0.0, 0usize); n / 2 + 1];
    for &s in subjects {
        for &p in poses {
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    let row = score(model, data, &states, s, p * n + i, p * n + j, "")?;
                    per_view[i].0 += row.psnr;
                    per_view[i].1 += 1;
                    let d = i.abs_diff(j).min(n - i.abs_diff(j));
                    buckets[d].0 += row.psnr;
                    buckets[d].1 += 1;
                }
            }
        }
    }
    Ok(SweepReport {
        per_view: per_view
            .into_iter()
            .enumerate()
            .map(|(v, (sum, c))| (v, sum / c as f64, c / (subjects.len() * poses.len())))
            .collect(),
        buckets: buckets
            .into_iter()
            .enumerate()
            .filter(|(_, (_, c))| *c > 0)
            .map(|(d, (sum, c))| (d as f64 * 360.0 / n as f64, sum / c as f64, c))
            .collect(),
    })
}

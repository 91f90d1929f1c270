//! Local-contrast analysis of when a combined delta+flow perturbation
//! reaches images that neither layer reaches alone.
//!
//! Flow strengths here are per-quadrant fractions `eps` in `[0, 1]`; a pixel
//! bound `b` of the flow layer corresponds to `eps = min(b, 1)`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imagecore::{Image, LabeledDataset, PixelCoord};
use crate::layers::{flow_forward, FlowParams};
use crate::sig6;

/// Points per axis of the brute-force reach grid.
pub const REACH_GRID: usize = 101;

fn interior(image: &Image, p: PixelCoord, channel: usize) -> Result<()> {
    if channel >= image.channels() {
        return Err(Error::invalid(format!("channel {channel} out of range")));
    }
    if p.row == 0 || p.col == 0 || p.row + 1 >= image.height() || p.col + 1 >= image.width() {
        return Err(Error::OutOfDomain { row: p.row, col: p.col });
    }
    Ok(())
}

fn at(image: &Image, ch: usize, p: PixelCoord, dr: isize, dc: isize) -> f64 {
    image.get(
        ch,
        p.row.wrapping_add_signed(dr),
        p.col.wrapping_add_signed(dc),
    )
}

const AXIS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];

/// Largest absolute difference to any of the 8 neighbours.
pub fn c_max(image: &Image, p: PixelCoord, channel: usize) -> Result<f64> {
    interior(image, p, channel)?;
    let x0 = at(image, channel, p, 0, 0);
    let mut m: f64 = 0.0;
    for dr in -1..=1 {
        for dc in -1..=1 {
            m = m.max((at(image, channel, p, dr, dc) - x0).abs());
        }
    }
    Ok(m)
}

/// Largest absolute difference to the 4 axis neighbours.
pub fn e_max(image: &Image, p: PixelCoord, channel: usize) -> Result<f64> {
    interior(image, p, channel)?;
    let x0 = at(image, channel, p, 0, 0);
    Ok(AXIS
        .iter()
        .map(|&(dr, dc)| (at(image, channel, p, dr, dc) - x0).abs())
        .fold(0.0, f64::max))
}

/// Bilinear value inside one quadrant anchored at `x00`, where `x10` is the
/// horizontal neighbour, `x01` the vertical one and `x11` the diagonal,
/// at fractional offsets `(eps_h, eps_v)`.
pub fn flow_value(x00: f64, x10: f64, x01: f64, x11: f64, eps_h: f64, eps_v: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&eps_h) || !(0.0..=1.0).contains(&eps_v) {
        return Err(Error::invalid(format!(
            "quadrant offsets must lie in [0, 1], got ({eps_h}, {eps_v})"
        )));
    }
    Ok(x00
        + (x10 - x00) * ((1.0 - eps_v) * eps_h)
        + (x01 - x00) * (eps_v * (1.0 - eps_h))
        + (x11 - x00) * (eps_v * eps_h))
}

fn check_eps(eps: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("flow fraction must lie in [0, 1], got {eps}")));
    }
    Ok(())
}

/// Largest `|flow_value - x00|` over the four quadrants around `p` and a
/// 101×101 grid of offsets in `[0, eps]^2`.
pub fn flow_reach_bound(image: &Image, p: PixelCoord, channel: usize, eps: f64) -> Result<f64> {
    interior(image, p, channel)?;
    check_eps(eps)?;
    let x00 = at(image, channel, p, 0, 0);
    let steps: Vec<f64> = (0..REACH_GRID)
        .map(|i| eps * (i as f64 / (REACH_GRID - 1) as f64))
        .collect();
    let mut best: f64 = 0.0;
    let mut corners: f64 = 0.0;
    for sv in [-1isize, 1] {
        for sh in [-1isize, 1] {
            let x10 = at(image, channel, p, 0, sh);
            let x01 = at(image, channel, p, sv, 0);
            let x11 = at(image, channel, p, sv, sh);
            for &ev in &steps {
                for &eh in &steps {
                    best = best.max((flow_value(x00, x10, x01, x11, eh, ev)? - x00).abs());
                }
            }
            for (eh, ev) in [(eps, 0.0), (0.0, eps), (eps, eps)] {
                corners = corners.max((flow_value(x00, x10, x01, x11, eh, ev)? - x00).abs());
            }
        }
    }
    // bilinear in the offsets, so the box maximum sits on a corner
    debug_assert!((best - corners).abs() <= 1e-15);
    debug_assert!(best <= 2.0 * eps * c_max(image, p, channel)? + 1e-12);
    Ok(best)
}

/// `2 * eps * C_max(p)`: no flow of strength `eps` moves `p` further.
pub fn flow_reach_limit(image: &Image, p: PixelCoord, channel: usize, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(2.0 * eps * c_max(image, p, channel)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ContrastClass {
    /// `C_max < delta / (2 eps)`: flows move the pixel less than `delta`.
    Low,
    /// `E_max >= delta / eps`: a flow moves the pixel at least `delta`.
    High,
    Neither,
}

/// Classification of every (channel, pixel) site. Border pixels are
/// `Neither`; fractions are over all sites.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContrastMask {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Channel-major, like image data.
    pub classes: Vec<ContrastClass>,
    pub low_fraction: f64,
    pub high_fraction: f64,
    pub neither_fraction: f64,
    /// Sites meeting both conditions at once; always 0.
    pub disjointness_violations: usize,
}

impl ContrastMask {
    pub fn class(&self, channel: usize, p: PixelCoord) -> ContrastClass {
        self.classes[(channel * self.height + p.row) * self.width + p.col]
    }
}

fn check_regime(delta: f64, eps: f64) -> Result<()> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("delta must be a finite value >= 0, got {delta}")));
    }
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::invalid(format!("eps must lie in (0, 1], got {eps}")));
    }
    Ok(())
}

pub fn classify_contrast(image: &Image, delta: f64, eps: f64) -> Result<ContrastMask> {
    check_regime(delta, eps)?;
    let (h, w, ch) = (image.height(), image.width(), image.channels());
    let low_t = delta / (2.0 * eps);
    let high_t = delta / eps;
    let mut classes = vec![ContrastClass::Neither; ch * h * w];
    let mut violations = 0;
    for c in 0..ch {
        for r in 1..h.saturating_sub(1) {
            for col in 1..w.saturating_sub(1) {
                let p = PixelCoord::new(r, col);
                let low = c_max(image, p, c)? < low_t;
                let high = e_max(image, p, c)? >= high_t;
                if low && high {
                    violations += 1;
                }
                classes[(c * h + r) * w + col] = if low {
                    ContrastClass::Low
                } else if high {
                    ContrastClass::High
                } else {
                    ContrastClass::Neither
                };
            }
        }
    }
    let n = classes.len() as f64;
    let count = |k: ContrastClass| classes.iter().filter(|c| **c == k).count() as f64 / n;
    Ok(ContrastMask {
        height: h,
        width: w,
        channels: ch,
        low_fraction: count(ContrastClass::Low),
        high_fraction: count(ContrastClass::High),
        neither_fraction: count(ContrastClass::Neither),
        classes,
        disjointness_violations: violations,
    })
}

/// Image reachable by a delta addition at `p` combined with a flow at `q`,
/// but by neither perturbation alone.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TheoremCertificate {
    pub delta: f64,
    pub eps: f64,
    pub p: PixelCoord,
    pub p_channel: usize,
    pub q: PixelCoord,
    pub q_channel: usize,
    pub c_max_p: f64,
    pub e_max_q: f64,
    /// Signed delta added at `p`.
    pub delta_applied: f64,
    /// Flow displacement `(u, v)` in pixels applied at `q`.
    pub flow_at_q: (f64, f64),
    /// `|I'(p) - I(p)|`, equal to `delta`.
    pub change_p: f64,
    /// `|I'(q) - I(q)|`.
    pub change_q: f64,
    /// Grid-oracle bound on how far any flow of strength `eps` moves `p`.
    pub flow_bound_p: f64,
    /// `change_p - flow_bound_p`, positive.
    pub margin_p: f64,
    /// `change_q - delta`, positive.
    pub margin_q: f64,
    /// The original with the two changes applied; not serialised.
    #[serde(skip)]
    pub witness: Image,
}

impl TheoremCertificate {
    /// Recomputes both strict inequalities against `original`.
    pub fn verify(&self, original: &Image) -> Result<bool> {
        let dp = (self.witness.get(self.p_channel, self.p.row, self.p.col)
            - original.get(self.p_channel, self.p.row, self.p.col))
        .abs();
        let dq = (self.witness.get(self.q_channel, self.q.row, self.q.col)
            - original.get(self.q_channel, self.q.row, self.q.col))
        .abs();
        let bound = flow_reach_bound(original, self.p, self.p_channel, self.eps)?;
        Ok(dp > bound && dq > self.delta)
    }
}

/// Builds a witness from the Low site with the smallest `C_max` and the High
/// site with the largest `E_max` at a different pixel. Ties go to the first
/// site in channel-major scan order.
pub fn theorem_witness(image: &Image, delta: f64, eps: f64) -> Result<TheoremCertificate> {
    if delta <= 0.0 {
        return Err(Error::invalid("delta must be > 0 for a witness"));
    }
    let mask = classify_contrast(image, delta, eps)?;
    let (h, w) = (image.height(), image.width());
    let mut lows = Vec::new();
    let mut highs = Vec::new();
    for c in 0..image.channels() {
        for r in 0..h {
            for col in 0..w {
                let p = PixelCoord::new(r, col);
                match mask.class(c, p) {
                    ContrastClass::Low => lows.push((c_max(image, p, c)?, c, p)),
                    ContrastClass::High => highs.push((e_max(image, p, c)?, c, p)),
                    ContrastClass::Neither => {}
                }
            }
        }
    }
    if highs.is_empty() {
        return Err(Error::NoWitness("no high-contrast pixel".into()));
    }
    if lows.is_empty() {
        return Err(Error::NoWitness("no low-contrast pixel".into()));
    }
    let &(cm, pc, p) = lows
        .iter()
        .reduce(|a, b| if b.0 < a.0 { b } else { a })
        .expect("non-empty");
    let mut ranked: Vec<&(f64, usize, PixelCoord)> = highs.iter().filter(|h| h.2 != p).collect();
    // stable sort keeps scan order among equal E_max
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let Some(&&(em, qc, q)) = ranked.first() else {
        return Err(Error::NoWitness(
            "no high-contrast pixel distinct from the low-contrast pixel".into(),
        ));
    };
    if eps * em <= delta {
        return Err(Error::NoWitness(format!(
            "flow change {} at the high-contrast pixel does not exceed delta",
            eps * em
        )));
    }

    // flow toward the axis neighbour realising E_max at q
    let x_q = image.get(qc, q.row, q.col);
    let &(dr, dc) = AXIS
        .iter()
        .find(|&&(dr, dc)| (at(image, qc, q, dr, dc) - x_q).abs() == em)
        .expect("E_max is attained by an axis neighbour");
    let mut flow = FlowParams::zeros(h, w);
    let iq = q.row * w + q.col;
    flow.u[iq] = dc as f64 * eps;
    flow.v[iq] = dr as f64 * eps;
    let flowed = flow_forward(image, &flow)?;

    let x_p = image.get(pc, p.row, p.col);
    let signed = if x_p + delta <= 1.0 { delta } else { -delta };
    let witness = flowed.with_value(pc, p.row, p.col, x_p + signed)?;

    let change_p = (witness.get(pc, p.row, p.col) - x_p).abs();
    let change_q = (witness.get(qc, q.row, q.col) - x_q).abs();
    let flow_bound_p = flow_reach_bound(image, p, pc, eps)?;
    if !(change_p > flow_bound_p && change_q > delta) {
        return Err(Error::NoWitness(format!(
            "constructed image fails the certificate (p: {change_p} vs {flow_bound_p}, q: {change_q} vs {delta})"
        )));
    }
    Ok(TheoremCertificate {
        delta,
        eps,
        p,
        p_channel: pc,
        q,
        q_channel: qc,
        c_max_p: cm,
        e_max_q: em,
        delta_applied: signed,
        flow_at_q: (flow.u[iq], flow.v[iq]),
        change_p,
        change_q,
        flow_bound_p,
        margin_p: change_p - flow_bound_p,
        margin_q: change_q - delta,
        witness,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanRow {
    pub image_index: usize,
    pub low_fraction: f64,
    pub high_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScanReport {
    pub delta: f64,
    pub eps: f64,
    pub rows: Vec<ScanRow>,
    /// Every scanned image has at least one Low and one High site.
    pub all_have_both: bool,
    pub disjointness_violations: usize,
}

impl ScanReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image_index,low_fraction,high_fraction\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{}\n",
                r.image_index,
                sig6(r.low_fraction),
                sig6(r.high_fraction)
            ));
        }
        out
    }
}

/// Classifies a seeded random sample of `sample_count` images.
pub fn contrast_scan(data: &LabeledDataset, delta: f64, eps: f64, sample_count: usize, seed: u64) -> Result<ScanReport> {
    check_regime(delta, eps)?;
    if data.is_empty() {
        return Err(Error::invalid("cannot scan an empty dataset"));
    }
    if sample_count == 0 || sample_count > data.len() {
        return Err(Error::invalid(format!(
            "sample_count must lie in [1, {}], got {sample_count}",
            data.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = sample(&mut rng, data.len(), sample_count).into_vec();
    picks.sort_unstable();
    let masks = picks
        .par_iter()
        .map(|&i| classify_contrast(&data.images[i], delta, eps))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<ScanRow> = picks
        .iter()
        .zip(&masks)
        .map(|(&i, m)| ScanRow {
            image_index: i,
            low_fraction: m.low_fraction,
            high_fraction: m.high_fraction,
        })
        .collect();
    Ok(ScanReport {
        delta,
        eps,
        all_have_both: rows.iter().all(|r| r.low_fraction > 0.0 && r.high_fraction > 0.0),
        disjointness_violations: masks.iter().map(|m| m.disjointness_violations).sum(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecore::Shape;

    fn grid3() -> Image {
        Image::new(
            Shape::new(3, 3, 1),
            vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        )
        .unwrap()
    }

    #[test]
    fn contrast_hand_values() {
        let img = grid3();
        let c = PixelCoord::new(1, 1);
        assert!((c_max(&img, c, 0).unwrap() - 0.4).abs() < 1e-15);
        assert!((e_max(&img, c, 0).unwrap() - 0.3).abs() < 1e-15);
        assert!(matches!(c_max(&img, PixelCoord::new(0, 1), 0), Err(Error::OutOfDomain { .. })));
        let flat = Image::filled(Shape::new(3, 3, 1), 0.7).unwrap();
        assert_eq!(c_max(&flat, c, 0).unwrap(), 0.0);
        assert_eq!(e_max(&flat, c, 0).unwrap(), 0.0);
        let spike = flat.with_value(0, 0, 0, 0.0).unwrap().with_value(0, 1, 1, 1.0).unwrap();
        assert_eq!(c_max(&spike, c, 0).unwrap(), 1.0);
    }

    #[test]
    fn flow_value_hand_values() {
        assert_eq!(flow_value(0.2, 0.4, 0.6, 1.0, 0.0, 0.0).unwrap(), 0.2);
        assert_eq!(flow_value(0.2, 0.4, 0.6, 1.0, 1.0, 1.0).unwrap(), 1.0);
        assert!((flow_value(0.0, 0.4, 0.6, 1.0, 0.25, 0.5).unwrap() - 0.4).abs() < 1e-15);
        assert!(flow_value(0.0, 0.0, 0.0, 0.0, 1.5, 0.0).is_err());
    }

    #[test]
    fn reach_bound_cases() {
        let flat = Image::filled(Shape::new(3, 3, 1), 0.3).unwrap();
        let c = PixelCoord::new(1, 1);
        assert_eq!(flow_reach_bound(&flat, c, 0, 0.7).unwrap(), 0.0);
        let edge = flat.with_value(0, 2, 1, 1.0).unwrap().with_value(0, 1, 1, 0.0).unwrap();
        assert_eq!(flow_reach_bound(&edge, c, 0, 0.0).unwrap(), 0.0);
        let b = flow_reach_bound(&edge, c, 0, 0.5).unwrap();
        assert!(b >= 0.5 - 1e-12, "{b}");
        assert!(b <= flow_reach_limit(&edge, c, 0, 0.5).unwrap());
    }

    #[test]
    fn classify_regimes() {
        let flat = Image::filled(Shape::new(5, 5, 1), 0.5).unwrap();
        let m = classify_contrast(&flat, 8.0 / 255.0, 0.1).unwrap();
        assert_eq!(m.low_fraction, 9.0 / 25.0);
        assert_eq!(m.high_fraction, 0.0);
        assert!(classify_contrast(&flat, 0.1, 0.0).is_err());

        let checker = Image::new(
            Shape::new(5, 5, 1),
            (0..25).map(|i| ((i / 5 + i % 5) % 2) as f64).collect(),
        )
        .unwrap();
        let m = classify_contrast(&checker, 8.0 / 255.0, 0.1).unwrap();
        assert_eq!(m.high_fraction, 9.0 / 25.0);
        assert_eq!(m.low_fraction, 0.0);
        assert_eq!(m.disjointness_violations, 0);
        assert!((m.low_fraction + m.high_fraction + m.neither_fraction - 1.0).abs() < 1e-15);
    }

    #[test]
    fn witness_absent_regimes() {
        let flat = Image::filled(Shape::new(5, 5, 1), 0.5).unwrap();
        match theorem_witness(&flat, 8.0 / 255.0, 0.05) {
            Err(Error::NoWitness(m)) => assert!(m.contains("high")),
            other => panic!("{other:?}"),
        }
        let checker = Image::new(
            Shape::new(5, 5, 1),
            (0..25).map(|i| ((i / 5 + i % 5) % 2) as f64).collect(),
        )
        .unwrap();
        match theorem_witness(&checker, 8.0 / 255.0, 0.05) {
            Err(Error::NoWitness(m)) => assert!(m.contains("low")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn witness_on_step_edge() {
        let img = Image::new(
            Shape::new(4, 4, 1),
            (0..16).map(|i| if i % 4 == 3 { 1.0 } else { 0.0 }).collect(),
        )
        .unwrap();
        let cert = theorem_witness(&img, 8.0 / 255.0, 0.05).unwrap();
        assert_eq!(cert.p, PixelCoord::new(1, 1));
        assert_eq!(cert.q, PixelCoord::new(1, 2));
        assert_eq!(cert.e_max_q, 1.0);
        assert_eq!(cert.flow_bound_p, 0.0);
        assert!((cert.change_q - 0.05).abs() < 1e-15);
        assert!(cert.verify(&img).unwrap());
    }

    #[test]
    fn scan_is_seeded() {
        let data = crate::imagecore::synth_dataset(2, 4, 12).unwrap();
        let a = contrast_scan(&data, 8.0 / 255.0, 0.05, 6, 3).unwrap();
        assert_eq!(a, contrast_scan(&data, 8.0 / 255.0, 0.05, 6, 3).unwrap());
        assert_eq!(a.rows.len(), 6);
        assert!(contrast_scan(&data, 8.0 / 255.0, 0.05, 13, 3).is_err());
        assert!(a.to_csv().starts_with("image_index,low_fraction,high_fraction\n"));
    }
}

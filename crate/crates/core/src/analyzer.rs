//! Performance-versus-compute analysis over tables of `(metric, GFLOPs)` points.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};

/// One evaluated configuration. `metric` is lower-is-better (NLL or error).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostPoint {
    pub label: String,
    pub metric: f64,
    pub gflops: f64,
    #[serde(default, deserialize_with = "blank_as_none")]
    pub family: Option<String>,
    #[serde(default, deserialize_with = "blank_as_none")]
    pub variant: Option<String>,
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub m: Option<usize>,
}

fn blank_as_none<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<String>, D::Error> {
    let s: Option<String> = Option::deserialize(d)?;
    Ok(s.filter(|v| !v.trim().is_empty()))
}

impl CostPoint {
    pub fn new(label: impl Into<String>, metric: f64, gflops: f64) -> Self {
        Self { label: label.into(), metric, gflops, family: None, variant: None, k: None, m: None }
    }

    /// Group name used for grids: `family/variant` with missing parts left out.
    pub fn group(&self) -> String {
        match (&self.family, &self.variant) {
            (Some(f), Some(v)) => format!("{f}:{v}"),
            (Some(f), None) => f.clone(),
            (None, Some(v)) => v.clone(),
            (None, None) => String::new(),
        }
    }
}

pub fn read_points<R: Read>(reader: R) -> Result<Vec<CostPoint>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize() {
        let p: CostPoint = row?;
        if !(p.gflops > 0.0) || !p.metric.is_finite() {
            return Err(Error::Config(format!("point `{}` needs a finite metric and positive GFLOPs", p.label)));
        }
        out.push(p);
    }
    Ok(out)
}

pub fn read_points_file(path: &std::path::Path) -> Result<Vec<CostPoint>> {
    read_points(std::fs::File::open(path)?)
}

/// One cell of a normalized-gain grid; `gain` is `None` for the baseline and for
/// cells whose log argument is not positive.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainCell {
    pub group: String,
    pub k: usize,
    pub m: usize,
    pub gain: Option<f64>,
}

/// `log[(LL − LL_base)/(GFLOPs − GFLOPs_base)]` with `LL = −metric`, per group of
/// `(K, M)` points, relative to that group's `baseline` cell.
pub fn normalized_gain(points: &[CostPoint], baseline: (usize, usize)) -> Result<Vec<GainCell>> {
    let mut groups: BTreeMap<String, Vec<&CostPoint>> = BTreeMap::new();
    for p in points {
        if p.k.is_none() || p.m.is_none() {
            return config_err(format!("grid point `{}` needs k and m", p.label));
        }
        groups.entry(p.group()).or_default().push(p);
    }
    let mut out = Vec::new();
    for (group, pts) in groups {
        let base = pts
            .iter()
            .find(|p| (p.k, p.m) == (Some(baseline.0), Some(baseline.1)))
            .ok_or_else(|| Error::Config(format!("group `{group}` has no baseline ({}, {})", baseline.0, baseline.1)))?;
        let mut cells: Vec<GainCell> = pts
            .iter()
            .map(|p| {
                let (k, m) = (p.k.unwrap_or(0), p.m.unwrap_or(0));
                let gain = if (k, m) == baseline {
                    None
                } else {
                    let ratio = (base.metric - p.metric) / (p.gflops - base.gflops);
                    (ratio > 0.0 && ratio.is_finite()).then(|| ratio.ln())
                };
                GainCell { group: group.clone(), k, m, gain }
            })
            .collect();
        cells.sort_by_key(|c| (c.k, c.m));
        out.extend(cells);
    }
    Ok(out)
}

/// Cubic in `log F`: `φ(F) = c0 + c1 L + c2 L² + c3 L³`, `L = ln F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PhiFit {
    pub coeffs: [f64; 4],
}

impl PhiFit {
    pub fn value(&self, flops: f64) -> f64 {
        let l = flops.ln();
        let c = &self.coeffs;
        c[0] + l * (c[1] + l * (c[2] + l * c[3]))
    }

    /// `dφ/dF = (c1 + 2c2 L + 3c3 L²)/F`.
    pub fn derivative(&self, flops: f64) -> f64 {
        let l = flops.ln();
        let c = &self.coeffs;
        (c[1] + 2.0 * c[2] * l + 3.0 * c[3] * l * l) / flops
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { coeffs: self.coeffs.map(|c| c * s) }
    }
}

/// Ordinary least squares on `[1, L, L², L³]` via a QR factorization.
pub fn fit_phi(points: &[(f64, f64)]) -> Result<PhiFit> {
    if points.len() < 4 {
        return Err(Error::Fit(format!("need at least 4 points, got {}", points.len())));
    }
    if points.iter().any(|&(f, m)| !(f > 0.0) || !m.is_finite()) {
        return Err(Error::Fit("points need positive FLOPs and finite metrics".into()));
    }
    // centring log F keeps the cubic design well conditioned
    let mean = points.iter().map(|p| p.0.ln()).sum::<f64>() / points.len() as f64;
    let x = DMatrix::from_fn(points.len(), 4, |i, j| (points[i].0.ln() - mean).powi(j as i32));
    let y = DVector::from_iterator(points.len(), points.iter().map(|p| p.1));
    let qr = x.clone().qr();
    let r = qr.r();
    let scale = r.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if r.diagonal().iter().any(|v| v.abs() <= 1e-10 * scale) {
        return Err(Error::Fit("rank-deficient design; need 4 distinct FLOPs values".into()));
    }
    let qty = qr.q().transpose() * y;
    let b = r
        .solve_upper_triangular(&qty)
        .ok_or_else(|| Error::Fit("singular triangular factor".into()))?;
    // expand the centred polynomial back to powers of L
    let (b0, b1, b2, b3) = (b[0], b[1], b[2], b[3]);
    let a = mean;
    let coeffs = [
        b0 - b1 * a + b2 * a * a - b3 * a * a * a,
        b1 - 2.0 * b2 * a + 3.0 * b3 * a * a,
        b2 - 3.0 * b3 * a,
        b3,
    ];
    Ok(PhiFit { coeffs })
}

/// `100·(baseline − variant)/baseline`.
pub fn relative_improvement(baseline: f64, variant: f64) -> f64 {
    100.0 * (baseline - variant) / baseline
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ImprovementRow {
    pub family: String,
    pub comparison: String,
    pub raw_pct: f64,
    pub normalized_pct: f64,
}

/// Rescales each family's improvement by `φ′(F_ref)/φ′(F_family)`.
///
/// `rows` holds `(family, improvement %, baseline GFLOPs)`.
pub fn normalized_improvement(rows: &[(String, f64, f64)], phi: &PhiFit, reference: &str) -> Result<Vec<(String, f64, f64)>> {
    let Some(&(_, _, ref_flops)) = rows.iter().find(|r| r.0 == reference) else {
        return config_err(format!("reference family `{reference}` missing"));
    };
    let dref = phi.derivative(ref_flops);
    rows.iter()
        .map(|(fam, imp, flops)| {
            let d = phi.derivative(*flops);
            if d == 0.0 || !d.is_finite() {
                return Err(Error::Fit(format!("φ′ vanishes at family `{fam}`")));
            }
            let norm = if fam == reference { *imp } else { imp * dref / d };
            Ok((fam.clone(), *imp, norm))
        })
        .collect()
}

/// Selector on `(variant, k, m)`; `None` fields match anything.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selector {
    pub variant: Option<String>,
    pub k: Option<usize>,
    pub m: Option<usize>,
}

impl Selector {
    pub fn matches(&self, p: &CostPoint) -> bool {
        self.variant.as_ref().is_none_or(|v| p.variant.as_ref() == Some(v))
            && self.k.is_none_or(|k| p.k == Some(k))
            && self.m.is_none_or(|m| p.m == Some(m))
    }

    fn describe(p: &CostPoint) -> String {
        let mut s = p.variant.clone().unwrap_or_default();
        if let Some(k) = p.k {
            s.push_str(&format!(" K={k}"));
        }
        if let Some(m) = p.m {
            s.push_str(&format!(" M={m}"));
        }
        s
    }
}

/// Raw and difficulty-normalized improvements of every non-baseline `(variant, K, M)`
/// combination over the baseline rows, one row per family.
///
/// φ is fitted on the baseline points of the families that every comparison
/// covers, which are also the families reported.
pub fn improvement_table(points: &[CostPoint], baseline: &Selector, reference: &str) -> Result<Vec<ImprovementRow>> {
    let mut base: BTreeMap<String, &CostPoint> = BTreeMap::new();
    let mut others: BTreeMap<String, BTreeMap<String, &CostPoint>> = BTreeMap::new();
    for p in points {
        let Some(fam) = p.family.clone() else {
            return config_err(format!("point `{}` has no family", p.label));
        };
        if baseline.matches(p) {
            if base.insert(fam.clone(), p).is_some() {
                return config_err(format!("family `{fam}` has two baseline points"));
            }
        } else {
            others.entry(Selector::describe(p)).or_default().insert(fam, p);
        }
    }
    if others.is_empty() {
        return config_err("no points to compare against the baseline");
    }
    let families: Vec<String> = base
        .keys()
        .filter(|f| others.values().all(|g| g.contains_key(*f)))
        .cloned()
        .collect();
    let phi = fit_phi(&families.iter().map(|f| (base[f].gflops, base[f].metric)).collect::<Vec<_>>())?;
    let mut ordered = families.clone();
    ordered.sort_by(|a, b| base[a].gflops.total_cmp(&base[b].gflops));
    let mut out = Vec::new();
    for (name, group) in &others {
        let rows: Vec<(String, f64, f64)> = ordered
            .iter()
            .map(|f| (f.clone(), relative_improvement(base[f].metric, group[f].metric), base[f].gflops))
            .collect();
        for (family, raw_pct, normalized_pct) in normalized_improvement(&rows, &phi, reference)? {
            out.push(ImprovementRow { family, comparison: name.clone(), raw_pct, normalized_pct });
        }
    }
    Ok(out)
}

/// Non-dominated points sorted by GFLOPs; exact duplicates collapse to the first.
pub fn pareto_frontier(points: &[CostPoint]) -> Vec<CostPoint> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| points[a].gflops.total_cmp(&points[b].gflops).then(points[a].metric.total_cmp(&points[b].metric)).then(a.cmp(&b)));
    let mut out: Vec<CostPoint> = Vec::new();
    let mut best = f64::INFINITY;
    for i in idx {
        let p = &points[i];
        if p.metric < best {
            best = p.metric;
            out.push(p.clone());
        }
    }
    out
}

pub fn write_gain_csv<W: Write>(cells: &[GainCell], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["group", "k", "m", "gain"])?;
    for c in cells {
        let gain = c.gain.map(|g| format!("{g}")).unwrap_or_default();
        wr.write_record([c.group.clone(), c.k.to_string(), c.m.to_string(), gain])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_improvement_csv<W: Write>(rows: &[ImprovementRow], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r)?;
    }
    wr.flush()?;
    Ok(())
}

pub fn write_points_csv<W: Write>(points: &[CostPoint], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for p in points {
        wr.serialize(p)?;
    }
    wr.flush()?;
    Ok(())
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter of all points on a log-FLOPs axis with the frontier as a dashed line.
pub fn pareto_svg(points: &[CostPoint], frontier: &[CostPoint], y_label: &str) -> String {
    let (w, h, pad) = (640.0, 420.0, 60.0);
    let lx: Vec<f64> = points.iter().map(|p| p.gflops.log10()).collect();
    let (x0, x1) = lx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let (y0, y1) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.metric), b.max(p.metric)));
    let span = |lo: f64, hi: f64| if hi > lo { hi - lo } else { 1.0 };
    let sx = |g: f64| pad + (g.log10() - x0) / span(x0, x1) * (w - 2.0 * pad);
    let sy = |m: f64| h - pad - (m - y0) / span(y0, y1) * (h - 2.0 * pad);
    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    s.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - pad,
        w - pad
    ));
    s.push_str(&format!("<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">GFLOPs (log scale)</text>\n", w / 2.0, h - 20.0));
    s.push_str(&format!(
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">{}</text>\n",
        h / 2.0,
        h / 2.0,
        escape(y_label)
    ));
    if frontier.len() > 1 {
        let pts: Vec<String> = frontier.iter().map(|p| format!("{:.2},{:.2}", sx(p.gflops), sy(p.metric))).collect();
        s.push_str(&format!("<polyline points=\"{}\" fill=\"none\" stroke=\"gray\" stroke-dasharray=\"5,4\"/>\n", pts.join(" ")));
    }
    for p in points {
        s.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"steelblue\"><title>{} ({}, {})</title></circle>\n",
            sx(p.gflops),
            sy(p.metric),
            escape(&p.label),
            p.gflops,
            p.metric
        ));
    }
    s.push_str("</svg>\n");
    s
}

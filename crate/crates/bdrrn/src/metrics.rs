//! Image fidelity (MSE/PSNR) and the Bjontegaard delta-rate calculation.

use std::collections::BTreeMap;
use std::io::BufRead;

use crate::error::{Error, Result};
use crate::plane::Plane8;

pub fn mse_planes(a: &Plane8, b: &Plane8) -> Result<f64> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::shape(
            "psnr",
            format!("{}x{}", a.width, a.height),
            format!("{}x{}", b.width, b.height),
        ));
    }
    let sum: f64 = a
        .pixels
        .iter()
        .zip(&b.pixels)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.pixels.len() as f64)
}

/// 10 * log10(255^2 / mse); identical planes give +infinity.
pub fn psnr(a: &Plane8, b: &Plane8) -> Result<f64> {
    let mse = mse_planes(a, b)?;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0 * 255.0 / mse).log10())
}

/// One rate-distortion measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    pub rate_kbps: f64,
    pub psnr_db: f64,
}

/// An RD curve of at least four points, strictly increasing in both rate
/// and PSNR once sorted by rate.
#[derive(Debug, Clone, PartialEq)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(mut points: Vec<RdPoint>) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::RdCurve(format!(
                "need at least 4 RD points, got {}",
                points.len()
            )));
        }
        for p in &points {
            if !(p.rate_kbps > 0.0) || !p.psnr_db.is_finite() {
                return Err(Error::RdCurve(format!(
                    "invalid RD point (rate {}, psnr {})",
                    p.rate_kbps, p.psnr_db
                )));
            }
        }
        points.sort_by(|a, b| a.rate_kbps.total_cmp(&b.rate_kbps));
        for w in points.windows(2) {
            if w[1].rate_kbps <= w[0].rate_kbps || w[1].psnr_db <= w[0].psnr_db {
                return Err(Error::RdCurve(format!(
                    "curve not strictly monotonic between ({}, {}) and ({}, {})",
                    w[0].rate_kbps, w[0].psnr_db, w[1].rate_kbps, w[1].psnr_db
                )));
            }
        }
        Ok(RdCurve { points })
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    fn psnr_range(&self) -> (f64, f64) {
        (
            self.points.first().unwrap().psnr_db,
            self.points.last().unwrap().psnr_db,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdResult {
    /// Negative values are bitrate savings of `test` over `anchor`.
    pub bd_rate_percent: f64,
    /// PSNR interval the integration covered, in dB.
    pub overlap_db: (f64, f64),
}

/// Cubic coefficients of log10(rate) as a function of PSNR: exact
/// interpolation at four points, least squares above four.
pub fn fit_log_rate_poly(curve: &RdCurve) -> Result<[f64; 4]> {
    fit_centered(curve, 0.0)
}

/// Same fit expressed in the shifted variable (psnr - center). Centering
/// near the data keeps the Vandermonde system well conditioned.
fn fit_centered(curve: &RdCurve, center: f64) -> Result<[f64; 4]> {
    // Normal equations A^T A c = A^T y with A the Vandermonde matrix in
    // PSNR; for 4 points this is the exact interpolation system.
    let mut ata = [[0.0f64; 4]; 4];
    let mut aty = [0.0f64; 4];
    for p in curve.points() {
        let x = p.psnr_db - center;
        let y = p.rate_kbps.log10();
        let powers = [1.0, x, x * x, x * x * x];
        for i in 0..4 {
            aty[i] += powers[i] * y;
            for j in 0..4 {
                ata[i][j] += powers[i] * powers[j];
            }
        }
    }
    solve4(ata, aty).ok_or_else(|| Error::RdCurve("degenerate polynomial fit".into()))
}

/// Gaussian elimination with partial pivoting on a 4x4 system.
fn solve4(mut a: [[f64; 4]; 4], mut b: [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let pivot = (col..4).max_by(|i, j| a[*i][col].abs().total_cmp(&a[*j][col].abs()))?;
        if a[pivot][col].abs() < 1e-30 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..4 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0f64; 4];
    for row in (0..4).rev() {
        let mut acc = b[row];
        for k in row + 1..4 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Closed-form integral of the cubic over [lo, hi].
fn integrate_poly(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| c[0] * x + c[1] * x * x / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    anti(hi) - anti(lo)
}

/// Bjontegaard delta rate of `test` against `anchor` (rate method): fit
/// log10(rate) over PSNR per curve, average the difference of the fits over
/// the PSNR overlap, convert back from log domain to percent.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<BdResult> {
    let (a_lo, a_hi) = anchor.psnr_range();
    let (t_lo, t_hi) = test.psnr_range();
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if !(hi > lo) {
        return Err(Error::RdCurve(format!(
            "PSNR ranges do not overlap ([{a_lo:.3}, {a_hi:.3}] vs [{t_lo:.3}, {t_hi:.3}])"
        )));
    }
    let center = 0.5 * (lo + hi);
    let ca = fit_centered(anchor, center)?;
    let ct = fit_centered(test, center)?;
    let (clo, chi) = (lo - center, hi - center);
    let d = (integrate_poly(&ct, clo, chi) - integrate_poly(&ca, clo, chi)) / (hi - lo);
    Ok(BdResult {
        bd_rate_percent: (10f64.powf(d) - 1.0) * 100.0,
        overlap_db: (lo, hi),
    })
}

/// Parses the RD text format: lines `<name> <qp> <rate_kbps> <psnr_db>`,
/// `#` comments. Returns curves grouped by sequence name, in first-seen
/// order of appearance.
pub fn parse_rd_file<R: BufRead>(reader: R) -> Result<Vec<(String, RdCurve)>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<RdPoint>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::io("reading RD file", e))?;
        let line = match line.find('#') {
            Some(i) => &line[..i],
            None => &line[..],
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 4 {
            return Err(Error::RdCurve(format!(
                "line {lineno}: expected `<name> <qp> <rate_kbps> <psnr_db>`"
            )));
        }
        let name = fields[0].to_string();
        let _qp: u32 = fields[1]
            .parse()
            .map_err(|_| Error::RdCurve(format!("line {lineno}: bad qp `{}`", fields[1])))?;
        let rate: f64 = fields[2]
            .parse()
            .map_err(|_| Error::RdCurve(format!("line {lineno}: bad rate `{}`", fields[2])))?;
        let psnr: f64 = fields[3]
            .parse()
            .map_err(|_| Error::RdCurve(format!("line {lineno}: bad psnr `{}`", fields[3])))?;
        if !groups.contains_key(&name) {
            order.push(name.clone());
        }
        groups.entry(name).or_default().push(RdPoint {
            rate_kbps: rate,
            psnr_db: psnr,
        });
    }
    order
        .into_iter()
        .map(|name| {
            let pts = groups.remove(&name).unwrap();
            RdCurve::new(pts)
                .map_err(|e| Error::RdCurve(format!("sequence `{name}`: {e}")))
                .map(|c| (name, c))
        })
        .collect()
}

/// A Table-II-style report: one row per sequence, one column per method,
/// BD-rate of each method against the anchor, plus the average row.
pub struct RdReport {
    pub methods: Vec<String>,
    pub rows: Vec<(String, Vec<Result<f64>>)>,
}

impl RdReport {
    pub fn build(
        anchor_name: &str,
        curves: &[(String, Vec<(String, RdCurve)>)],
    ) -> Result<RdReport> {
        let anchor = curves
            .iter()
            .find(|(name, _)| name == anchor_name)
            .ok_or_else(|| Error::RdCurve(format!("anchor `{anchor_name}` not among the inputs")))?;
        let methods: Vec<String> = curves
            .iter()
            .filter(|(name, _)| name != anchor_name)
            .map(|(name, _)| name.clone())
            .collect();
        if methods.is_empty() {
            return Err(Error::RdCurve("no test methods besides the anchor".into()));
        }
        let mut rows = Vec::new();
        for (seq, anchor_curve) in &anchor.1 {
            let mut cells = Vec::new();
            for m in &methods {
                let method_curves = &curves.iter().find(|(n, _)| n == m).unwrap().1;
                let cell = match method_curves.iter().find(|(s, _)| s == seq) {
                    Some((_, c)) => bd_rate(anchor_curve, c).map(|r| r.bd_rate_percent),
                    None => Err(Error::RdCurve(format!("method `{m}` lacks sequence `{seq}`"))),
                };
                cells.push(cell);
            }
            rows.push((seq.clone(), cells));
        }
        Ok(RdReport { methods, rows })
    }

    /// Arithmetic mean per method over rows that computed successfully.
    pub fn averages(&self) -> Vec<Option<f64>> {
        (0..self.methods.len())
            .map(|m| average_bd(self.rows.iter().filter_map(|(_, cells)| cells[m].as_ref().ok().copied())))
            .collect()
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let seq_w = self
            .rows
            .iter()
            .map(|(s, _)| s.len())
            .chain(["sequence".len(), "Average".len()])
            .max()
            .unwrap_or(8);
        out.push_str(&format!("{:seq_w$}", "sequence"));
        for m in &self.methods {
            out.push_str(&format!("  {:>12}", m));
        }
        out.push('\n');
        for (seq, cells) in &self.rows {
            out.push_str(&format!("{seq:seq_w$}"));
            for c in cells {
                match c {
                    Ok(v) => out.push_str(&format!("  {v:>12.2}")),
                    Err(e) => out.push_str(&format!("  {:>12}", format!("err: {e}"))),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!("{:seq_w$}", "Average"));
        for avg in self.averages() {
            match avg {
                Some(v) => out.push_str(&format!("  {v:>12.2}")),
                None => out.push_str(&format!("  {:>12}", "n/a")),
            }
        }
        out.push('\n');
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("sequence,method,bd_rate_percent\n");
        for (seq, cells) in &self.rows {
            for (m, c) in self.methods.iter().zip(cells) {
                match c {
                    Ok(v) => out.push_str(&format!("{seq},{m},{v:.6}\n")),
                    Err(_) => out.push_str(&format!("{seq},{m},\n")),
                }
            }
        }
        out
    }
}

/// Plain arithmetic mean of BD values (the Table-II average row).
pub fn average_bd(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for v in values {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(
            points
                .iter()
                .map(|(r, p)| RdPoint {
                    rate_kbps: *r,
                    psnr_db: *p,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Plane8::filled(8, 8, 100);
        assert!(psnr(&a, &a).unwrap().is_infinite());

        let b = Plane8::filled(8, 8, 101);
        let expect = 20.0 * 255f64.log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-12);

        let c = Plane8::filled(9, 8, 100);
        assert!(psnr(&a, &c).is_err());
    }

    #[test]
    fn psnr_matches_scalar_recomputation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(44);
        let a = Plane8::new(16, 16, (0..256).map(|_| rng.gen()).collect()).unwrap();
        let b = Plane8::new(16, 16, (0..256).map(|_| rng.gen()).collect()).unwrap();
        let mut acc = 0.0;
        for i in 0..256 {
            let d = a.pixels[i] as f64 - b.pixels[i] as f64;
            acc += d * d;
        }
        let expect = 10.0 * (255.0f64 * 255.0 / (acc / 256.0)).log10();
        assert!((psnr(&a, &b).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn identical_curves_give_zero() {
        let a = curve(&[(100.0, 30.0), (200.0, 33.0), (400.0, 36.0), (800.0, 39.0)]);
        let r = bd_rate(&a, &a).unwrap();
        assert!(r.bd_rate_percent.abs() < 1e-12);
    }

    #[test]
    fn constant_ratio_is_exact() {
        let a = curve(&[(100.0, 30.0), (200.0, 33.0), (400.0, 36.0), (800.0, 39.0)]);
        let t = curve(&[(90.0, 30.0), (180.0, 33.0), (360.0, 36.0), (720.0, 39.0)]);
        let r = bd_rate(&a, &t).unwrap();
        assert!((r.bd_rate_percent - -10.0).abs() < 1e-9, "{}", r.bd_rate_percent);
    }

    #[test]
    fn non_monotonic_curve_rejected() {
        let err = RdCurve::new(vec![
            RdPoint { rate_kbps: 100.0, psnr_db: 30.0 },
            RdPoint { rate_kbps: 200.0, psnr_db: 29.0 },
            RdPoint { rate_kbps: 400.0, psnr_db: 36.0 },
            RdPoint { rate_kbps: 800.0, psnr_db: 39.0 },
        ])
        .unwrap_err();
        assert!(err.to_string().contains("monotonic"), "{err}");
    }

    #[test]
    fn too_few_points_rejected() {
        let err = RdCurve::new(vec![
            RdPoint { rate_kbps: 100.0, psnr_db: 30.0 },
            RdPoint { rate_kbps: 200.0, psnr_db: 33.0 },
            RdPoint { rate_kbps: 400.0, psnr_db: 36.0 },
        ])
        .unwrap_err();
        assert!(err.to_string().contains("4"), "{err}");
    }

    #[test]
    fn disjoint_psnr_ranges_rejected() {
        let a = curve(&[(100.0, 30.0), (200.0, 31.0), (400.0, 32.0), (800.0, 33.0)]);
        let t = curve(&[(100.0, 40.0), (200.0, 41.0), (400.0, 42.0), (800.0, 43.0)]);
        assert!(bd_rate(&a, &t).is_err());
    }

    #[test]
    fn antisymmetry_for_constant_offset() {
        let a = curve(&[(100.0, 30.0), (200.0, 33.0), (400.0, 36.0), (800.0, 39.0)]);
        let t = curve(&[(87.0, 30.0), (174.0, 33.0), (348.0, 36.0), (696.0, 39.0)]);
        let ab = bd_rate(&a, &t).unwrap().bd_rate_percent;
        let ba = bd_rate(&t, &a).unwrap().bd_rate_percent;
        assert!(((1.0 + ab / 100.0) * (1.0 + ba / 100.0) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn rate_scale_invariance() {
        let a = curve(&[(100.0, 30.0), (230.0, 33.2), (410.0, 36.1), (790.0, 38.7)]);
        let t = curve(&[(95.0, 30.4), (210.0, 33.5), (400.0, 36.4), (780.0, 39.1)]);
        let base = bd_rate(&a, &t).unwrap().bd_rate_percent;
        let k = 7.25;
        let scale = |c: &RdCurve| {
            curve(
                &c.points()
                    .iter()
                    .map(|p| (p.rate_kbps * k, p.psnr_db))
                    .collect::<Vec<_>>(),
            )
        };
        let scaled = bd_rate(&scale(&a), &scale(&t)).unwrap().bd_rate_percent;
        assert!((base - scaled).abs() < 1e-9);
    }

    #[test]
    fn psnr_shift_covariance() {
        let a = curve(&[(100.0, 30.0), (230.0, 33.2), (410.0, 36.1), (790.0, 38.7)]);
        let t = curve(&[(95.0, 30.4), (210.0, 33.5), (400.0, 36.4), (780.0, 39.1)]);
        let base = bd_rate(&a, &t).unwrap().bd_rate_percent;
        let delta = 4.5;
        let shift = |c: &RdCurve| {
            curve(
                &c.points()
                    .iter()
                    .map(|p| (p.rate_kbps, p.psnr_db + delta))
                    .collect::<Vec<_>>(),
            )
        };
        let shifted = bd_rate(&shift(&a), &shift(&t)).unwrap().bd_rate_percent;
        assert!((base - shifted).abs() < 1e-9);
    }

    #[test]
    fn exact_fit_interpolates_four_points() {
        let c = curve(&[(100.0, 30.0), (185.0, 33.4), (370.0, 36.3), (760.0, 39.2)]);
        let poly = fit_log_rate_poly(&c).unwrap();
        for p in c.points() {
            let x = p.psnr_db;
            let y = poly[0] + poly[1] * x + poly[2] * x * x + poly[3] * x * x * x;
            assert!((y - p.rate_kbps.log10()).abs() < 1e-8);
        }
    }

    #[test]
    fn rd_file_parsing_and_report() {
        use std::io::Cursor;
        let text = "# demo\nSeqA 22 800 39\nSeqA 27 400 36\nSeqA 32 200 33\nSeqA 37 100 30\n";
        let curves = parse_rd_file(Cursor::new(text)).unwrap();
        assert_eq!(curves.len(), 1);
        assert_eq!(curves[0].0, "SeqA");

        let named = vec![
            ("anchor".to_string(), curves.clone()),
            ("test".to_string(), curves.clone()),
        ];
        let report = RdReport::build("anchor", &named).unwrap();
        assert_eq!(report.rows.len(), 1);
        let v = report.rows[0].1[0].as_ref().unwrap();
        assert!(v.abs() < 1e-12);
        assert!(report.to_csv().starts_with("sequence,method,bd_rate_percent\n"));

        assert!(RdReport::build("missing", &named).is_err());
    }

    #[test]
    fn average_is_arithmetic_mean() {
        assert_eq!(average_bd([-2.0, -4.0]), Some(-3.0));
        assert_eq!(average_bd(std::iter::empty()), None);
    }
}

//! Evaluation metrics: identity restoration (DTI/DNTI), detection error
//! rates (MACER/BSCER/EER/DET), distribution separation (BMS) and the
//! morph acceptance matrix (MAP).
//!
//! Every decision uses the `score >= tau` convention: a score equal to the
//! threshold is accepted as bona fide.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::types::{RestorationScenario, ScoreLabel, ScoreRecord};
use crate::util::fmt_f64;

fn non_empty(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.is_empty() {
        return Err(Error::EmptyScoreSet(what));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(what));
    }
    Ok(())
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Mean similarity to the target identity, relative to `tau`.
pub fn dti(similarities_to_gt: &[f64], tau: f64) -> Result<f64> {
    non_empty(similarities_to_gt, "dti")?;
    Ok(mean(similarities_to_gt) - tau)
}

/// Mean similarity to the non-target identity, relative to `tau`.
pub fn dnti(similarities_to_nontarget: &[f64], tau: f64, scenario: RestorationScenario) -> Result<f64> {
    if scenario == RestorationScenario::BonaFide {
        return Err(Error::ScenarioNotApplicable(scenario.to_string()));
    }
    non_empty(similarities_to_nontarget, "dnti")?;
    Ok(mean(similarities_to_nontarget) - tau)
}

/// Fraction of morph scores accepted as bona fide (`s >= tau`).
pub fn macer(morph_scores: &[f64], tau: f64) -> Result<f64> {
    non_empty(morph_scores, "macer")?;
    Ok(morph_scores.iter().filter(|&&s| s >= tau).count() as f64 / morph_scores.len() as f64)
}

/// Fraction of bona fide scores rejected as morphs (`s < tau`).
pub fn bscer(bona_scores: &[f64], tau: f64) -> Result<f64> {
    non_empty(bona_scores, "bscer")?;
    Ok(bona_scores.iter().filter(|&&s| s < tau).count() as f64 / bona_scores.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetPoint {
    pub tau: f64,
    pub macer: f64,
    pub bscer: f64,
}

fn sorted(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// One point per candidate threshold: `-inf`, every distinct observed
/// score in increasing order, and `+inf`.
pub fn det_curve(bona: &[f64], morph: &[f64]) -> Result<Vec<DetPoint>> {
    non_empty(bona, "bona fide scores")?;
    non_empty(morph, "morph scores")?;
    let b = sorted(bona);
    let m = sorted(morph);
    let mut taus: Vec<f64> = b.iter().chain(&m).copied().collect();
    taus.sort_by(f64::total_cmp);
    taus.dedup();
    let mut out = Vec::with_capacity(taus.len() + 2);
    out.push(DetPoint { tau: f64::NEG_INFINITY, macer: 1.0, bscer: 0.0 });
    // counts of scores strictly below tau, advanced monotonically
    let (mut ib, mut im) = (0, 0);
    for &tau in &taus {
        while ib < b.len() && b[ib] < tau {
            ib += 1;
        }
        while im < m.len() && m[im] < tau {
            im += 1;
        }
        out.push(DetPoint {
            tau,
            macer: (m.len() - im) as f64 / m.len() as f64,
            bscer: ib as f64 / b.len() as f64,
        });
    }
    out.push(DetPoint { tau: f64::INFINITY, macer: 0.0, bscer: 1.0 });
    Ok(out)
}

/// Equal error rate: the crossing of the MACER and BSCER curves, linearly
/// interpolated between adjacent candidate thresholds.
pub fn eer(bona: &[f64], morph: &[f64]) -> Result<f64> {
    let curve = det_curve(bona, morph)?;
    eer_from_curve(&curve)
}

pub(crate) fn eer_from_curve(curve: &[DetPoint]) -> Result<f64> {
    let diff = |p: &DetPoint| p.macer - p.bscer;
    let i = curve.iter().position(|p| diff(p) <= 0.0).ok_or(Error::EmptyScoreSet("det curve"))?;
    let (prev, cur) = (&curve[i.saturating_sub(1)], &curve[i]);
    let (d0, d1) = (diff(prev), diff(cur));
    if d1 == 0.0 || i == 0 {
        return Ok(cur.macer);
    }
    let t = d0 / (d0 - d1);
    Ok(prev.macer + t * (cur.macer - prev.macer))
}

/// BSCER at the lowest threshold whose MACER does not exceed `target_macer`.
pub fn bscer_at_macer(bona: &[f64], morph: &[f64], target_macer: f64) -> Result<f64> {
    if !(target_macer > 0.0 && target_macer <= 1.0) {
        return Err(Error::RangeError(format!("target MACER {target_macer} outside (0, 1]")));
    }
    let curve = det_curve(bona, morph)?;
    let p = curve.iter().find(|p| p.macer <= target_macer).expect("+inf sentinel has macer 0");
    Ok(p.bscer)
}

/// 1-Wasserstein distance between the two empirical score distributions,
/// integrated exactly from their piecewise-constant CDFs.
pub fn bms(bona: &[f64], morph: &[f64]) -> Result<f64> {
    non_empty(bona, "bona fide scores")?;
    non_empty(morph, "morph scores")?;
    let b = sorted(bona);
    let m = sorted(morph);
    let (nb, nm) = (b.len() as f64, m.len() as f64);
    let (mut ib, mut im) = (0usize, 0usize);
    let mut total = 0.0;
    let mut x = b[0].min(m[0]);
    while ib < b.len() || im < m.len() {
        let next = match (b.get(ib), m.get(im)) {
            (Some(&u), Some(&v)) => u.min(v),
            (Some(&u), None) => u,
            (None, Some(&v)) => v,
            (None, None) => unreachable!(),
        };
        total += (ib as f64 / nb - im as f64 / nm).abs() * (next - x);
        while ib < b.len() && b[ib] == next {
            ib += 1;
        }
        while im < m.len() && m[im] == next {
            im += 1;
        }
        x = next;
    }
    Ok(total)
}

/// Splits records into bona fide and morph score lists.
pub fn partition(records: &[ScoreRecord]) -> (Vec<f64>, Vec<f64>) {
    let mut bona = Vec::new();
    let mut morph = Vec::new();
    for r in records {
        match r.label {
            ScoreLabel::BonaFide => bona.push(r.score),
            ScoreLabel::Morph => morph.push(r.score),
        }
    }
    (bona, morph)
}

/// Output-versus-ground-truth similarities of the morph records.
pub fn build_dd(records: &[ScoreRecord]) -> Vec<f64> {
    records.iter().filter(|r| r.label == ScoreLabel::Morph).filter_map(|r| r.score_gt).collect()
}

/// Verification outcomes of one morph: `verified[frs][attempt]` is true when
/// that attempt matched both contributing subjects.
#[derive(Clone, Debug, PartialEq)]
pub struct MapOutcome {
    pub morph_id: String,
    pub verified: Vec<Vec<bool>>,
}

/// `values[r-1][c-1]` is the fraction of morphs verified against both
/// subjects on at least `r` attempts by at least `c` recognisers.
#[derive(Clone, Debug, PartialEq)]
pub struct MapTable {
    pub values: Vec<Vec<f64>>,
}

impl MapTable {
    /// 1-based lookup.
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r - 1][c - 1]
    }
}

pub fn map_matrix(outcomes: &[MapOutcome], max_r: usize, max_c: usize) -> Result<MapTable> {
    if outcomes.is_empty() {
        return Err(Error::EmptyScoreSet("map outcomes"));
    }
    let mut counts = vec![vec![0usize; max_c]; max_r];
    for o in outcomes {
        let per_frs: Vec<usize> = o.verified.iter().map(|a| a.iter().filter(|&&v| v).count()).collect();
        for (r, row) in counts.iter_mut().enumerate() {
            let frs_ok = per_frs.iter().filter(|&&k| k > r).count();
            for (c, cell) in row.iter_mut().enumerate() {
                if frs_ok > c {
                    *cell += 1;
                }
            }
        }
    }
    let n = outcomes.len() as f64;
    Ok(MapTable { values: counts.into_iter().map(|row| row.into_iter().map(|k| k as f64 / n).collect()).collect() })
}

/// One line of the metrics report.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub dataset: String,
    pub scenario: String,
    pub method: String,
    pub metric: String,
    pub value: f64,
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("dataset,scenario,method,metric,value\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.dataset, r.scenario, r.method, r.metric, fmt_f64(r.value));
    }
    s
}

pub fn det_csv(points: &[DetPoint]) -> String {
    let mut s = String::from("tau,macer,bscer\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", fmt_f64(p.tau), fmt_f64(p.macer), fmt_f64(p.bscer));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dti_dnti_examples() {
        assert_eq!(dti(&[0.4, 0.4], 0.4).unwrap(), 0.0);
        assert!(dti(&[0.5, 0.3], 0.4).unwrap().abs() < 1e-15);
        assert!((dnti(&[0.1, 0.1], 0.4, RestorationScenario::Accomplice).unwrap() + 0.3).abs() < 1e-15);
        assert!(matches!(
            dnti(&[0.1], 0.4, RestorationScenario::BonaFide),
            Err(Error::ScenarioNotApplicable(_))
        ));
        assert!(matches!(dti(&[], 0.0), Err(Error::EmptyScoreSet(_))));
    }

    #[test]
    fn error_rate_examples() {
        assert!((macer(&[0.5, 0.2, 0.4], 0.331).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(macer(&[0.5, -1.0], -1.0).unwrap(), 1.0);
        assert_eq!(macer(&[0.5, 0.2], 0.5 + 1e-12).unwrap(), 0.0);
        assert_eq!(bscer(&[0.9, 0.3], 0.331).unwrap(), 0.5);
        assert_eq!(bscer(&[0.9, -1.0], -1.0).unwrap(), 0.0);
    }

    #[test]
    fn eer_examples() {
        assert_eq!(eer(&[0.9, 0.8, 0.7], &[0.3, 0.2, 0.1]).unwrap(), 0.0);
        assert_eq!(eer(&[0.1, 0.5, 0.3], &[0.1, 0.5, 0.3]).unwrap(), 0.5);
        // candidates -inf,.3,.4,.5,.6,+inf: (macer,bscer) = (1,0) (1,0) (.5,0) (.5,.5) (0,.5) (0,1)
        assert_eq!(eer(&[0.6, 0.4], &[0.5, 0.3]).unwrap(), 0.5);
        assert_eq!(eer(&[0.3, 0.1], &[0.9, 0.8]).unwrap(), 1.0);
    }

    #[test]
    fn bscer_at_macer_examples() {
        assert_eq!(bscer_at_macer(&[0.9, 0.8], &[0.1, 0.2], 0.1).unwrap(), 0.0);
        assert_eq!(bscer_at_macer(&[0.1, 0.8], &[0.5, 0.2], 1.0).unwrap(), 0.0);
        assert!(bscer_at_macer(&[0.1], &[0.2], 0.0).is_err());
    }

    #[test]
    fn bms_examples() {
        assert!((bms(&[0.8, 0.9], &[0.1, 0.2]).unwrap() - 0.7).abs() < 1e-12);
        assert_eq!(bms(&[0.3, 0.1], &[0.1, 0.3]).unwrap(), 0.0);
        assert!((bms(&[0.0], &[1.0, 0.0]).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn map_examples() {
        let o = MapOutcome { morph_id: "m".into(), verified: vec![vec![true], vec![true], vec![false]] };
        let t = map_matrix(&[o], 1, 3).unwrap();
        assert_eq!(t.values, vec![vec![1.0, 1.0, 0.0]]);
        let none = MapOutcome { morph_id: "n".into(), verified: vec![vec![false, false]; 3] };
        assert!(map_matrix(&[none], 2, 3).unwrap().values.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn csv_headers() {
        assert!(metrics_csv(&[]).starts_with("dataset,scenario,method,metric,value\n"));
        let pts = det_curve(&[0.5], &[0.25]).unwrap();
        assert_eq!(det_csv(&pts), "tau,macer,bscer\n-inf,1,0\n0.25,1,0\n0.5,0,0\ninf,0,1\n");
    }
}

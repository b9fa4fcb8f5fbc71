//! Differential morph-attack detection: score the demorphed output against
//! the trusted reference, threshold, and calibrate that threshold.

use std::path::Path;

use crate::backends::{Backends, Embedding};
use crate::demorpher::{demorph, DemorpherModel};
use crate::error::{Error, Result};
use crate::types::{DocumentPair, ImageTensor, RestorationScenario, ScoreLabel, ScoreRecord};
use crate::util::fmt_f64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decision {
    BonaFide,
    Morphed,
}

/// `BonaFide` iff `s >= tau`.
pub fn classify(s: f64, tau: f64) -> Decision {
    if s >= tau {
        Decision::BonaFide
    } else {
        Decision::Morphed
    }
}

/// Calibrated decision threshold and the data it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Threshold {
    pub tau: f64,
    pub frs: String,
    pub target_fmr: f64,
    pub mated_n: usize,
    pub nonmated_n: usize,
    pub achieved_tmr: f64,
    pub achieved_fmr: f64,
}

const SIDECAR_HEADER: &str = "tau,target_fmr,mated_n,nonmated_n,achieved_tmr,achieved_fmr";

impl Threshold {
    pub fn to_csv(&self) -> String {
        format!(
            "{SIDECAR_HEADER}\n{},{},{},{},{},{}\n",
            fmt_f64(self.tau),
            fmt_f64(self.target_fmr),
            self.mated_n,
            self.nonmated_n,
            fmt_f64(self.achieved_tmr),
            fmt_f64(self.achieved_fmr)
        )
    }

    pub fn from_csv(text: &str, frs: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Parse("empty threshold file".into()))?;
        let names: Vec<&str> = header.split(',').map(str::trim).collect();
        let row: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Parse("threshold file has no data row".into()))?
            .split(',')
            .map(str::trim)
            .collect();
        let field = |name: &str| -> Result<&str> {
            names
                .iter()
                .position(|n| *n == name)
                .and_then(|i| row.get(i).copied())
                .ok_or_else(|| Error::Parse(format!("threshold file lacks '{name}'")))
        };
        let real = |name: &str| -> Result<f64> {
            field(name)?.parse::<f64>().map_err(|e| Error::Parse(format!("{name}: {e}")))
        };
        let count = |name: &str| -> Result<usize> {
            field(name)?.parse::<usize>().map_err(|e| Error::Parse(format!("{name}: {e}")))
        };
        Ok(Self {
            tau: real("tau")?,
            frs: frs.to_string(),
            target_fmr: real("target_fmr")?,
            mated_n: count("mated_n")?,
            nonmated_n: count("nonmated_n")?,
            achieved_tmr: real("achieved_tmr")?,
            achieved_fmr: if names.contains(&"achieved_fmr") { real("achieved_fmr")? } else { f64::NAN },
        })
    }
}

fn fraction_at_least(xs: &[f64], tau: f64) -> f64 {
    xs.iter().filter(|&&s| s >= tau).count() as f64 / xs.len() as f64
}

/// Lowest candidate threshold whose false match rate is within
/// `target_fmr`. Candidates are the distinct observed scores plus the
/// smallest float above the maximum.
pub fn calibrate_threshold(mated: &[f64], nonmated: &[f64], target_fmr: f64, frs: &str) -> Result<Threshold> {
    if mated.is_empty() {
        return Err(Error::EmptyScoreSet("mated scores"));
    }
    if nonmated.is_empty() {
        return Err(Error::EmptyScoreSet("non-mated scores"));
    }
    if !(target_fmr > 0.0 && target_fmr < 1.0) {
        return Err(Error::RangeError(format!("target FMR {target_fmr} outside (0, 1)")));
    }
    if mated.iter().chain(nonmated).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("calibration scores"));
    }
    let mut non = nonmated.to_vec();
    non.sort_by(f64::total_cmp);
    let mut candidates: Vec<f64> = mated.iter().chain(nonmated).copied().collect();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    candidates.push(candidates.last().unwrap().next_up());
    let n = non.len() as f64;
    let tau = candidates
        .into_iter()
        .find(|&t| {
            let below = non.partition_point(|&s| s < t);
            (non.len() - below) as f64 / n <= target_fmr
        })
        .expect("sentinel has zero false matches");
    Ok(Threshold {
        tau,
        frs: frs.to_string(),
        target_fmr,
        mated_n: mated.len(),
        nonmated_n: nonmated.len(),
        achieved_tmr: fraction_at_least(mated, tau),
        achieved_fmr: fraction_at_least(nonmated, tau),
    })
}

/// What replaces the demorpher when producing a score.
#[derive(Clone, Copy)]
pub enum Detector<'a> {
    /// The trained demorpher.
    Model(&'a DemorpherModel),
    /// Baseline that passes the document image through unchanged.
    NoDemorph,
}

impl Detector<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Model(_) => "demorpher",
            Self::NoDemorph => "no_demorph",
        }
    }

    pub fn restore(&self, pair: &DocumentPair, backends: &Backends) -> Result<ImageTensor> {
        match self {
            Self::Model(m) => Ok(demorph(pair, m, backends)?.image),
            Self::NoDemorph => Ok(pair.doc.clone()),
        }
    }
}

/// `s = S(embed(ref), embed(restored doc))`; `score_gt` compares the output
/// with the ground truth when the pair carries one.
pub fn dmad_score(pair: &DocumentPair, detector: Detector<'_>, backends: &Backends) -> Result<ScoreRecord> {
    let out = detector.restore(pair, backends)?;
    score_restored(pair, &backends.frs.embed(&out)?, detector.name(), backends)
}

/// Score record of a pair whose restored output has embedding `e_out`.
pub fn score_restored(pair: &DocumentPair, e_out: &Embedding, method: &str, backends: &Backends) -> Result<ScoreRecord> {
    let score = crate::backends::similarity(&backends.frs.embed(&pair.reference)?, e_out);
    let label = match pair.scenario {
        RestorationScenario::BonaFide => ScoreLabel::BonaFide,
        _ => ScoreLabel::Morph,
    };
    let mut rec = ScoreRecord::new(pair.pair_id.clone(), label, pair.scenario, score, method)?;
    rec.morph_method = pair.morph_method.clone();
    if label == ScoreLabel::Morph {
        if let Some(gt) = &pair.gt {
            rec.score_gt = Some(crate::backends::similarity(&backends.frs.embed(gt)?, e_out));
        }
    }
    Ok(rec)
}

pub const SCORES_HEADER: &str = "pair_id,label,scenario,morph_method,method,score,score_gt";

pub fn scores_csv(records: &[ScoreRecord]) -> String {
    let mut s = format!("{SCORES_HEADER}\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.pair_id,
            r.label.as_str(),
            r.scenario,
            r.morph_method.as_deref().unwrap_or(""),
            r.method,
            fmt_f64(r.score),
            r.score_gt.map(fmt_f64).unwrap_or_default()
        ));
    }
    s
}

pub fn parse_scores_csv(text: &str) -> Result<Vec<ScoreRecord>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != SCORES_HEADER {
        return Err(Error::Parse(format!("unexpected scores header '{}'", header.join(","))));
    }
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| Error::Parse(e.to_string()))?;
        let num = |i: usize| -> Result<f64> {
            row[i].parse::<f64>().map_err(|e| Error::Parse(format!("{}: {e}", &row[i])))
        };
        let mut rec = ScoreRecord::new(&row[0], row[1].parse()?, row[2].parse()?, num(5)?, &row[4])?;
        rec.morph_method = (!row[3].is_empty()).then(|| row[3].to_string());
        rec.score_gt = if row[6].is_empty() { None } else { Some(num(6)?) };
        out.push(rec);
    }
    Ok(out)
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    parse_scores_csv(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn classify_boundary() {
        assert_eq!(classify(0.331, 0.331), Decision::BonaFide);
        assert_eq!(classify(0.331 - 1e-9, 0.331), Decision::Morphed);
        assert_eq!(classify(1.0, 1.0), Decision::BonaFide);
    }

    #[test]
    fn calibration_examples() {
        let t = calibrate_threshold(&[0.9, 0.8], &[0.1, 0.2], 0.5, "f").unwrap();
        assert_eq!(t.tau, 0.2);
        assert_eq!(t.achieved_tmr, 1.0);
        assert_eq!(t.achieved_fmr, 0.5);
        let sep = calibrate_threshold(&[0.9, 0.8], &[0.1, 0.2], 0.01, "f").unwrap();
        assert_eq!(sep.tau, 0.8);
        assert_eq!(sep.achieved_tmr, 1.0);
        let single = calibrate_threshold(&[0.1], &[0.4], 0.5, "f").unwrap();
        assert!(single.tau > 0.4);
        assert!(matches!(calibrate_threshold(&[], &[0.1], 0.5, "f"), Err(Error::EmptyScoreSet(_))));
    }

    #[test]
    fn sidecar_round_trip() {
        let t = calibrate_threshold(&[0.9, 0.7, 0.3], &[0.1, 0.35, 0.2], 0.34, "toy").unwrap();
        let back = Threshold::from_csv(&t.to_csv(), "toy").unwrap();
        assert_eq!(back, t);
        assert!(t.to_csv().starts_with("tau,target_fmr,mated_n,nonmated_n,achieved_tmr"));
    }

    #[test]
    fn scores_csv_round_trip() {
        let mut a = ScoreRecord::new("p1", ScoreLabel::Morph, RestorationScenario::Accomplice, 0.25, "demorpher").unwrap();
        a.morph_method = Some("blend".into());
        a.score_gt = Some(0.75);
        let b = ScoreRecord::new("p2", ScoreLabel::BonaFide, RestorationScenario::BonaFide, -0.5, "demorpher").unwrap();
        let text = scores_csv(&[a.clone(), b.clone()]);
        assert!(text.starts_with("pair_id,label,scenario,morph_method,method,score,score_gt\n"));
        assert!(text.contains("p2,bona_fide,bonafide,,demorpher,-0.5,\n"));
        assert_eq!(parse_scores_csv(&text).unwrap(), vec![a, b]);
    }
}

//! Scoring a corpus split with a detector and summarising it as metric rows.

use rayon::prelude::*;

use crate::backends::{similarity, Backends};
use crate::config::MorphMethod;
use crate::dmad::{score_restored, Detector};
use crate::error::{Error, Result};
use crate::metrics::{bms, bscer, dnti, dti, eer, macer, MetricRow};
use crate::toyworld::{Corpus, EvalPair, Split};
use crate::types::{RestorationScenario, ScoreLabel, ScoreRecord};

/// A score record with the similarities used by the restoration metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluated {
    pub record: ScoreRecord,
    /// `S(out, gt)`; defined for bona fide pairs too.
    pub sim_gt: f64,
    pub sim_nontarget: Option<f64>,
}

pub fn evaluate_pairs(pairs: &[EvalPair], detector: Detector<'_>, backends: &Backends) -> Result<Vec<Evaluated>> {
    pairs
        .par_iter()
        .map(|p| {
            let out = detector.restore(&p.pair, backends)?;
            let e_out = backends.frs.embed(&out)?;
            let record = score_restored(&p.pair, &e_out, detector.name(), backends)?;
            let gt = p.pair.gt.as_ref().ok_or_else(|| Error::MissingGroundTruth(p.pair.pair_id.clone()))?;
            let sim_gt = similarity(&backends.frs.embed(gt)?, &e_out);
            let sim_nontarget = match &p.nontarget {
                Some(n) => Some(similarity(&backends.frs.embed(n)?, &e_out)),
                None => None,
            };
            Ok(Evaluated { record, sim_gt, sim_nontarget })
        })
        .collect()
}

/// Scenarios named on the command line; `all` expands to every one.
pub fn parse_scenarios(s: &str) -> Result<Vec<RestorationScenario>> {
    if s == "all" {
        return Ok(vec![RestorationScenario::Accomplice, RestorationScenario::Criminal, RestorationScenario::BonaFide]);
    }
    Ok(vec![s.parse()?])
}

/// Scores of one detector: the bona fide pairs of the split followed by
/// the morph pairs of each requested morph scenario.
pub fn evaluate_corpus(
    corpus: &Corpus,
    split: Split,
    scenarios: &[RestorationScenario],
    detector: Detector<'_>,
    backends: &Backends,
) -> Result<Vec<Evaluated>> {
    let mut out = evaluate_pairs(&corpus.eval_pairs(RestorationScenario::BonaFide, split, None), detector, backends)?;
    for &sc in scenarios {
        if sc != RestorationScenario::BonaFide {
            out.extend(evaluate_pairs(&corpus.eval_pairs(sc, split, None), detector, backends)?);
        }
    }
    Ok(out)
}

fn row(dataset: &str, scenario: RestorationScenario, method: String, metric: &str, value: f64) -> MetricRow {
    MetricRow { dataset: dataset.into(), scenario: scenario.as_str().into(), method, metric: metric.into(), value }
}

/// Metric rows of one detector's scores. Morph scenarios get DTI, DNTI,
/// MACER@τ, BSCER@τ, EER and BMS per morph method and pooled; the bona fide
/// scenario gets DTI and BSCER@τ. Method is `"{detector}/{method|pooled}"`.
pub fn metric_rows(
    dataset: &str,
    evaluated: &[Evaluated],
    scenarios: &[RestorationScenario],
    methods: &[MorphMethod],
    tau: f64,
) -> Result<Vec<MetricRow>> {
    let bona: Vec<&Evaluated> = evaluated.iter().filter(|e| e.record.label == ScoreLabel::BonaFide).collect();
    let bona_scores: Vec<f64> = bona.iter().map(|e| e.record.score).collect();
    let detector = evaluated.first().map(|e| e.record.method.clone()).unwrap_or_default();
    let mut rows = Vec::new();
    for &sc in scenarios {
        if sc == RestorationScenario::BonaFide {
            let name = format!("{detector}/pooled");
            let sims: Vec<f64> = bona.iter().map(|e| e.sim_gt).collect();
            rows.push(row(dataset, sc, name.clone(), "dti", dti(&sims, tau)?));
            rows.push(row(dataset, sc, name, "bscer", bscer(&bona_scores, tau)?));
            continue;
        }
        let groups = methods.iter().map(|m| Some(m.as_str())).chain([None]);
        for g in groups {
            let morph: Vec<&Evaluated> = evaluated
                .iter()
                .filter(|e| {
                    e.record.label == ScoreLabel::Morph
                        && e.record.scenario == sc
                        && g.is_none_or(|m| e.record.morph_method.as_deref() == Some(m))
                })
                .collect();
            if morph.is_empty() {
                continue;
            }
            let name = format!("{detector}/{}", g.unwrap_or("pooled"));
            let scores: Vec<f64> = morph.iter().map(|e| e.record.score).collect();
            let to_gt: Vec<f64> = morph.iter().map(|e| e.sim_gt).collect();
            let to_nt: Vec<f64> = morph.iter().filter_map(|e| e.sim_nontarget).collect();
            rows.push(row(dataset, sc, name.clone(), "dti", dti(&to_gt, tau)?));
            if !to_nt.is_empty() {
                rows.push(row(dataset, sc, name.clone(), "dnti", dnti(&to_nt, tau, sc)?));
            }
            rows.push(row(dataset, sc, name.clone(), "macer", macer(&scores, tau)?));
            rows.push(row(dataset, sc, name.clone(), "bscer", bscer(&bona_scores, tau)?));
            rows.push(row(dataset, sc, name.clone(), "eer", eer(&bona_scores, &scores)?));
            rows.push(row(dataset, sc, name, "bms", bms(&bona_scores, &scores)?));
        }
    }
    Ok(rows)
}

/// Looks up one metric value.
pub fn find_metric(rows: &[MetricRow], scenario: RestorationScenario, method: &str, metric: &str) -> Option<f64> {
    rows.iter()
        .find(|r| r.scenario == scenario.as_str() && r.method == method && r.metric == metric)
        .map(|r| r.value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::toyworld::{build_corpus, ToyWorld};

    #[test]
    fn baseline_rows_on_small_corpus() {
        let mut cfg = RunConfig::toy();
        cfg.corpus.n_identities = 20;
        let world = ToyWorld::new(Backends::toy(&cfg.backend).unwrap(), cfg.corpus.id_dim).unwrap();
        let corpus = build_corpus(&cfg.corpus, &world).unwrap();
        let scenarios = parse_scenarios("all").unwrap();
        let ev = evaluate_corpus(&corpus, Split::Train, &scenarios, Detector::NoDemorph, &world.backends).unwrap();
        assert!(ev.iter().all(|e| (-1.0..=1.0).contains(&e.record.score)));
        let rows = metric_rows("toy", &ev, &scenarios, &cfg.corpus.methods, corpus.tau()).unwrap();
        assert!(rows.iter().all(|r| r.value.is_finite()));
        assert!(!rows.iter().any(|r| r.scenario == "bonafide" && r.metric == "dnti"));
        assert!(find_metric(&rows, RestorationScenario::Accomplice, "no_demorph/pooled", "eer").is_some());
        // Without restoration the output is the document itself.
        for e in ev.iter().filter(|e| e.record.label == ScoreLabel::Morph) {
            assert!((e.record.score_gt.unwrap() - e.sim_gt).abs() < 1e-12);
        }
    }
}

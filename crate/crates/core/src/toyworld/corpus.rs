use std::sync::Arc;

use rand::seq::index::sample;
use rayon::prelude::*;

use super::{centered_square_mask, morph_blend, morph_splice, sample_identity, CaptureParams, ToyIdentity, ToyWorld};
use crate::backends::{similarity, Embedding, FaceRecognizer, ToyFrs};
use crate::config::{CorpusConfig, MorphMethod};
use crate::dmad::{calibrate_threshold, Threshold};
use crate::error::{Error, Result};
use crate::metrics::MapOutcome;
use crate::types::{DocumentPair, ImageTensor, RestorationScenario};
use crate::util::rng_for;

pub const MIN_IDENTITIES: usize = 10;
const MORPHS_PER_PAIRING: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "test" => Ok(Self::Test),
            other => Err(Error::Parse(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    Random,
    Lookalike,
}

impl Pairing {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Random => "random",
            Self::Lookalike => "lookalike",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "lookalike" => Ok(Self::Lookalike),
            other => Err(Error::Parse(format!("unknown pairing '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusIdentity {
    pub identity: ToyIdentity,
    pub split: Split,
    pub doc: ImageTensor,
    pub live: Vec<ImageTensor>,
}

/// A morph of subject `a` (kept in the outer region of splices) with
/// partner `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct MorphEntry {
    pub id: String,
    pub a: usize,
    pub c: usize,
    pub alpha: f64,
    pub method: MorphMethod,
    pub pairing: Pairing,
    pub split: Split,
    pub accepted: bool,
    pub image: ImageTensor,
    /// `verified[frs][attempt] = (matches a, matches c)` against live captures.
    pub verified: Vec<Vec<(bool, bool)>>,
}

/// An evaluation pair plus the capture of the non-target identity.
#[derive(Clone, Debug)]
pub struct EvalPair {
    pub pair: DocumentPair,
    pub nontarget: Option<ImageTensor>,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub identities: Vec<CorpusIdentity>,
    pub morphs: Vec<MorphEntry>,
    /// One per recogniser; the first belongs to the primary recogniser.
    pub thresholds: Vec<Threshold>,
}

/// Recognisers of a corpus: the world's own plus `n_frs - 1` independent
/// toy projections.
pub fn recognizers(world: &ToyWorld, n_frs: usize) -> Vec<Arc<dyn FaceRecognizer>> {
    let mut out = vec![world.backends.frs.clone()];
    for i in 1..n_frs {
        out.push(Arc::new(ToyFrs::new(&world.backends.config, i as u64)));
    }
    out
}

/// Document-versus-live calibration at `target_fmr`. Mated comparisons pair
/// each document with its own live captures; non-mated ones with every
/// other identity's captures.
pub fn calibrate_toy_threshold(
    identities: &[CorpusIdentity],
    frs: &dyn FaceRecognizer,
    target_fmr: f64,
) -> Result<Threshold> {
    let docs: Vec<Embedding> = identities.iter().map(|i| frs.embed(&i.doc)).collect::<Result<_>>()?;
    let lives: Vec<Vec<Embedding>> = identities
        .iter()
        .map(|i| i.live.iter().map(|l| frs.embed(l)).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let mut mated = Vec::new();
    let mut nonmated = Vec::new();
    for (i, d) in docs.iter().enumerate() {
        for (k, ls) in lives.iter().enumerate() {
            let target = if i == k { &mut mated } else { &mut nonmated };
            target.extend(ls.iter().map(|l| similarity(d, l)));
        }
    }
    calibrate_threshold(&mated, &nonmated, target_fmr, frs.name())
}

impl Corpus {
    pub fn tau(&self) -> f64 {
        self.thresholds[0].tau
    }

    pub fn morphs_in(&self, split: Split, accepted_only: bool) -> impl Iterator<Item = &MorphEntry> {
        self.morphs.iter().filter(move |m| m.split == split && (m.accepted || !accepted_only))
    }

    pub fn identities_in(&self, split: Split) -> impl Iterator<Item = &CorpusIdentity> {
        self.identities.iter().filter(move |i| i.split == split)
    }

    /// Evaluation pairs of one scenario over accepted morphs (or identities
    /// for bona fide), restricted to `methods` when given.
    pub fn eval_pairs(&self, scenario: RestorationScenario, split: Split, methods: Option<&[MorphMethod]>) -> Vec<EvalPair> {
        let second = |ident: &CorpusIdentity| ident.live[1 % ident.live.len()].clone();
        match scenario {
            RestorationScenario::BonaFide => self
                .identities_in(split)
                .map(|b| EvalPair {
                    pair: DocumentPair {
                        doc: b.doc.clone(),
                        reference: b.live[0].clone(),
                        gt: Some(b.doc.clone()),
                        scenario,
                        pair_id: format!("bf_{}", b.identity.id),
                        morph_method: None,
                    },
                    nontarget: None,
                })
                .collect(),
            _ => self
                .morphs_in(split, true)
                .filter(|m| methods.is_none_or(|ms| ms.contains(&m.method)))
                .map(|m| {
                    let (a, c) = (&self.identities[m.a], &self.identities[m.c]);
                    let (target, other) = if scenario == RestorationScenario::Accomplice { (a, c) } else { (c, a) };
                    EvalPair {
                        pair: DocumentPair {
                            doc: m.image.clone(),
                            reference: other.live[0].clone(),
                            gt: Some(target.doc.clone()),
                            scenario,
                            pair_id: format!("{}_{}", m.id, scenario.as_str()),
                            morph_method: Some(m.method.as_str().to_string()),
                        },
                        nontarget: Some(second(other)),
                    }
                })
                .collect(),
        }
    }

    /// Both-subject verification outcomes for the morph acceptance matrix.
    pub fn map_outcomes(&self, split: Option<Split>) -> Vec<MapOutcome> {
        self.morphs
            .iter()
            .filter(|m| split.is_none_or(|s| m.split == s))
            .map(|m| MapOutcome {
                morph_id: m.id.clone(),
                verified: m.verified.iter().map(|f| f.iter().map(|(a, c)| *a && *c).collect()).collect(),
            })
            .collect()
    }
}

fn render_identities(cfg: &CorpusConfig, world: &ToyWorld) -> Result<Vec<CorpusIdentity>> {
    let n = cfg.n_identities;
    let n_test = ((n as f64) * cfg.test_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng_for(cfg.seed, "split", 0));
    }
    let mut split = vec![Split::Train; n];
    for &i in &order[..n_test] {
        split[i] = Split::Test;
    }
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = rng_for(cfg.seed, "identity", i as u64);
            let identity = sample_identity(&mut rng, cfg.id_dim, format!("id{i:04}"));
            let doc = world.render(&identity, &CaptureParams::document(), &mut rng)?;
            let live = (0..cfg.live_per_identity)
                .map(|_| {
                    let p = CaptureParams::sample_live(cfg, &mut rng);
                    world.render(&identity, &p, &mut rng)
                })
                .collect::<Result<_>>()?;
            Ok(CorpusIdentity { identity, split: split[i], doc, live })
        })
        .collect()
}

/// Builds the full corpus: identities with document and live captures, a
/// calibrated threshold per recogniser, and for every subject three
/// random-partner and three look-alike morphs per method within its split.
/// Morphs that fail to verify against both contributors at the primary
/// threshold are kept but marked as not accepted.
pub fn build_corpus(cfg: &CorpusConfig, world: &ToyWorld) -> Result<Corpus> {
    cfg.validate()?;
    if cfg.n_identities < MIN_IDENTITIES {
        return Err(Error::InsufficientIdentities { need: MIN_IDENTITIES, got: cfg.n_identities });
    }
    if cfg.id_dim != world.id_dim() {
        return Err(Error::Config(format!("corpus id_dim {} vs world {}", cfg.id_dim, world.id_dim())));
    }
    let identities = render_identities(cfg, world)?;
    let frs = recognizers(world, cfg.n_frs);
    let thresholds =
        frs.iter().map(|f| calibrate_toy_threshold(&identities, f.as_ref(), cfg.target_fmr)).collect::<Result<Vec<_>>>()?;

    let docs: Vec<Embedding> = identities.iter().map(|i| world.backends.frs.embed(&i.doc)).collect::<Result<_>>()?;
    let tau = thresholds[0].tau;
    let [_, h, w] = world.backends.config.image_shape();
    let mask = centered_square_mask(h, w, cfg.splice_area);

    // (subject, partner, pairing) triples in a fixed order
    let mut plan = Vec::new();
    for (a, ident) in identities.iter().enumerate() {
        let peers: Vec<usize> = (0..identities.len()).filter(|&k| k != a && identities[k].split == ident.split).collect();
        if peers.is_empty() {
            return Err(Error::InsufficientIdentities { need: 2, got: 1 });
        }
        let mut rng = rng_for(cfg.seed, "pairing", a as u64);
        for k in sample(&mut rng, peers.len(), MORPHS_PER_PAIRING.min(peers.len())) {
            plan.push((a, peers[k], Pairing::Random));
        }
        // look-alikes: the peers whose score lies closest to the decision threshold
        let gap = |k: usize| (similarity(&docs[a], &docs[k]) - tau).abs();
        let mut near = peers.clone();
        near.sort_by(|&x, &y| gap(x).total_cmp(&gap(y)).then(x.cmp(&y)));
        near.truncate(cfg.lookalike_pool);
        for k in sample(&mut rng, near.len(), MORPHS_PER_PAIRING.min(near.len())) {
            plan.push((a, near[k], Pairing::Lookalike));
        }
    }

    let live_emb: Vec<Vec<Vec<Embedding>>> = frs
        .iter()
        .map(|f| {
            identities
                .iter()
                .map(|i| i.live.iter().map(|l| f.embed(l)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        for (n, &(a, c, pairing)) in plan.iter().enumerate() {
            jobs.push((method, n % (2 * MORPHS_PER_PAIRING), a, c, pairing));
        }
    }
    let morphs = jobs
        .into_par_iter()
        .map(|(method, slot, a, c, pairing)| {
            let (ia, ic) = (&identities[a], &identities[c]);
            let image = match method {
                MorphMethod::Blend => morph_blend(&ia.doc, &ic.doc, cfg.alpha)?,
                MorphMethod::Splice => morph_splice(&ia.doc, &ic.doc, cfg.alpha, &mask)?,
            };
            let mut verified = Vec::with_capacity(frs.len());
            for (f, recog) in frs.iter().enumerate() {
                let e = recog.embed(&image)?;
                let tau = thresholds[f].tau;
                verified.push(
                    (0..cfg.live_per_identity)
                        .map(|j| (similarity(&e, &live_emb[f][a][j]) >= tau, similarity(&e, &live_emb[f][c][j]) >= tau))
                        .collect::<Vec<_>>(),
                );
            }
            let accepted = verified[0][0].0 && verified[0][0].1;
            Ok(MorphEntry {
                id: format!("m_{}_{}_{}_{}{}", ia.identity.id, ic.identity.id, method.as_str(), pairing.as_str(), slot),
                a,
                c,
                alpha: cfg.alpha,
                method,
                pairing,
                split: ia.split,
                accepted,
                image,
                verified,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { config: cfg.clone(), identities, morphs, thresholds })
}

//! On-disk corpus layout: `manifest.json` plus 8-bit PNG images under
//! `images/`, referenced by relative path.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::corpus::{Corpus, CorpusIdentity, MorphEntry, Pairing, Split};
use super::ToyIdentity;
use crate::backends::{decode_png, encode_png};
use crate::config::{MorphMethod, RunConfig};
use crate::dmad::Threshold;
use crate::error::{Error, Result};
use crate::types::ImageTensor;
use crate::util::write_atomic;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
struct IdentityRecord {
    id: String,
    z: Vec<f64>,
    split: String,
}

#[derive(Serialize, Deserialize)]
struct BonaFideRecord {
    pair_id: String,
    identity: String,
    doc: String,
    live: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct MorphRecord {
    morph_id: String,
    image: String,
    contributor_a: String,
    contributor_c: String,
    alpha: f64,
    method: String,
    pairing: String,
    split: String,
    accepted: bool,
    /// `[frs][attempt] = [matches a, matches c]`
    verified: Vec<Vec<[bool; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct ThresholdRecord {
    frs: String,
    tau: f64,
    target_fmr: f64,
    mated_n: usize,
    nonmated_n: usize,
    achieved_tmr: f64,
    achieved_fmr: f64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: BTreeMap<String, String>,
    identities: Vec<IdentityRecord>,
    bonafide_entries: Vec<BonaFideRecord>,
    morph_entries: Vec<MorphRecord>,
    thresholds: Vec<ThresholdRecord>,
}

fn save_png(dir: &Path, rel: &str, img: &ImageTensor) -> Result<()> {
    write_atomic(&dir.join(rel), &encode_png(img)?)?;
    Ok(())
}

fn load_png(dir: &Path, rel: &str) -> Result<ImageTensor> {
    let bytes = fs::read(dir.join(rel))?;
    decode_png(&bytes)
}

/// Writes images and the manifest under `dir`.
pub fn write_corpus(corpus: &Corpus, config: &RunConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let mut identities = Vec::new();
    let mut bonafide_entries = Vec::new();
    for ci in &corpus.identities {
        let id = &ci.identity.id;
        let doc = format!("images/{id}_doc.png");
        save_png(dir, &doc, &ci.doc)?;
        let mut live = Vec::new();
        for (j, img) in ci.live.iter().enumerate() {
            let rel = format!("images/{id}_live{j}.png");
            save_png(dir, &rel, img)?;
            live.push(rel);
        }
        identities.push(IdentityRecord { id: id.clone(), z: ci.identity.z.clone(), split: ci.split.as_str().into() });
        bonafide_entries.push(BonaFideRecord { pair_id: format!("bf_{id}"), identity: id.clone(), doc, live });
    }
    let mut morph_entries = Vec::new();
    for m in &corpus.morphs {
        let image = format!("images/{}.png", m.id);
        save_png(dir, &image, &m.image)?;
        morph_entries.push(MorphRecord {
            morph_id: m.id.clone(),
            image,
            contributor_a: corpus.identities[m.a].identity.id.clone(),
            contributor_c: corpus.identities[m.c].identity.id.clone(),
            alpha: m.alpha,
            method: m.method.as_str().into(),
            pairing: m.pairing.as_str().into(),
            split: m.split.as_str().into(),
            accepted: m.accepted,
            verified: m.verified.iter().map(|f| f.iter().map(|&(a, c)| [a, c]).collect()).collect(),
        });
    }
    let thresholds = corpus
        .thresholds
        .iter()
        .map(|t| ThresholdRecord {
            frs: t.frs.clone(),
            tau: t.tau,
            target_fmr: t.target_fmr,
            mated_n: t.mated_n,
            nonmated_n: t.nonmated_n,
            achieved_tmr: t.achieved_tmr,
            achieved_fmr: t.achieved_fmr,
        })
        .collect();
    let manifest = Manifest { config: config.entries(), identities, bonafide_entries, morph_entries, thresholds };
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), text.as_bytes())?;
    Ok(())
}

/// Reads a corpus written by [`write_corpus`], with the configuration it
/// was generated under.
pub fn load_corpus(dir: &Path) -> Result<(RunConfig, Corpus)> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let mut config = RunConfig::toy();
    for (k, v) in &manifest.config {
        config.set(k, v)?;
    }
    config.validate()?;

    let index: BTreeMap<&str, usize> =
        manifest.identities.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let lookup = |id: &str| index.get(id).copied().ok_or_else(|| Error::Parse(format!("unknown identity '{id}'")));
    let mut by_identity: BTreeMap<&str, &BonaFideRecord> = BTreeMap::new();
    for b in &manifest.bonafide_entries {
        by_identity.insert(&b.identity, b);
    }
    let mut identities = Vec::with_capacity(manifest.identities.len());
    for r in &manifest.identities {
        let b = by_identity.get(r.id.as_str()).ok_or_else(|| Error::MissingLiveCapture(r.id.clone()))?;
        if b.live.is_empty() {
            return Err(Error::MissingLiveCapture(r.id.clone()));
        }
        identities.push(CorpusIdentity {
            identity: ToyIdentity { id: r.id.clone(), z: r.z.clone() },
            split: Split::parse(&r.split)?,
            doc: load_png(dir, &b.doc)?,
            live: b.live.iter().map(|p| load_png(dir, p)).collect::<Result<_>>()?,
        });
    }
    let mut morphs = Vec::with_capacity(manifest.morph_entries.len());
    for m in &manifest.morph_entries {
        morphs.push(MorphEntry {
            id: m.morph_id.clone(),
            a: lookup(&m.contributor_a)?,
            c: lookup(&m.contributor_c)?,
            alpha: m.alpha,
            method: MorphMethod::parse(&m.method)?,
            pairing: Pairing::parse(&m.pairing)?,
            split: Split::parse(&m.split)?,
            accepted: m.accepted,
            image: load_png(dir, &m.image)?,
            verified: m.verified.iter().map(|f| f.iter().map(|p| (p[0], p[1])).collect()).collect(),
        });
    }
    let thresholds = manifest
        .thresholds
        .iter()
        .map(|t| Threshold {
            tau: t.tau,
            frs: t.frs.clone(),
            target_fmr: t.target_fmr,
            mated_n: t.mated_n,
            nonmated_n: t.nonmated_n,
            achieved_tmr: t.achieved_tmr,
            achieved_fmr: t.achieved_fmr,
        })
        .collect::<Vec<_>>();
    if thresholds.is_empty() {
        return Err(Error::Parse("manifest has no thresholds".into()));
    }
    Ok((config.clone(), Corpus { config: config.corpus, identities, morphs, thresholds }))
}

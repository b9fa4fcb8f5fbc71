//! Alternating bona fide / morphed optimisation with a curriculum on the
//! morphed-pass reference.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::backends::{Backends, Discriminator};
use crate::checkpoint::Container;
use crate::config::{LossConfig, OptimizerKind, RunConfig, TrainConfig};
use crate::demorpher::DemorpherModel;
use crate::error::{Error, Result};
use crate::losses::{total_loss_tape, LossInputs, LossReport};
use crate::nn::ParamSet;
use crate::optim::{Adam, OptimState, Optimizer, Ranger};
use crate::tensor::Tensor;
use crate::toyworld::{Corpus, Split};
use crate::types::{DocumentPair, ImageTensor, PassType, RestorationScenario};
use crate::util::{fmt_f64, rng_for, write_atomic};

pub const LOG_HEADER: &str = "step,pass,l2,ms_ssim,lpips,id,inv_id,feat,adv,im,total,disc,curriculum_p";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// `p_max · min(1, step / cap)`.
pub fn curriculum_probability(step: usize, cfg: &TrainConfig) -> f64 {
    cfg.curriculum_p_max * (step as f64 / cfg.curriculum_cap_step as f64).min(1.0)
}

/// Even steps are bona fide passes, odd steps morphed passes.
pub fn next_pass(step: usize) -> PassType {
    if step.is_multiple_of(2) {
        PassType::BonaFidePass
    } else {
        PassType::MorphedPass
    }
}

/// A morph with the images its morphed pass draws from.
#[derive(Clone, Debug)]
pub struct MorphSample {
    pub id: String,
    pub image: ImageTensor,
    /// Document image of the contributor to restore.
    pub gt: ImageTensor,
    /// Document image of the contributor presenting at the gate.
    pub ref_doc: ImageTensor,
    pub ref_live: Vec<ImageTensor>,
}

#[derive(Clone, Debug)]
pub struct BonaFideSample {
    pub id: String,
    pub doc: ImageTensor,
    pub live: Vec<ImageTensor>,
}

/// With the curriculum probability of `step` a live capture, otherwise
/// the reference contributor's document image.
pub fn sample_reference<'a>(
    m: &'a MorphSample,
    step: usize,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<&'a ImageTensor> {
    if m.ref_live.is_empty() {
        return Err(Error::MissingLiveCapture(m.id.clone()));
    }
    let p = curriculum_probability(step, cfg);
    if rng.random::<f64>() < p {
        Ok(&m.ref_live[rng.random_range(0..m.ref_live.len())])
    } else {
        Ok(&m.ref_doc)
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainingSet {
    pub bona_fide: Vec<BonaFideSample>,
    pub morphs: Vec<MorphSample>,
}

impl TrainingSet {
    /// Training-split identities and accepted training-split morphs, with
    /// contributor `a` restored from contributor `c`'s reference.
    pub fn from_corpus(corpus: &Corpus) -> Result<Self> {
        let bona_fide = corpus
            .identities_in(Split::Train)
            .map(|ci| BonaFideSample { id: ci.identity.id.clone(), doc: ci.doc.clone(), live: ci.live.clone() })
            .collect();
        let morphs = corpus
            .morphs_in(Split::Train, true)
            .map(|m| {
                let (a, c) = (&corpus.identities[m.a], &corpus.identities[m.c]);
                MorphSample {
                    id: m.id.clone(),
                    image: m.image.clone(),
                    gt: a.doc.clone(),
                    ref_doc: c.doc.clone(),
                    ref_live: c.live.clone(),
                }
            })
            .collect();
        let set = Self { bona_fide, morphs };
        set.check()?;
        Ok(set)
    }

    pub fn check(&self) -> Result<()> {
        if self.bona_fide.is_empty() {
            return Err(Error::EmptyDataset("no bona fide training entries"));
        }
        if self.morphs.is_empty() {
            return Err(Error::EmptyDataset("no morph training entries"));
        }
        Ok(())
    }
}

/// The homogeneous batch of one step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub pass: PassType,
    pub pairs: Vec<DocumentPair>,
}

/// Draws the batch of step `step` from its own random stream.
pub fn sample_batch(set: &TrainingSet, step: usize, cfg: &TrainConfig) -> Result<Batch> {
    set.check()?;
    let mut rng = rng_for(cfg.seed, "step", step as u64);
    let pass = next_pass(step);
    let mut pairs = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        pairs.push(match pass {
            PassType::BonaFidePass => {
                let b = &set.bona_fide[rng.random_range(0..set.bona_fide.len())];
                if b.live.is_empty() {
                    return Err(Error::MissingLiveCapture(b.id.clone()));
                }
                DocumentPair {
                    doc: b.doc.clone(),
                    reference: b.live[rng.random_range(0..b.live.len())].clone(),
                    gt: Some(b.doc.clone()),
                    scenario: RestorationScenario::BonaFide,
                    pair_id: b.id.clone(),
                    morph_method: None,
                }
            }
            PassType::MorphedPass => {
                let m = &set.morphs[rng.random_range(0..set.morphs.len())];
                DocumentPair {
                    doc: m.image.clone(),
                    reference: sample_reference(m, step, cfg, &mut rng)?.clone(),
                    gt: Some(m.gt.clone()),
                    scenario: RestorationScenario::Accomplice,
                    pair_id: m.id.clone(),
                    morph_method: None,
                }
            }
        });
    }
    Ok(Batch { pass, pairs })
}

/// Everything a run mutates.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: DemorpherModel,
    pub disc: Discriminator,
    pub opt: Optimizer,
    pub disc_opt: Adam,
    /// Number of completed steps.
    pub step: usize,
}

fn all_values(model: &DemorpherModel) -> Vec<&Tensor> {
    model.param_sets().into_iter().flat_map(|ps| ps.values().iter()).collect()
}

fn all_values_mut(model: &mut DemorpherModel) -> Vec<&mut Tensor> {
    model.param_sets_mut().into_iter().flat_map(|ps| ps.values_mut().iter_mut()).collect()
}

const MODULES: [&str; 3] = ["fdm", "idm", "ffm"];

fn put_opt(c: &mut Container, prefix: &str, st: OptimState) {
    c.meta.insert(format!("{prefix}.counters"), st.counters.iter().map(u64::to_string).collect::<Vec<_>>().join(","));
    for (i, t) in st.tensors.into_iter().enumerate() {
        c.push(format!("{prefix}.{i:06}"), t);
    }
}

fn get_opt(c: &Container, prefix: &str) -> Result<OptimState> {
    let counters = c
        .meta(&format!("{prefix}.counters"))?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad counter '{s}'"))))
        .collect::<Result<_>>()?;
    let p = format!("{prefix}.");
    Ok(OptimState { counters, tensors: c.with_prefix(&p).cloned().collect() })
}

fn load_set(ps: &mut ParamSet, c: &Container, module: &str) -> Result<()> {
    let mut other = ps.clone();
    for (slot, name) in other.values_mut().iter_mut().zip(ps.names()) {
        *slot = find(c, &format!("{module}.param.{name}"))?;
    }
    for (slot, name) in other.buffers_mut().iter_mut().zip(ps.buffer_names()) {
        *slot = find(c, &format!("{module}.buffer.{name}"))?;
    }
    ps.load(&other)
}

fn find(c: &Container, name: &str) -> Result<Tensor> {
    c.tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t.clone())
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor '{name}'")))
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = DemorpherModel::new(&cfg.backend, &cfg.model)?;
        let disc = Discriminator::new(&cfg.backend);
        let values = all_values(&model);
        let opt = match cfg.train.optimizer {
            OptimizerKind::Ranger => Optimizer::Ranger(Ranger::new(&values, cfg.train.lr_modules)),
            OptimizerKind::Adam => {
                let shapes: Vec<Vec<usize>> = values.iter().map(|t| t.shape().to_vec()).collect();
                Optimizer::Adam(Adam::new(&shapes, cfg.train.lr_modules))
            }
        };
        let disc_shapes: Vec<Vec<usize>> = disc.params().iter().map(|t| t.shape().to_vec()).collect();
        let disc_opt = Adam::new(&disc_shapes, cfg.train.lr_disc);
        Ok(Self { model, disc, opt, disc_opt, step: 0 })
    }

    pub fn to_container(&self, cfg: &RunConfig) -> Container {
        let mut c = Container::default();
        c.meta.insert("step".into(), self.step.to_string());
        c.meta.insert("config_digest".into(), cfg.model_digest());
        c.meta.insert("config".into(), cfg.to_text());
        for (module, ps) in MODULES.iter().zip(self.model.param_sets()) {
            for (n, t) in ps.names().iter().zip(ps.values()) {
                c.push(format!("{module}.param.{n}"), t.clone());
            }
            for (n, t) in ps.buffer_names().iter().zip(ps.buffers()) {
                c.push(format!("{module}.buffer.{n}"), t.clone());
            }
        }
        for (i, t) in self.disc.params().iter().enumerate() {
            c.push(format!("disc.{i}"), t.clone());
        }
        put_opt(&mut c, "opt", self.opt.export());
        put_opt(&mut c, "disc_opt", self.disc_opt.export());
        c
    }

    /// Restores a run; the checkpoint must come from a configuration with
    /// the same model digest.
    pub fn from_container(cfg: &RunConfig, c: &Container) -> Result<Self> {
        let expected = c.meta("config_digest")?.to_string();
        let found = cfg.model_digest();
        if expected != found {
            return Err(Error::DigestMismatch { expected, found });
        }
        let mut s = Self::new(cfg)?;
        for (module, ps) in MODULES.iter().zip(s.model.param_sets_mut()) {
            load_set(ps, c, module)?;
        }
        for (i, slot) in s.disc.params_mut().iter_mut().enumerate() {
            let t = find(c, &format!("disc.{i}"))?;
            if t.shape() != slot.shape() {
                return Err(Error::StateMismatch(format!("discriminator tensor {i}")));
            }
            *slot = t;
        }
        s.opt.import(get_opt(c, "opt")?)?;
        s.disc_opt.import(get_opt(c, "disc_opt")?)?;
        s.step = c.meta("step")?.parse().map_err(|_| Error::Checkpoint("bad step".into()))?;
        Ok(s)
    }
}

/// Reads the configuration and model stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(RunConfig, DemorpherModel)> {
    let c = Container::load(path)?;
    let cfg = RunConfig::parse(c.meta("config")?)?;
    let state = TrainState::from_container(&cfg, &c)?;
    Ok((cfg, state.model))
}

fn stack_images<'a>(images: impl Iterator<Item = &'a ImageTensor>) -> Tensor {
    let ts: Vec<&Tensor> = images.map(|i| i.tensor()).collect();
    Tensor::stack(&ts)
}

fn stack_features<'a>(backends: &Backends, images: impl Iterator<Item = &'a ImageTensor>) -> Result<Tensor> {
    let fs = images.map(|i| Ok(backends.encoder.encode(i)?.1.into_tensor())).collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&fs.iter().collect::<Vec<_>>()))
}

/// One module update from the pass objective, then one discriminator
/// update on the same batch with the outputs detached.
pub fn train_step(state: &mut TrainState, backends: &Backends, batch: &Batch, loss_cfg: &LossConfig) -> Result<LossReport> {
    if batch.pairs.is_empty() {
        return Err(Error::EmptyDataset("empty batch"));
    }
    let mut gts = Vec::with_capacity(batch.pairs.len());
    for p in &batch.pairs {
        gts.push(p.gt.as_ref().ok_or_else(|| Error::MissingGroundTruth(p.pair_id.clone()))?);
    }
    let weights = loss_cfg.weights(batch.pass);

    let mut tape = Tape::new();
    let vars = state.model.register(&mut tape, true);
    let f_doc = tape.constant(stack_features(backends, batch.pairs.iter().map(|p| &p.doc))?);
    let f_ref = tape.constant(stack_features(backends, batch.pairs.iter().map(|p| &p.reference))?);
    let i_doc = tape.constant(stack_images(batch.pairs.iter().map(|p| &p.doc)));
    let i_ref = tape.constant(stack_images(batch.pairs.iter().map(|p| &p.reference)));
    let gt = tape.constant(stack_images(gts.iter().copied()));
    let f_gt = tape.constant(stack_features(backends, gts.iter().copied())?);
    let (fw, stats) = state.model.forward_tape(&mut tape, &vars, backends, f_doc, f_ref, i_doc, i_ref, true)?;
    let inputs = LossInputs { out: fw.image, f_out: fw.f_out, gt, reference: i_ref, f_gt };
    let (total, mut report) = total_loss_tape(
        &mut tape,
        &inputs,
        weights,
        loss_cfg,
        backends.frs.as_ref(),
        backends.perceptual.as_ref(),
        &state.disc,
    )?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite("training objective"));
    }
    let grads = tape.backward(total);
    let g: Vec<Tensor> = vars.fdm.iter().chain(&vars.idm).chain(&vars.ffm).map(|v| grads.get(*v)).collect();
    let fake = tape.value(fw.image).unstack();
    drop(grads);
    drop(tape);

    state.opt.step(&mut all_values_mut(&mut state.model), &g)?;
    state.model.apply_stats(&stats);

    let real: Vec<&Tensor> = gts.iter().map(|i| i.tensor()).collect();
    let fake: Vec<&Tensor> = fake.iter().collect();
    let (dl, dg) = state.disc.loss_and_grads(&real, &fake, weights.gamma_r1);
    let mut dp: Vec<&mut Tensor> = state.disc.params_mut().iter_mut().collect();
    state.disc_opt.step(&mut dp, &dg)?;
    report.disc = dl.total;
    Ok(report)
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    /// One-based index of the completed step.
    pub step: usize,
    pub pass: PassType,
    pub report: LossReport,
    pub curriculum_p: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        let r = &self.report;
        let vals = [r.l2, r.ms_ssim, r.lpips, r.id, r.inv_id, r.feat, r.adv, r.im, r.total, r.disc, self.curriculum_p];
        let mut s = format!("{},{}", self.step, self.pass.as_str());
        for v in vals {
            s.push(',');
            s.push_str(&fmt_f64(v));
        }
        s
    }
}

/// Runs steps until `state.step == until`, calling `on_step` after each.
pub fn train(
    state: &mut TrainState,
    set: &TrainingSet,
    cfg: &RunConfig,
    backends: &Backends,
    until: usize,
    mut on_step: impl FnMut(&TrainState, &LogRow) -> Result<()>,
) -> Result<()> {
    set.check()?;
    while state.step < until {
        let k = state.step;
        let batch = sample_batch(set, k, &cfg.train)?;
        let report = train_step(state, backends, &batch, &cfg.loss)?;
        state.step += 1;
        let row = LogRow { step: k + 1, pass: batch.pass, report, curriculum_p: curriculum_probability(k, &cfg.train) };
        on_step(state, &row)?;
    }
    Ok(())
}

pub fn checkpoint_path(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join(format!("step_{step:06}.sfdm"))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join(CHECKPOINT_DIR).join("final.sfdm")
}

/// Full run writing `train_log.csv`, periodic checkpoints and `final.sfdm`
/// under `out_dir`. On resume the log keeps the rows up to the checkpoint.
pub fn run_training(
    cfg: &RunConfig,
    backends: &Backends,
    set: &TrainingSet,
    out_dir: &Path,
    resume: Option<&Path>,
) -> Result<TrainState> {
    fs::create_dir_all(out_dir.join(CHECKPOINT_DIR))?;
    let log_path = out_dir.join(LOG_FILE);
    let mut state = match resume {
        Some(p) => TrainState::from_container(cfg, &Container::load(p)?)?,
        None => TrainState::new(cfg)?,
    };
    let mut log = String::from(LOG_HEADER);
    log.push('\n');
    if state.step > 0 {
        let old = fs::read_to_string(&log_path).unwrap_or_default();
        for line in old.lines().skip(1) {
            let step: usize = line.split(',').next().and_then(|s| s.parse().ok()).unwrap_or(usize::MAX);
            if step <= state.step {
                log.push_str(line);
                log.push('\n');
            }
        }
    }
    let mut file = fs::File::create(&log_path)?;
    file.write_all(log.as_bytes())?;
    train(&mut state, set, cfg, backends, cfg.train.total_steps, |st, row| {
        writeln!(file, "{}", row.to_csv())?;
        if st.step % cfg.train.checkpoint_every == 0 {
            st.to_container(cfg).save(&checkpoint_path(out_dir, st.step))?;
        }
        Ok(())
    })?;
    file.flush()?;
    write_atomic(&final_checkpoint_path(out_dir), &state.to_container(cfg).to_bytes()?)?;
    Ok(state)
}

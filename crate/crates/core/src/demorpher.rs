//! The trainable demorphing network: a feature-space branch (FDM), a pixel
//! branch (IDM) and a fusion stack (FFM) feeding the frozen generator at the
//! injection layer.

use crate::autodiff::{BatchStats, Tape, Var};
use crate::backends::Backends;
use crate::config::{BackendConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{update_running_stats, BatchNorm, Conv, Ctx, Linear, PRelu, ParamSet, ResBlock};
use crate::tensor::Tensor;
use crate::types::{DocumentPair, FeatureMap, ImageTensor, LatentCode};
use crate::util::rng_for;

/// `(in_c, out_c, stride)` per residual block.
type BlockPlan = Vec<(usize, usize, usize)>;

fn schedule_plan(schedule: &[usize], c: usize) -> BlockPlan {
    schedule.windows(2).map(|w| (w[0] * c, w[1] * c, 1)).collect()
}

fn down_steps(backend: &BackendConfig) -> usize {
    (backend.image_size / backend.feat_h).trailing_zeros() as usize
}

/// Shapes of every interface of the network, computed without building it.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeReport {
    pub fdm_in: [usize; 3],
    pub fdm_out: [usize; 3],
    pub idm_in: [usize; 3],
    pub idm_features: [usize; 3],
    pub w_out: [usize; 2],
    pub ffm_in: [usize; 3],
    pub ffm_out: [usize; 3],
    pub fdm_blocks: usize,
    pub ffm_blocks: usize,
}

/// Residual stack over concatenated feature maps, used by FDM and FFM.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub params: ParamSet,
    blocks: Vec<ResBlock>,
    in_c: usize,
}

impl FeatureStack {
    fn new(name: &str, plan: &BlockPlan, seed: u64) -> Self {
        let mut params = ParamSet::default();
        let mut rng = rng_for(seed, name, 0);
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &(a, b, s))| ResBlock::new(&mut params, &mut rng, &format!("{name}.block{i}"), a, b, s))
            .collect();
        Self { params, blocks, in_c: plan[0].0 }
    }

    fn forward(&self, cx: &mut Ctx, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (cx.tape.shape(a).to_vec(), cx.tape.shape(b).to_vec());
        if sa != sb || sa.len() != 4 || sa[1] * 2 != self.in_c {
            return Err(Error::ShapeMismatch(format!("feature inputs {sa:?} and {sb:?}, expected {} channels total", self.in_c)));
        }
        let mut x = cx.tape.concat1(a, b);
        for block in &self.blocks {
            x = block.forward(cx, x);
        }
        Ok(x)
    }
}

/// Pixel-domain branch over the six-channel `doc ‖ ref` stack.
#[derive(Clone, Debug)]
pub struct Idm {
    pub params: ParamSet,
    stem: Conv,
    stem_bn: BatchNorm,
    stem_act: PRelu,
    down: Vec<ResBlock>,
    lateral: Conv,
    style: Vec<ResBlock>,
    head: Linear,
    latent: [usize; 2],
}

impl Idm {
    fn new(backend: &BackendConfig, model: &ModelConfig) -> Self {
        let mut params = ParamSet::default();
        let mut rng = rng_for(model.seed, "idm", 0);
        let w = model.idm_width;
        let ps = &mut params;
        let stem = Conv::new(ps, &mut rng, "idm.stem", 6, w, 3, 1, false);
        let stem_bn = BatchNorm::new(ps, "idm.stem_bn", w, 1.0);
        let stem_act = PRelu::new(ps, "idm.stem_prelu", w);
        let down = (0..down_steps(backend))
            .map(|i| ResBlock::new(ps, &mut rng, &format!("idm.down{i}"), w, w, 2))
            .collect();
        let lateral = Conv::new(ps, &mut rng, "idm.lateral", w, backend.feat_channels, 1, 1, true);
        let style = (0..model.idm_style_blocks)
            .map(|i| ResBlock::new(ps, &mut rng, &format!("idm.style{i}"), w, w, 2))
            .collect();
        let latent = backend.latent_shape();
        let head = Linear::new(ps, &mut rng, "idm.head", w, latent[0] * latent[1], 1e-3);
        Self { params, stem, stem_bn, stem_act, down, lateral, style, head, latent }
    }

    /// Returns `(w_out[N, L, D], F_IDM[N, C, h, w])`.
    fn forward(&self, cx: &mut Ctx, doc: Var, reference: Var) -> Result<(Var, Var)> {
        let (sa, sb) = (cx.tape.shape(doc).to_vec(), cx.tape.shape(reference).to_vec());
        if sa != sb || sa.len() != 4 || sa[1] != 3 {
            return Err(Error::ShapeMismatch(format!("pixel inputs {sa:?} and {sb:?}")));
        }
        let n = sa[0];
        let x = cx.tape.concat1(doc, reference);
        let x = self.stem.forward(cx, x);
        let x = self.stem_bn.forward(cx, x);
        let mut x = self.stem_act.forward(cx, x);
        for block in &self.down {
            x = block.forward(cx, x);
        }
        let features = self.lateral.forward(cx, x);
        for block in &self.style {
            x = block.forward(cx, x);
        }
        let pooled = cx.tape.global_avg_pool(x);
        let w = self.head.forward(cx, pooled);
        let w = cx.tape.reshape(w, &[n, self.latent[0], self.latent[1]]);
        Ok((w, features))
    }
}

/// Vars of one recorded forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub f_fdm: Var,
    pub f_idm: Var,
    pub f_out: Var,
    pub w_out: Var,
    pub image: Var,
}

/// Parameter vars of the three modules on one tape.
pub struct ModelVars {
    pub fdm: Vec<Var>,
    pub idm: Vec<Var>,
    pub ffm: Vec<Var>,
}

/// Batch statistics gathered by a training-mode forward, per module.
#[derive(Default)]
pub struct ModelStats {
    fdm: Vec<(usize, usize, BatchStats)>,
    idm: Vec<(usize, usize, BatchStats)>,
    ffm: Vec<(usize, usize, BatchStats)>,
}

#[derive(Clone, Debug)]
pub struct DemorpherModel {
    pub config: BackendConfig,
    pub model_config: ModelConfig,
    pub fdm: FeatureStack,
    pub idm: Idm,
    pub ffm: FeatureStack,
}

/// Output of [`demorph`].
#[derive(Clone, Debug)]
pub struct DemorphOutput {
    pub image: ImageTensor,
    pub features: FeatureMap,
    pub w_out: LatentCode,
}

impl DemorpherModel {
    pub fn new(config: &BackendConfig, model: &ModelConfig) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let c = config.feat_channels;
        Ok(Self {
            config: config.clone(),
            model_config: model.clone(),
            fdm: FeatureStack::new("fdm", &schedule_plan(&model.fdm_schedule, c), model.seed),
            idm: Idm::new(config, model),
            ffm: FeatureStack::new("ffm", &schedule_plan(&model.ffm_schedule, c), model.seed),
        })
    }

    /// Interface shapes for a configuration, without allocating parameters.
    pub fn shapes(config: &BackendConfig, model: &ModelConfig) -> Result<ShapeReport> {
        config.validate()?;
        model.validate()?;
        let [c, h, w] = config.feat_shape();
        let fdm = schedule_plan(&model.fdm_schedule, c);
        let ffm = schedule_plan(&model.ffm_schedule, c);
        let mut side = config.image_size;
        for _ in 0..down_steps(config) {
            side = (side + 2 - 3) / 2 + 1;
        }
        Ok(ShapeReport {
            fdm_in: [fdm[0].0, h, w],
            fdm_out: [fdm.last().unwrap().1, h, w],
            idm_in: [6, config.image_size, config.image_size],
            idm_features: [c, side, side],
            w_out: config.latent_shape(),
            ffm_in: [ffm[0].0, h, w],
            ffm_out: [ffm.last().unwrap().1, h, w],
            fdm_blocks: fdm.len(),
            ffm_blocks: ffm.len(),
        })
    }

    pub fn param_sets(&self) -> [&ParamSet; 3] {
        [&self.fdm.params, &self.idm.params, &self.ffm.params]
    }

    pub fn param_sets_mut(&mut self) -> [&mut ParamSet; 3] {
        [&mut self.fdm.params, &mut self.idm.params, &mut self.ffm.params]
    }

    pub fn digest(&self) -> String {
        crate::util::sha256_hex(self.param_sets().map(ParamSet::digest).join(":").as_bytes())
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        ModelVars {
            fdm: self.fdm.params.register(tape, trainable),
            idm: self.idm.params.register(tape, trainable),
            ffm: self.ffm.params.register(tape, trainable),
        }
    }

    /// FDM alone: `[N,C,h,w] x2 -> [N,C,h,w]`.
    pub fn fdm_forward(&self, tape: &mut Tape, vars: &[Var], f_doc: Var, f_ref: Var, train: bool) -> Result<Var> {
        let mut cx = Ctx { tape, vars, params: &self.fdm.params, train, stats: vec![] };
        self.fdm.forward(&mut cx, f_doc, f_ref)
    }

    /// FFM alone: `[N,C,h,w] x2 -> [N,C,h,w]`.
    pub fn ffm_forward(&self, tape: &mut Tape, vars: &[Var], f_fdm: Var, f_idm: Var, train: bool) -> Result<Var> {
        let mut cx = Ctx { tape, vars, params: &self.ffm.params, train, stats: vec![] };
        self.ffm.forward(&mut cx, f_fdm, f_idm)
    }

    /// IDM alone: images `[N,3,H,W] x2 -> (w_out[N,L,D], F_IDM[N,C,h,w])`.
    pub fn idm_forward(&self, tape: &mut Tape, vars: &[Var], doc: Var, reference: Var, train: bool) -> Result<(Var, Var)> {
        let mut cx = Ctx { tape, vars, params: &self.idm.params, train, stats: vec![] };
        self.idm.forward(&mut cx, doc, reference)
    }

    /// Full recorded forward from encoder features and pixels to `I_out`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        backends: &Backends,
        f_doc: Var,
        f_ref: Var,
        i_doc: Var,
        i_ref: Var,
        train: bool,
    ) -> Result<(ForwardVars, ModelStats)> {
        let mut stats = ModelStats::default();
        let f_fdm = {
            let mut cx = Ctx { tape: &mut *tape, vars: &vars.fdm, params: &self.fdm.params, train, stats: vec![] };
            let v = self.fdm.forward(&mut cx, f_doc, f_ref)?;
            stats.fdm = cx.stats;
            v
        };
        let (w_out, f_idm) = {
            let mut cx = Ctx { tape: &mut *tape, vars: &vars.idm, params: &self.idm.params, train, stats: vec![] };
            let v = self.idm.forward(&mut cx, i_doc, i_ref)?;
            stats.idm = cx.stats;
            v
        };
        if tape.shape(f_idm) != tape.shape(f_fdm) {
            return Err(Error::ShapeMismatch(format!(
                "IDM features {:?} vs FDM features {:?}",
                tape.shape(f_idm),
                tape.shape(f_fdm)
            )));
        }
        let f_out = {
            let mut cx = Ctx { tape: &mut *tape, vars: &vars.ffm, params: &self.ffm.params, train, stats: vec![] };
            let v = self.ffm.forward(&mut cx, f_fdm, f_idm)?;
            stats.ffm = cx.stats;
            v
        };
        let n = tape.shape(w_out)[0];
        let [l, d] = self.config.latent_shape();
        let k = self.config.injection_layer_k;
        let flat = tape.reshape(w_out, &[n, l * d]);
        let tail = tape.slice1(flat, k * d, l * d);
        let tail = tape.reshape(tail, &[n, l - k, d]);
        let image = backends.generator.synthesize_tape(tape, f_out, tail)?;
        Ok((ForwardVars { f_fdm, f_idm, f_out, w_out, image }, stats))
    }

    pub fn apply_stats(&mut self, stats: &ModelStats) {
        update_running_stats(&mut self.fdm.params, &stats.fdm);
        update_running_stats(&mut self.idm.params, &stats.idm);
        update_running_stats(&mut self.ffm.params, &stats.ffm);
    }
}

fn batch(images: &[&Tensor]) -> Tensor {
    Tensor::stack(images)
}

/// Inference on one pair: encode, run the three modules with running
/// statistics, and synthesise from the injection layer.
pub fn demorph(pair: &DocumentPair, model: &DemorpherModel, backends: &Backends) -> Result<DemorphOutput> {
    backends.check_image(&pair.doc)?;
    backends.check_image(&pair.reference)?;
    let (_, f_doc) = backends.encoder.encode(&pair.doc)?;
    let (_, f_ref) = backends.encoder.encode(&pair.reference)?;
    let mut tape = Tape::new();
    let vars = model.register(&mut tape, false);
    let fd = tape.constant(batch(&[f_doc.tensor()]));
    let fr = tape.constant(batch(&[f_ref.tensor()]));
    let id = tape.constant(batch(&[pair.doc.tensor()]));
    let ir = tape.constant(batch(&[pair.reference.tensor()]));
    let (out, _) = model.forward_tape(&mut tape, &vars, backends, fd, fr, id, ir, false)?;
    let unit = |v: Var| tape.value(v).unstack().remove(0);
    Ok(DemorphOutput {
        image: ImageTensor::from_tensor(unit(out.image))?,
        features: FeatureMap::from_tensor(unit(out.f_out))?,
        w_out: LatentCode::from_tensor(unit(out.w_out))?,
    })
}

//! Pre-training and teacher-student adaptation loops.

pub mod config;
mod history;

use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{preprocess_one, sample_quad, ImageSample, InputStrategy, QuadBatch};
use crate::error::{IdaError, Result};
use crate::idcl::{
    batch_stats, confidence_weight, contrastive_loss, downsample_labels, init_prototypes, update_prototypes,
    PrototypeBank,
};
use crate::losses::{masked_consistency, masked_cross_entropy, masked_dice, total_loss, LossReport};
use crate::metrics::{self, EvalReport};
use crate::mrat::{self, Direction};
use crate::optim::AdamState;
use crate::plane::{LabelPlane, Plane};
use crate::scalar::Scalar;
use crate::segnet::ops::Tensor;
use crate::segnet::{ema_update, ForwardOutput, ModelState, Trace, WNet};

pub use config::{ClVariant, Dtype, PretrainStrategy, RunConfig, ScheduleKind};
pub use history::{history_csv, write_history_csv, EvalSummary, HistoryRow, HISTORY_HEADER};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Adapt,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
        }
    }

    fn rng_stream(self) -> u64 {
        match self {
            Phase::Pretrain => 1,
            Phase::Adapt => 2,
        }
    }
}

/// ChaCha generator position: seed, stream and word offset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; JSON numbers cannot carry 128 bits.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| IdaError::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Everything needed to resume a run bit for bit.
///
/// The `teacher` slot holds the run's output model: during pre-training the
/// best model seen so far on source validation data, during adaptation the
/// EMA teacher.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub phase: Phase,
    pub config: RunConfig,
    pub student: ModelState<T>,
    pub teacher: ModelState<T>,
    pub bank: Option<PrototypeBank<T>>,
    pub adam: AdamState<T>,
    pub rng: ChaCha8Rng,
    pub iteration: u64,
    pub best_score: Option<f64>,
    pub degenerate_steps: u64,
    pub history: Vec<HistoryRow>,
}

impl<T> Checkpoint<T> {
    /// The model a finished run hands on for evaluation or adaptation.
    pub fn output_model(&self) -> &ModelState<T> {
        &self.teacher
    }
}

/// Per-step result of [`Trainer::adapt_step`] / [`Trainer::pretrain_step`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub loss: LossReport,
    pub w_t2s: f64,
    pub w_s2t: f64,
    /// Fraction of teacher pseudo-label pixels that are foreground.
    pub pseudo_fg: f64,
}

/// Loss, gradient and post-update prototypes of one adaptation batch.
#[derive(Debug, Clone)]
pub struct AdaptObjective<T> {
    pub report: StepReport,
    pub grads: ModelState<T>,
    pub bank: Option<PrototypeBank<T>>,
}

/// Data a loop reads. Evaluation sets are never trained on.
#[derive(Debug, Clone, Copy)]
pub struct Datasets<'a, T> {
    pub source: &'a [ImageSample<T>],
    pub source_val: &'a [ImageSample<T>],
    pub target: &'a [ImageSample<T>],
    pub target_eval: &'a [ImageSample<T>],
}

pub struct Trainer<T> {
    pub net: WNet,
    pub state: Checkpoint<T>,
}

/// Student forward with everything the loss and backward passes need.
struct Forwarded<T> {
    out: ForwardOutput<T>,
    trace: Trace<T>,
    dprobs: Tensor<T>,
    dfeat: Tensor<T>,
}

impl<T: Scalar> Forwarded<T> {
    fn new(net: &WNet, state: &ModelState<T>, image: &Plane<T>) -> Result<Self> {
        let (out, trace) = net.forward_train(state, image)?;
        let dprobs = Tensor::zeros(out.probs.c, out.probs.h, out.probs.w);
        let dfeat = Tensor::zeros(out.features.c, out.features.h, out.features.w);
        Ok(Forwarded {
            out,
            trace,
            dprobs,
            dfeat,
        })
    }
}

fn axpy<T: Scalar>(dst: &mut Tensor<T>, k: f64, src: &Tensor<T>) {
    let k = T::from_f64_lossy(k);
    for (d, &s) in dst.data.iter_mut().zip(&src.data) {
        *d += k * s;
    }
}

fn full_region(w: usize, h: usize) -> Plane<u8> {
    Plane::filled(w, h, 1u8)
}

fn foreground_fraction(labels: &[&LabelPlane]) -> f64 {
    let total: usize = labels.iter().map(|l| l.len()).sum();
    let fg: usize = labels.iter().map(|l| l.count_class(1)).sum();
    if total == 0 {
        0.0
    } else {
        fg as f64 / total as f64
    }
}

impl<T: Scalar> Trainer<T> {
    fn rng_for(cfg: &RunConfig, phase: Phase) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(phase.rng_stream());
        rng
    }

    /// Fresh randomly initialized model ready for pre-training.
    pub fn new_pretrain(cfg: RunConfig, source: &[ImageSample<T>]) -> Result<Self> {
        cfg.validate()?;
        let net = WNet::new(cfg.network())?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let student: ModelState<T> = net.init(&mut init_rng);
        let bank = if cfg.pretrain_strategy.uses_vcl() {
            Some(init_prototypes(&net, &student, source)?)
        } else {
            None
        };
        Ok(Trainer {
            state: Checkpoint {
                phase: Phase::Pretrain,
                rng: Self::rng_for(&cfg, Phase::Pretrain),
                teacher: student.clone(),
                adam: AdamState::new(&student),
                student,
                bank,
                config: cfg,
                iteration: 0,
                best_score: None,
                degenerate_steps: 0,
                history: Vec::new(),
            },
            net,
        })
    }

    /// Student and teacher both start from `pretrained`; prototypes are the
    /// source class means of its features.
    pub fn new_adapt(cfg: RunConfig, pretrained: &ModelState<T>, source: &[ImageSample<T>]) -> Result<Self> {
        cfg.validate()?;
        let net = WNet::new(cfg.network())?;
        net.check_state(pretrained)?;
        let mut student = pretrained.clone();
        student.iteration = 0;
        let bank = if cfg.idcl {
            Some(init_prototypes(&net, &student, source)?)
        } else {
            None
        };
        Ok(Trainer {
            state: Checkpoint {
                phase: Phase::Adapt,
                rng: Self::rng_for(&cfg, Phase::Adapt),
                teacher: student.clone(),
                adam: AdamState::new(&student),
                student,
                bank,
                config: cfg,
                iteration: 0,
                best_score: None,
                degenerate_steps: 0,
                history: Vec::new(),
            },
            net,
        })
    }

    /// Resumes from `state`. If the adaptation budget was raised past a run
    /// that had already finished, the end-of-run evaluation that is off the
    /// `eval_every` cadence is dropped from the history, so the continued
    /// run matches one that was given the larger budget from the start.
    pub fn from_checkpoint(state: Checkpoint<T>) -> Result<Self> {
        state.config.validate()?;
        let net = WNet::new(state.config.network())?;
        net.check_state(&state.student)?;
        net.check_state(&state.teacher)?;
        let every = state.config.eval_every;
        let mut t = Trainer { net, state };
        if t.state.phase == Phase::Adapt && !t.is_finished() {
            if let Some(last) = t.state.history.last_mut() {
                if every == 0 || last.iteration % every != 0 {
                    last.eval = None;
                }
            }
        }
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.state.config
    }

    fn total_steps(&self) -> u64 {
        match self.state.phase {
            Phase::Pretrain => self.state.config.pretrain_iterations,
            Phase::Adapt => {
                if self.state.config.self_training {
                    self.state.config.iterations
                } else {
                    0
                }
            }
        }
    }

    pub fn is_finished(&self) -> bool {
        self.state.iteration >= self.total_steps()
    }

    fn lr(&self) -> f64 {
        let mut opt = self.state.config.optimizer();
        if self.state.phase == Phase::Pretrain {
            opt.lr = self.state.config.pretrain_lr.unwrap_or(opt.lr);
        }
        opt.lr_at(self.state.iteration, self.total_steps())
    }

    fn apply_gradients(&mut self, grads: &ModelState<T>, lr: f64) -> Result<()> {
        let opt = self.state.config.optimizer();
        self.state.adam.step(&opt, lr, &mut self.state.student, grads)?;
        self.state.student.iteration += 1;
        if !self.state.student.all_finite() {
            return Err(IdaError::Numeric("parameters became non-finite".into()));
        }
        Ok(())
    }

    /// Supervised cross-entropy + Dice over `region`; adds `scale` times the
    /// gradient to `f.dprobs`. Returns (ce, dice).
    fn supervise(f: &mut Forwarded<T>, label: &LabelPlane, region: &Plane<u8>, scale: f64) -> Result<(f64, f64)> {
        let ce = masked_cross_entropy(&f.out.probs, label, region)?;
        let dc = masked_dice(&f.out.probs, label, region)?;
        axpy(&mut f.dprobs, scale, &ce.grad);
        axpy(&mut f.dprobs, scale, &dc.grad);
        Ok((ce.value.as_f64(), dc.value.as_f64()))
    }

    /// Contrastive term for one image; adds `scale` times the feature
    /// gradient. Returns the loss.
    fn contrast(&self, bank: &PrototypeBank<T>, f: &mut Forwarded<T>, label: &LabelPlane, scale: f64) -> Result<f64> {
        let (tw, th) = self.net.config().tap_size();
        let ds = downsample_labels(label, tw, th);
        let c = contrastive_loss(&f.out.features, &ds, bank, &self.state.config.contrast_config())?;
        axpy(&mut f.dfeat, scale, &c.grad);
        Ok(c.loss.as_f64())
    }

    fn backward_all(&self, student: &ModelState<T>, fs: &[Forwarded<T>], grads: &mut ModelState<T>) {
        for f in fs {
            self.net.backward(student, &f.trace, &f.dprobs, Some(&f.dfeat), grads);
        }
    }

    fn draw_source_pair(&mut self, source: &[ImageSample<T>]) -> Result<(ImageSample<T>, ImageSample<T>)> {
        if source.is_empty() {
            return Err(IdaError::InvalidArgument("empty source training set".into()));
        }
        let cfg = self.state.config.preprocess();
        let (r_whole, p_whole) = match self.state.config.input_strategy {
            InputStrategy::Both => (true, false),
            InputStrategy::Whole => (true, true),
            InputStrategy::Patch => (false, false),
        };
        let rng = &mut self.state.rng;
        let i = rng.gen_range(0..source.len());
        let j = rng.gen_range(0..source.len());
        for k in [i, j] {
            if source[k].label.is_none() {
                return Err(IdaError::InvalidArgument(format!("source sample {} has no label", source[k].id)));
            }
        }
        let sr = preprocess_one(&source[i], r_whole, &cfg, rng)?;
        let sp = preprocess_one(&source[j], p_whole, &cfg, rng)?;
        Ok((sr, sp))
    }

    /// One supervised source step; self-cut and prototype contrast per the
    /// configured strategy.
    pub fn pretrain_step(&mut self, source: &[ImageSample<T>]) -> Result<StepReport> {
        let cfg = self.state.config.clone();
        let strategy = cfg.pretrain_strategy;
        let mut images: Vec<(Plane<T>, LabelPlane)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.half_batch() {
            let (sr, sp) = self.draw_source_pair(source)?;
            let (y_sr, y_sp) = (sr.label.clone().unwrap(), sp.label.clone().unwrap());
            let second = if strategy.uses_self_cut() {
                let (img, lab, _) = mrat::self_cut(sr.plane(), &y_sr, sp.plane(), &y_sp, cfg.m, &mut self.state.rng)?;
                (img, lab)
            } else {
                (sp.plane().clone(), y_sp)
            };
            images.push((sr.plane().clone(), y_sr));
            images.push(second);
        }
        let n = images.len() as f64;
        let mut fs = images
            .iter()
            .map(|(img, _)| Forwarded::new(&self.net, &self.state.student, img))
            .collect::<Result<Vec<_>>>()?;
        let (w, h) = (cfg.train_width, cfg.train_height);
        let region = full_region(w, h);
        let (mut cls, mut dice, mut vcl) = (0.0, 0.0, 0.0);
        for (f, (_, lab)) in fs.iter_mut().zip(&images) {
            let (c, d) = Self::supervise(f, lab, &region, 1.0 / n)?;
            cls += c / n;
            dice += d / n;
        }
        let mut weight = 0.0;
        if strategy.uses_vcl() {
            let (tw, th) = self.net.config().tap_size();
            let ds: Vec<LabelPlane> = images.iter().map(|(_, l)| downsample_labels(l, tw, th)).collect();
            let feats: Vec<&Tensor<T>> = fs.iter().map(|f| &f.out.features).collect();
            let stats = batch_stats(&feats, &ds.iter().collect::<Vec<_>>(), self.net.config().num_classes);
            let probs: Vec<&Tensor<T>> = fs.iter().map(|f| &f.out.probs).collect();
            weight = cfg.proto_weight.unwrap_or_else(|| confidence_weight(&probs, cfg.th_t2s));
            let bank = self.state.bank.as_mut().expect("vcl bank");
            let none: Vec<(Vec<T>, usize)> = stats.iter().map(|(v, _)| (v.clone(), 0)).collect();
            update_prototypes(bank, &stats, &none, (weight, 0.0));
            let bank = self.state.bank.as_ref().expect("vcl bank");
            for (f, (_, lab)) in fs.iter_mut().zip(&images) {
                vcl += self.contrast(bank, f, lab, cfg.beta1 / n)? / n;
            }
        }
        let report = total_loss(cls, dice, vcl, 0.0, 0.0, &cfg.loss_weights())?;
        let mut grads = self.state.student.zeros_like();
        self.backward_all(&self.state.student, &fs, &mut grads);
        let lr = self.lr();
        self.apply_gradients(&grads, lr)?;
        self.state.iteration += 1;
        Ok(StepReport {
            loss: report,
            w_t2s: weight,
            w_s2t: 0.0,
            pseudo_fg: 0.0,
        })
    }

    /// Draws the step's quads from the configured datasets.
    pub fn draw_quads(&mut self, source: &[ImageSample<T>], target: &[ImageSample<T>]) -> Result<Vec<QuadBatch<T>>> {
        let cfg = self.state.config.preprocess();
        let input = self.state.config.input_strategy;
        (0..self.state.config.half_batch())
            .map(|_| sample_quad(source, target, &cfg, input, &mut self.state.rng))
            .collect()
    }

    /// One adaptation step on `quads`: pseudo-label, translate, forward,
    /// update prototypes, compute losses, step the student, EMA the teacher.
    pub fn adapt_step(&mut self, quads: &[QuadBatch<T>]) -> Result<StepReport> {
        if quads.is_empty() {
            return Err(IdaError::InvalidArgument("adapt_step needs at least one quad".into()));
        }
        let mut rng = self.state.rng.clone();
        let obj = self.adapt_objective(&self.state.student, quads, &mut rng, self.state.bank.clone(), true)?;
        self.state.rng = rng;
        self.state.bank = obj.bank;
        let lr = self.lr();
        self.apply_gradients(&obj.grads, lr)?;
        ema_update(&mut self.state.teacher, &self.state.student, self.state.config.ema_decay)?;
        self.state.iteration += 1;
        if obj.report.pseudo_fg == 0.0 {
            self.state.degenerate_steps += 1;
        }
        Ok(obj.report)
    }

    /// The adaptation loss of `student` on `quads` and its gradient, without
    /// touching the trainer. Translation masks come from `rng`. With
    /// `update_bank` the prototypes are first updated from this batch, as in
    /// a training step; otherwise `bank` is used as given, which makes the
    /// loss a pure function of `student` for gradient checking.
    pub fn adapt_objective(
        &self,
        student: &ModelState<T>,
        quads: &[QuadBatch<T>],
        rng: &mut ChaCha8Rng,
        bank: Option<PrototypeBank<T>>,
        update_bank: bool,
    ) -> Result<AdaptObjective<T>> {
        if quads.is_empty() {
            return Err(IdaError::InvalidArgument("adapt_step needs at least one quad".into()));
        }
        if self.state.config.mrat {
            self.mrat_objective(student, quads, rng, bank, update_bank)
        } else {
            self.self_training_objective(student, quads, bank)
        }
    }

    /// Plain self-training: source labels on whole source images and teacher
    /// pseudo-labels on whole target images.
    fn self_training_objective(
        &self,
        student: &ModelState<T>,
        quads: &[QuadBatch<T>],
        bank: Option<PrototypeBank<T>>,
    ) -> Result<AdaptObjective<T>> {
        let cfg = self.state.config.clone();
        let b = quads.len() as f64;
        let mut pseudo = Vec::with_capacity(quads.len());
        for q in quads {
            pseudo.push(self.net.pseudo_label(&self.state.teacher, q.tr.plane())?);
        }
        let region = full_region(cfg.train_width, cfg.train_height);
        let mut fs = Vec::with_capacity(2 * quads.len());
        let (mut cls, mut dice) = (0.0, 0.0);
        for (q, y_tr) in quads.iter().zip(&pseudo) {
            for (img, lab) in [(q.sr.plane(), q.y_sr()), (q.tr.plane(), y_tr)] {
                let mut f = Forwarded::new(&self.net, student, img)?;
                let (c, d) = Self::supervise(&mut f, lab, &region, 1.0 / b)?;
                cls += c / b;
                dice += d / b;
                fs.push(f);
            }
        }
        let report = total_loss(cls, dice, 0.0, 0.0, 0.0, &cfg.loss_weights())?;
        let mut grads = student.zeros_like();
        self.backward_all(student, &fs, &mut grads);
        Ok(AdaptObjective {
            report: StepReport {
                loss: report,
                w_t2s: 0.0,
                w_s2t: 0.0,
                pseudo_fg: foreground_fraction(&pseudo.iter().collect::<Vec<_>>()),
            },
            grads,
            bank,
        })
    }

    fn mrat_objective(
        &self,
        student: &ModelState<T>,
        quads: &[QuadBatch<T>],
        rng: &mut ChaCha8Rng,
        mut bank: Option<PrototypeBank<T>>,
        update_bank: bool,
    ) -> Result<AdaptObjective<T>> {
        let cfg = self.state.config.clone();
        let b = quads.len() as f64;
        let weights = cfg.loss_weights();
        let opts = cfg.mrat_options();

        // teacher pass on the raw target planes
        let mut teacher_tr = Vec::with_capacity(quads.len());
        let mut teacher_tp = Vec::with_capacity(quads.len());
        for q in quads {
            teacher_tr.push(self.net.forward(&self.state.teacher, q.tr.plane())?);
            teacher_tp.push(self.net.forward(&self.state.teacher, q.tp.plane())?);
        }
        let pseudo_tr: Vec<LabelPlane> = teacher_tr.iter().map(|o| o.argmax()).collect();
        let pseudo_tp: Vec<LabelPlane> = teacher_tp.iter().map(|o| o.argmax()).collect();

        let mut pairs = Vec::with_capacity(quads.len());
        for (i, q) in quads.iter().enumerate() {
            pairs.push(mrat::make_intermediate_batch(
                q,
                &pseudo_tr[i],
                &pseudo_tp[i],
                &opts,
                rng,
            )?);
        }

        // student pass on both streams of every quad: index 2*i + s
        let mut fs = Vec::with_capacity(2 * quads.len());
        for p in &pairs {
            for s in &p.streams {
                fs.push(Forwarded::new(&self.net, student, &s.image)?);
            }
        }
        let stream = |k: usize| &pairs[k / 2].streams[k % 2];

        // supervised and consistency terms
        let (mut cls, mut dice, mut con) = (0.0, 0.0, 0.0);
        for (k, f) in fs.iter_mut().enumerate() {
            let s = stream(k);
            let (c, d) = Self::supervise(f, &s.label, &s.supervised_region(), 1.0 / b)?;
            cls += c / b;
            dice += d / b;
            let teacher = match s.direction {
                Direction::T2s => &teacher_tp[k / 2].probs,
                Direction::S2t => &teacher_tr[k / 2].probs,
            };
            let m = masked_consistency(&f.out.probs, teacher, &s.consistency_region())?;
            axpy(&mut f.dprobs, weights.gamma / b, &m.grad);
            con += m.value.as_f64() / b;
        }

        // prototype update and contrast
        let (mut w_t2s, mut w_s2t) = (0.0, 0.0);
        let (mut l_t2s, mut l_s2t) = (0.0, 0.0);
        let mut extra: Vec<Forwarded<T>> = Vec::new();
        if cfg.idcl {
            let nc = self.net.config().num_classes;
            let (tw, th) = self.net.config().tap_size();
            let ds: Vec<LabelPlane> = (0..fs.len()).map(|k| downsample_labels(&stream(k).label, tw, th)).collect();
            let select = |d: Direction| -> Vec<usize> { (0..fs.len()).filter(|&k| stream(k).direction == d).collect() };
            let stats_of = |ks: &[usize], fs: &[Forwarded<T>]| {
                let feats: Vec<&Tensor<T>> = ks.iter().map(|&k| &fs[k].out.features).collect();
                let labs: Vec<&LabelPlane> = ks.iter().map(|&k| &ds[k]).collect();
                batch_stats(&feats, &labs, nc)
            };
            let weight_of = |ks: &[usize], th: f64, fs: &[Forwarded<T>]| {
                let probs: Vec<&Tensor<T>> = ks.iter().map(|&k| &fs[k].out.probs).collect();
                cfg.proto_weight.unwrap_or_else(|| confidence_weight(&probs, th))
            };
            let t2s = select(Direction::T2s);
            let s2t = select(Direction::S2t);
            let empty: Vec<(Vec<T>, usize)> = vec![(Vec::new(), 0); nc];
            match cfg.cl_variant {
                ClVariant::Idcl | ClVariant::Dcl => {
                    w_s2t = weight_of(&s2t, cfg.th_s2t, &fs);
                    let st = stats_of(&s2t, &fs);
                    let (ts, wt) = if cfg.cl_variant == ClVariant::Idcl {
                        w_t2s = weight_of(&t2s, cfg.th_t2s, &fs);
                        (stats_of(&t2s, &fs), w_t2s)
                    } else {
                        (empty.clone(), 0.0)
                    };
                    let bank = bank.as_mut().expect("idcl bank");
                    if update_bank {
                        update_prototypes(bank, &ts, &st, (wt, w_s2t));
                    }
                    let n_t2s = t2s.len().max(1) as f64;
                    let n_s2t = s2t.len().max(1) as f64;
                    for k in 0..fs.len() {
                        let (beta, n) = match stream(k).direction {
                            Direction::T2s => (weights.beta1, n_t2s),
                            Direction::S2t => (weights.beta2, n_s2t),
                        };
                        let label = stream(k).label.clone();
                        let v = self.contrast(bank, &mut fs[k], &label, beta / n)? / n;
                        match stream(k).direction {
                            Direction::T2s => l_t2s += v,
                            Direction::S2t => l_s2t += v,
                        }
                    }
                }
                ClVariant::Vanilla => {
                    // source and target images contrasted against source prototypes
                    for q in quads {
                        extra.push(Forwarded::new(&self.net, student, q.sr.plane())?);
                        extra.push(Forwarded::new(&self.net, student, q.tr.plane())?);
                    }
                    let src: Vec<usize> = (0..extra.len()).step_by(2).collect();
                    let src_ds: Vec<LabelPlane> = quads.iter().map(|q| downsample_labels(q.y_sr(), tw, th)).collect();
                    let feats: Vec<&Tensor<T>> = src.iter().map(|&k| &extra[k].out.features).collect();
                    let stats = batch_stats(&feats, &src_ds.iter().collect::<Vec<_>>(), nc);
                    w_t2s = weight_of(&src, cfg.th_t2s, &extra);
                    let bank = bank.as_mut().expect("idcl bank");
                    if update_bank {
                        update_prototypes(bank, &stats, &empty, (w_t2s, 0.0));
                    }
                    for (i, (q, y_tr)) in quads.iter().zip(&pseudo_tr).enumerate() {
                        l_t2s += self.contrast(bank, &mut extra[2 * i], q.y_sr(), weights.beta1 / b)? / b;
                        l_s2t += self.contrast(bank, &mut extra[2 * i + 1], y_tr, weights.beta2 / b)? / b;
                    }
                }
            }
        }

        let report = total_loss(cls, dice, l_t2s, l_s2t, con, &weights)?;
        let mut grads = student.zeros_like();
        self.backward_all(student, &fs, &mut grads);
        self.backward_all(student, &extra, &mut grads);
        let mut all: Vec<&LabelPlane> = pseudo_tr.iter().collect();
        all.extend(pseudo_tp.iter());
        Ok(AdaptObjective {
            report: StepReport {
                loss: report,
                w_t2s,
                w_s2t,
                pseudo_fg: foreground_fraction(&all),
            },
            grads,
            bank,
        })
    }

    fn record(&mut self, step: &StepReport, lr: f64, eval: Option<EvalSummary>) {
        self.state.history.push(HistoryRow {
            phase: self.state.phase,
            iteration: self.state.iteration,
            lr,
            loss: step.loss,
            w_t2s: step.w_t2s,
            w_s2t: step.w_s2t,
            pseudo_fg: step.pseudo_fg,
            eval,
        });
    }

    fn due(&self, every: u64) -> bool {
        let k = self.state.iteration;
        k == self.total_steps() || (every > 0 && k % every == 0)
    }

    /// Mean source-validation Dice of the student.
    pub fn validation_dice(&self, samples: &[ImageSample<T>]) -> Result<f64> {
        let fg = metrics::predict_foreground(&self.net, &self.state.student, samples)?;
        let mut sum = 0.0;
        for (s, p) in samples.iter().zip(&fg) {
            let gt = s
                .label
                .as_ref()
                .ok_or_else(|| IdaError::InvalidArgument(format!("validation sample {} has no label", s.id)))?;
            sum += metrics::dice(&metrics::binarize(p), gt)?;
        }
        Ok(sum / samples.len().max(1) as f64)
    }

    /// Runs pre-training to completion and returns the best model on source
    /// validation data (the last model when no validation data is given).
    /// `on_checkpoint` runs at every checkpoint boundary.
    pub fn pretrain(
        &mut self,
        data: Datasets<'_, T>,
        on_checkpoint: &mut dyn FnMut(&Trainer<T>) -> Result<()>,
    ) -> Result<ModelState<T>> {
        if self.state.phase != Phase::Pretrain {
            return Err(IdaError::InvalidArgument("trainer is not in the pre-training phase".into()));
        }
        let cfg = self.state.config.clone();
        while !self.is_finished() {
            let lr = self.lr();
            let step = self.pretrain_step(data.source)?;
            let mut eval = None;
            if self.due(cfg.eval_every) {
                if data.source_val.is_empty() {
                    self.state.teacher = self.state.student.clone();
                } else {
                    let d = self.validation_dice(data.source_val)?;
                    info!("pretrain step {} val dice {d:.4}", self.state.iteration);
                    if self.state.best_score.is_none_or(|b| d > b) {
                        self.state.best_score = Some(d);
                        self.state.teacher = self.state.student.clone();
                    }
                    eval = Some(EvalSummary::dice_only(d));
                }
            }
            debug!("pretrain step {} loss {:.5}", self.state.iteration, step.loss.total);
            self.record(&step, lr, eval);
            if cfg.checkpoint_every > 0 && self.state.iteration % cfg.checkpoint_every == 0 {
                on_checkpoint(self)?;
            }
        }
        if self.state.best_score.is_none() {
            self.state.teacher = self.state.student.clone();
        }
        Ok(self.state.teacher.clone())
    }

    /// Runs adaptation to completion; returns the adapted teacher.
    pub fn adapt(
        &mut self,
        data: Datasets<'_, T>,
        on_checkpoint: &mut dyn FnMut(&Trainer<T>) -> Result<()>,
    ) -> Result<ModelState<T>> {
        if self.state.phase != Phase::Adapt {
            return Err(IdaError::InvalidArgument("trainer is not in the adaptation phase".into()));
        }
        let cfg = self.state.config.clone();
        if !cfg.self_training {
            info!("all adaptation components disabled; returning the pre-trained model");
        }
        while !self.is_finished() {
            let lr = self.lr();
            let quads = self.draw_quads(data.source, data.target)?;
            let step = self.adapt_step(&quads)?;
            let mut eval = None;
            if self.due(cfg.eval_every) && !data.target_eval.is_empty() {
                let r = metrics::evaluate_dataset(&self.net, &self.state.teacher, data.target_eval)?;
                info!(
                    "adapt step {} target dice {:.4}",
                    self.state.iteration,
                    r.mean("dice").unwrap_or(f64::NAN)
                );
                eval = Some(EvalSummary::from_report(&r));
            }
            debug!("adapt step {} loss {:.5}", self.state.iteration, step.loss.total);
            self.record(&step, lr, eval);
            if cfg.checkpoint_every > 0 && self.state.iteration % cfg.checkpoint_every == 0 {
                on_checkpoint(self)?;
            }
        }
        let steps = self.state.iteration;
        if steps > 0 && self.state.degenerate_steps as f64 > 0.95 * steps as f64 {
            warn!(
                "teacher pseudo-labels were all background in {} of {} steps; adaptation is likely degenerate",
                self.state.degenerate_steps, steps
            );
        }
        Ok(self.state.teacher.clone())
    }

    /// Evaluates the output model on labelled samples.
    pub fn evaluate(&self, samples: &[ImageSample<T>]) -> Result<EvalReport> {
        metrics::evaluate_dataset(&self.net, self.state.output_model(), samples)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_domain, DomainStyle};
    use crate::data::Domain;

    fn tiny_config() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.train_width = 32;
        cfg.train_height = 32;
        cfg.depth = 2;
        cfg.base_channels = 2;
        cfg.m = 8;
        cfg.batch_size = 2;
        cfg.pretrain_iterations = 3;
        cfg.iterations = 3;
        cfg.eval_every = 2;
        cfg.checkpoint_every = 0;
        cfg
    }

    fn domains() -> (Vec<ImageSample<f64>>, Vec<ImageSample<f64>>, Vec<ImageSample<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let src = generate_synthetic_domain(&DomainStyle::retina_like(32), Domain::Source, 4, &mut rng).unwrap();
        let tgt = generate_synthetic_domain(&DomainStyle::cam_like(32), Domain::Target, 6, &mut rng).unwrap();
        let eval = tgt[4..].to_vec();
        let train = tgt[..4].iter().cloned().map(ImageSample::without_label).collect();
        (src, train, eval)
    }

    fn pretrained(cfg: &RunConfig, src: &[ImageSample<f64>]) -> ModelState<f64> {
        let mut t = Trainer::new_pretrain(cfg.clone(), src).unwrap();
        let data = Datasets {
            source: src,
            source_val: &[],
            target: &[],
            target_eval: &[],
        };
        t.pretrain(data, &mut |_| Ok(())).unwrap()
    }

    #[test]
    fn unit_decay_leaves_teacher_untouched() {
        let (src, tgt, _) = domains();
        let mut cfg = tiny_config();
        let pre = pretrained(&cfg, &src);
        cfg.ema_decay = 1.0;
        let mut t = Trainer::new_adapt(cfg, &pre, &src).unwrap();
        let before = t.state.teacher.fingerprint();
        let quads = t.draw_quads(&src, &tgt).unwrap();
        t.adapt_step(&quads).unwrap();
        assert_eq!(t.state.teacher.fingerprint(), before);
        assert_ne!(t.state.student.fingerprint(), before);
    }

    #[test]
    fn teacher_changes_only_through_ema() {
        let (src, tgt, _) = domains();
        let cfg = tiny_config();
        let pre = pretrained(&cfg, &src);
        let mut t = Trainer::new_adapt(cfg.clone(), &pre, &src).unwrap();
        for _ in 0..2 {
            let old_teacher = t.state.teacher.clone();
            let quads = t.draw_quads(&src, &tgt).unwrap();
            t.adapt_step(&quads).unwrap();
            let mut expect = old_teacher;
            ema_update(&mut expect, &t.state.student, cfg.ema_decay).unwrap();
            assert_eq!(t.state.teacher, expect);
        }
    }

    #[test]
    fn step_reports_recompute_their_total() {
        let (src, tgt, _) = domains();
        let mut cfg = tiny_config();
        cfg.beta1 = 0.5;
        cfg.beta2 = 2.0;
        cfg.gamma = 3.0;
        let pre = pretrained(&cfg, &src);
        let mut t = Trainer::new_adapt(cfg, &pre, &src).unwrap();
        for _ in 0..2 {
            let quads = t.draw_quads(&src, &tgt).unwrap();
            let r = t.adapt_step(&quads).unwrap().loss;
            let want = r.cls + r.dice + 0.5 * r.idcl_t2s + 2.0 * r.idcl_s2t + 3.0 * r.con;
            assert!((r.total - want).abs() < 1e-9);
            assert!(r.idcl_t2s > 0.0 && r.idcl_s2t > 0.0 && r.con >= 0.0);
        }
    }

    #[test]
    fn zero_iterations_or_all_toggles_off_return_the_pretrained_model() {
        let (src, tgt, eval) = domains();
        let cfg = tiny_config();
        let pre = pretrained(&cfg, &src);
        let data = Datasets {
            source: &src,
            source_val: &[],
            target: &tgt,
            target_eval: &eval,
        };
        let mut zero = cfg.clone();
        zero.iterations = 0;
        let mut off = cfg.clone();
        off.self_training = false;
        off.mrat = false;
        off.idcl = false;
        for c in [zero, off] {
            let mut t = Trainer::new_adapt(c, &pre, &src).unwrap();
            let out = t.adapt(data, &mut |_| Ok(())).unwrap();
            assert_eq!(out.params, pre.params);
            assert!(t.state.history.is_empty());
        }
    }

    #[test]
    fn every_component_combination_runs() {
        let (src, tgt, _) = domains();
        let cfg = tiny_config();
        let pre = pretrained(&cfg, &src);
        for (mrat, idcl) in [(false, false), (true, false), (true, true)] {
            for variant in [ClVariant::Idcl, ClVariant::Dcl, ClVariant::Vanilla] {
                let mut c = cfg.clone();
                c.mrat = mrat;
                c.idcl = idcl;
                c.cl_variant = variant;
                let mut t = Trainer::new_adapt(c, &pre, &src).unwrap();
                let quads = t.draw_quads(&src, &tgt).unwrap();
                let r = t.adapt_step(&quads).unwrap();
                assert!(r.loss.total.is_finite());
                assert_eq!(t.state.bank.is_some(), idcl);
                if !idcl {
                    assert_eq!(r.loss.idcl_t2s, 0.0);
                }
            }
        }
    }

    #[test]
    fn fixed_seed_replays_identical_histories() {
        let (src, tgt, eval) = domains();
        let cfg = tiny_config();
        let run = || {
            let pre = pretrained(&cfg, &src);
            let mut t = Trainer::new_adapt(cfg.clone(), &pre, &src).unwrap();
            let data = Datasets {
                source: &src,
                source_val: &[],
                target: &tgt,
                target_eval: &eval,
            };
            t.adapt(data, &mut |_| Ok(())).unwrap();
            (t.state.history, t.state.student.fingerprint())
        };
        let (a, fa) = run();
        let (b, fb) = run();
        assert_eq!(a, b);
        assert_eq!(fa, fb);
        assert_eq!(a.len(), 3);
        assert!(a[1].eval.is_some() && a[2].eval.is_some() && a[0].eval.is_none());
    }

    #[test]
    fn resumed_run_continues_bit_identically() {
        let (src, tgt, _) = domains();
        let cfg = tiny_config();
        let pre = pretrained(&cfg, &src);
        let mut straight = Trainer::new_adapt(cfg.clone(), &pre, &src).unwrap();
        let mut reports = Vec::new();
        for _ in 0..3 {
            let q = straight.draw_quads(&src, &tgt).unwrap();
            reports.push(straight.adapt_step(&q).unwrap());
        }
        let mut first = Trainer::new_adapt(cfg, &pre, &src).unwrap();
        let q = first.draw_quads(&src, &tgt).unwrap();
        first.adapt_step(&q).unwrap();
        let bytes = crate::checkpoint::encode(&first.state).unwrap();
        drop(first);
        let mut resumed = Trainer::from_checkpoint(crate::checkpoint::decode::<f64>(&bytes).unwrap()).unwrap();
        for want in &reports[1..] {
            let q = resumed.draw_quads(&src, &tgt).unwrap();
            assert_eq!(&resumed.adapt_step(&q).unwrap(), want);
        }
        assert_eq!(resumed.state.student, straight.state.student);
        assert_eq!(resumed.state.teacher, straight.state.teacher);
    }

    #[test]
    fn pretrain_keeps_best_validation_state() {
        let (src, _, _) = domains();
        let mut cfg = tiny_config();
        cfg.eval_every = 1;
        cfg.pretrain_iterations = 4;
        let mut t = Trainer::new_pretrain(cfg, &src).unwrap();
        let data = Datasets {
            source: &src[..2],
            source_val: &src[2..],
            target: &[],
            target_eval: &[],
        };
        let best = t.pretrain(data, &mut |_| Ok(())).unwrap();
        let scores: Vec<f64> = t.state.history.iter().map(|h| h.eval.as_ref().unwrap().dice.unwrap()).collect();
        let top = scores.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(t.state.best_score, Some(top));
        let mut probe = Trainer::new_pretrain(t.state.config.clone(), &src).unwrap();
        probe.state.student = best;
        assert_eq!(probe.validation_dice(&src[2..]).unwrap(), top);
    }

    #[test]
    fn pretrain_strategies_differ() {
        let (src, _, _) = domains();
        let mut prints = Vec::new();
        for s in ["random", "self_cut", "vcl", "self_cut+vcl"] {
            let mut cfg = tiny_config();
            cfg.pretrain_strategy = s.parse().unwrap();
            let mut t = Trainer::new_pretrain(cfg, &src).unwrap();
            let r = t.pretrain_step(&src).unwrap();
            assert_eq!(r.loss.idcl_t2s > 0.0, s.contains("vcl"));
            prints.push(t.state.student.fingerprint());
        }
        prints.sort();
        prints.dedup();
        assert_eq!(prints.len(), 4);
    }
}

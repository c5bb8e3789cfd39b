//! Optimization loop, evaluation and resumable training state.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::checkpoint::{self, AnyTensor};
use crate::config::{LossConfig, RunConfig, TrainConfig, TrainMode};
use crate::data::{sample_mixed_batch, AliasMap, Split, Suite};
use crate::error::{Error, Result};
use crate::losses::{
    argmax_targets, dataset_ce_loss, informative_loss, plain_sum_loss, project_logits, total_loss, Expander, HeadBank,
    LossReport, LossTerms, ProjectionBank, SigmaParams,
};
use crate::mvit::{Backbone, BackboneConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::{Rng, ALGORITHM};
use crate::tensor::{Real, Tensor};

const INIT_STREAM: u64 = 0x1417;
const BATCH_STREAM: u64 = 0xBA7C;

/// Parameter layout of the whole model; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Architecture {
    pub backbone: Backbone,
    pub heads: HeadBank,
    pub expander: Expander,
    pub bank: ProjectionBank,
    pub sigma: SigmaParams,
    pub classes: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model<F> {
    pub arch: Architecture,
    pub store: ParamStore<F>,
}

impl<F: Real> Model<F> {
    pub fn new(backbone: &BackboneConfig, loss: &LossConfig, classes: &[usize], seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::derive(seed, &[INIT_STREAM]);
        let bb = Backbone::new(&mut store, &mut rng, backbone)?;
        let d = backbone.embed_dim();
        let heads = HeadBank::new(&mut store, &mut rng, d, classes);
        let expander = Expander::new(&mut store, &mut rng, d, loss.expander_hidden);
        let bank = ProjectionBank::new(&mut store, classes);
        let sigma = SigmaParams::new(&mut store, classes.len(), loss.sigma_init);
        Ok(Self {
            arch: Architecture {
                backbone: bb,
                heads,
                expander,
                bank,
                sigma,
                classes: classes.to_vec(),
            },
            store,
        })
    }

    pub fn cast<G: Real>(&self) -> Model<G> {
        Model {
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }
}

/// The training objective for one batch. `clips` is `[B, T, H, W, C]`;
/// `datasets[b]` and `labels[b]` describe row `b`.
#[allow(clippy::too_many_arguments)]
pub fn objective<F: Real>(
    g: &mut Graph<F>,
    arch: &Architecture,
    p: &Bound,
    clips: Var,
    datasets: &[usize],
    labels: &[usize],
    mode: TrainMode,
    loss: &LossConfig,
) -> Result<(Var, LossReport)> {
    let k_count = arch.classes.len();
    let z = arch.backbone.forward(g, p, clips)?;
    let need_all = mode.use_projection();
    let mut full = Vec::with_capacity(k_count);
    for i in 0..k_count {
        full.push(arch.heads.logits(g, p, i, z)?);
    }
    let mut dataset = vec![None; k_count];
    let mut counts = vec![0; k_count];
    for k in 0..k_count {
        let rows: Vec<usize> = (0..datasets.len()).filter(|&b| datasets[b] == k).collect();
        counts[k] = rows.len();
        if rows.is_empty() {
            continue;
        }
        let lab: Vec<usize> = rows.iter().map(|&b| labels[b]).collect();
        let mut sel = vec![None; k_count];
        for i in 0..k_count {
            if i == k || need_all {
                sel[i] = Some(g.select_rows(full[i], &rows)?);
            }
        }
        dataset[k] = if mode.projection_add() {
            let y = project_logits(g, p, k, &sel, &arch.bank)?;
            dataset_ce_loss(g, Some(y), &lab)?
        } else if mode.use_projection() {
            let mut l = dataset_ce_loss(g, sel[k], &lab)?.expect("non-empty");
            for (i, y) in sel.iter().enumerate() {
                if i != k {
                    let y = arch.bank.project(g, p, i, k, y.expect("evaluated"))?;
                    let li = dataset_ce_loss(g, Some(y), &lab)?.expect("non-empty");
                    l = g.add(l, li)?;
                }
            }
            Some(l)
        } else {
            dataset_ce_loss(g, sel[k], &lab)?
        };
    }
    if !mode.sigma_weighted() {
        return plain_sum_loss(g, &dataset, &counts);
    }
    let (variance, covariance) = if mode.use_informative() {
        let ze = arch.expander.forward(g, p, z)?;
        let (v, c) = informative_loss(g, ze, loss.eps, loss.variance_formula)?;
        (Some(v), Some(c))
    } else {
        (None, None)
    };
    let terms = LossTerms {
        variance,
        covariance,
        dataset: &dataset,
        counts: &counts,
    };
    total_loss(g, &terms, p[arch.sigma.log_sigma], loss.detach_sigma_loss)
}

/// Optimizer hyper-parameters for one update.
#[derive(Clone, Copy, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One AdamW update of a single tensor at step `t` (1-based). Decay is
/// decoupled: `p ← p − lr·wd·p` before the Adam step.
pub fn adamw_update<F: Real>(p: &mut [F], grad: &[F], m: &mut [F], v: &mut [F], t: u64, h: &AdamW, decay: bool) {
    let (b1, b2) = (h.beta1, h.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let (b1f, b2f) = (F::of(b1), F::of(b2));
    let (one_b1, one_b2) = (F::of(1.0 - b1), F::of(1.0 - b2));
    let step = F::of(h.lr / c1);
    let inv_c2 = F::of(1.0 / c2);
    let eps = F::of(h.eps);
    let shrink = F::of(1.0 - h.lr * h.weight_decay);
    for i in 0..p.len() {
        let gi = grad[i];
        m[i] = b1f * m[i] + one_b1 * gi;
        v[i] = b2f * v[i] + one_b2 * gi * gi;
        if decay {
            p[i] *= shrink;
        }
        p[i] -= step * m[i] / ((v[i] * inv_c2).sqrt() + eps);
    }
}

/// First and second moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Real> Moments<F> {
    pub fn zeros(store: &ParamStore<F>) -> Self {
        let z: Vec<Tensor<F>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { m: z.clone(), v: z }
    }
}

/// Applies [`adamw_update`] to every parameter with a gradient. Parameters
/// without one (unused by the objective) are left untouched.
pub fn adamw_step<F: Real>(
    store: &mut ParamStore<F>,
    grads: &[Option<Vec<F>>],
    moments: &mut Moments<F>,
    t: u64,
    h: &AdamW,
) {
    for (i, p) in store.iter_mut().enumerate() {
        if let Some(g) = &grads[i] {
            adamw_update(
                p.value.data_mut(),
                g,
                moments.m[i].data_mut(),
                moments.v[i].data_mut(),
                t,
                h,
                p.decay,
            );
        }
    }
}

/// Linear warmup from `lr_min` to `lr`, then cosine decay back to `lr_min`
/// at `steps`.
pub fn lr_schedule(step: usize, cfg: &TrainConfig) -> f64 {
    let (base, low) = (cfg.lr, cfg.lr_min);
    let warmup = cfg.warmup();
    if step < warmup {
        return low + (base - low) * step as f64 / warmup as f64;
    }
    if step >= cfg.steps {
        return low;
    }
    let progress = (step - warmup) as f64 / (cfg.steps - warmup) as f64;
    low + 0.5 * (base - low) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One metrics line per optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub top1: f64,
    pub top5: f64,
    pub clips: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub datasets: Vec<DatasetMetrics>,
    /// Floating-point operations recorded by the graphs.
    pub flops: u64,
}

impl Evaluation {
    pub fn mean_top1(&self) -> f64 {
        self.datasets.iter().map(|d| d.top1).sum::<f64>() / self.datasets.len() as f64
    }
}

pub const REPORT_HEADER: &str = "mode,dataset,top1,top5,steps,seed";

/// `report.csv` lines (without header) for a run of `config`.
pub fn report_rows(config: &RunConfig, eval: &Evaluation) -> Vec<String> {
    eval.datasets
        .iter()
        .map(|d| {
            format!(
                "{},{},{},{},{},{}",
                config.train.mode.name(),
                d.dataset,
                d.top1,
                d.top5,
                config.train.steps,
                config.train.seed
            )
        })
        .collect()
}

/// Full `report.csv` text.
pub fn report_csv(rows: &[String]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in rows {
        s.push_str(r);
        s.push('\n');
    }
    s
}

/// Alias-mapped source classes whose strongest projection lands on the
/// mapped target class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Agreement {
    pub matched: usize,
    pub total: usize,
}

impl Agreement {
    /// `matched / total`; zero when nothing is mapped.
    pub fn rate(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.matched as f64 / self.total as f64
        }
    }
}

/// Scores the column argmax of each `W_{src,dst}` against `alias`,
/// restricted to one ordered pair when `pair` is given.
pub fn alias_agreement<F: Real>(model: &Model<F>, alias: &AliasMap, pair: Option<(usize, usize)>) -> Result<Agreement> {
    let mut out = Agreement { matched: 0, total: 0 };
    let mut argmax = std::collections::HashMap::new();
    for e in &alias.entries {
        if pair.is_some_and(|p| p != (e.src, e.dst)) {
            continue;
        }
        let targets = match argmax.entry((e.src, e.dst)) {
            std::collections::hash_map::Entry::Occupied(o) => o.into_mut(),
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(argmax_targets(&model.store, &model.arch.bank, e.src, e.dst)?)
            }
        };
        out.total += 1;
        out.matched += usize::from(targets[e.src_class] == e.dst_class);
    }
    Ok(out)
}

/// Top-1/top-5 accuracy of each head on its own dataset's `split`, using
/// `Y_k` alone.
pub fn evaluate<F: Real>(model: &Model<F>, suite: &Suite, split: Split, batch: usize) -> Result<Evaluation> {
    let arch = &model.arch;
    let mut flops = 0;
    let mut out = Vec::new();
    for spec in suite.registry.iter() {
        let k = spec.id;
        let range = suite.split_range(k, split)?;
        let ids: Vec<usize> = range.collect();
        let (mut hit1, mut hit5) = (0usize, 0usize);
        for chunk in ids.chunks(batch.max(1)) {
            let items: Vec<(usize, usize)> = chunk.iter().map(|&s| (k, s)).collect();
            let b = suite.batch::<F>(&items)?;
            let mut g = Graph::new();
            let p = model.store.bind_frozen(&mut g);
            let clips = g.constant(b.clips);
            let z = arch.backbone.forward(&mut g, &p, clips)?;
            let y = arch.heads.logits(&mut g, &p, k, z)?;
            flops += g.flops();
            let c = spec.classes();
            let logits = g.value(y).data();
            for (row, &label) in b.labels.iter().enumerate() {
                let r = &logits[row * c..(row + 1) * c];
                let target = r[label];
                // rank of the true class, ties resolved towards lower indices
                let rank = r
                    .iter()
                    .enumerate()
                    .filter(|&(j, &v)| v > target || (v == target && j < label))
                    .count();
                hit1 += usize::from(rank < 1);
                hit5 += usize::from(rank < 5);
            }
        }
        let n = ids.len().max(1) as f64;
        out.push(DatasetMetrics {
            dataset: spec.name.clone(),
            top1: hit1 as f64 / n,
            top5: hit5 as f64 / n,
            clips: ids.len(),
        });
    }
    Ok(Evaluation { datasets: out, flops })
}

/// Checkpoint sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub step: usize,
    pub config_hash: String,
    pub rng: RngState,
}

/// Batches are drawn from `Rng::derive(seed, [stream, step])`, so the next
/// step index is the whole generator state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub algorithm: String,
    pub seed: u64,
    pub stream: u64,
    pub next_step: usize,
}

/// Everything a run needs to continue: parameters, moments, step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub moments: Moments<f32>,
    pub step: usize,
}

impl TrainState {
    pub fn new(config: RunConfig, suite: &Suite) -> Result<Self> {
        config.validate()?;
        let classes = suite.registry.class_counts();
        let model = Model::new(&config.backbone, &config.loss, &classes, config.train.seed)?;
        let moments = Moments::zeros(&model.store);
        Ok(Self {
            config,
            model,
            moments,
            step: 0,
        })
    }

    pub fn done(&self) -> bool {
        self.step >= self.config.train.steps
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self, suite: &Suite) -> Result<StepRecord> {
        let step = self.step;
        self.step_inner(suite).map_err(|e| Error::AtStep {
            step,
            source: Box::new(e),
        })
    }

    fn step_inner(&mut self, suite: &Suite) -> Result<StepRecord> {
        let t = &self.config.train;
        let step = self.step;
        let mut rng = Rng::derive(t.seed, &[BATCH_STREAM, step as u64]);
        let batch = sample_mixed_batch::<f32>(&mut rng, t.batch_size, suite)?;
        let mut g = Graph::new();
        let p = self.model.store.bind(&mut g);
        let clips = g.constant(batch.clips);
        let (loss, report) = objective(
            &mut g,
            &self.model.arch,
            &p,
            clips,
            &batch.datasets,
            &batch.labels,
            t.mode,
            &self.config.loss,
        )?;
        g.backward(loss)?;
        let mut grads: Vec<Option<Vec<f32>>> = p.vars().iter().map(|&v| g.take_grad(v)).collect();
        check_grads(&grads, &self.model.store)?;
        if t.grad_clip > 0.0 {
            clip_global_norm(&mut grads, t.grad_clip);
        }
        let lr = lr_schedule(step, t);
        let h = AdamW {
            lr,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.adam_eps,
            weight_decay: t.weight_decay,
        };
        adamw_step(&mut self.model.store, &grads, &mut self.moments, step as u64 + 1, &h);
        self.step += 1;
        Ok(StepRecord { step, lr, loss: report })
    }

    /// Runs up to `n` steps, stopping at the configured total.
    pub fn train_steps(&mut self, suite: &Suite, n: usize, mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        for _ in 0..n {
            if self.done() {
                break;
            }
            let r = self.train_step(suite)?;
            on_step(&r);
        }
        Ok(())
    }

    pub fn evaluate(&self, suite: &Suite, split: Split) -> Result<Evaluation> {
        evaluate(&self.model, suite, split, self.config.train.eval_batch)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            step: self.step,
            config_hash: format!("{:016x}", self.config.hash()),
            rng: RngState {
                algorithm: ALGORITHM.to_string(),
                seed: self.config.train.seed,
                stream: BATCH_STREAM,
                next_step: self.step,
            },
        }
    }

    pub fn entries(&self) -> Vec<(String, AnyTensor)> {
        let mut e = self.model.store.to_entries("param.");
        for (i, p) in self.model.store.iter().enumerate() {
            e.push((format!("adam.m.{}", p.name), self.moments.m[i].clone().into()));
            e.push((format!("adam.v.{}", p.name), self.moments.v[i].clone().into()));
        }
        e
    }

    /// Writes `checkpoint_{step}.mttn` and its `.json` manifest into `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(format!("checkpoint_{}.mttn", self.step));
        checkpoint::save(&path, &self.entries())?;
        std::fs::write(
            path.with_extension("json"),
            serde_json::to_string_pretty(&self.manifest())?,
        )?;
        Ok(path)
    }

    /// Restores a state saved by [`TrainState::save`] under the same config.
    pub fn load(config: RunConfig, suite: &Suite, path: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(path.with_extension("json"))?)?;
        let mut state = Self::new(config, suite)?;
        let expect = format!("{:016x}", state.config.hash());
        if manifest.config_hash != expect {
            return Err(Error::State(format!(
                "checkpoint config hash {} does not match {expect}",
                manifest.config_hash
            )));
        }
        if manifest.rng.algorithm != ALGORITHM {
            return Err(Error::State(format!("unknown rng `{}`", manifest.rng.algorithm)));
        }
        let entries = checkpoint::load(path)?;
        state.restore(&entries, manifest.step)?;
        Ok(state)
    }

    pub fn restore(&mut self, entries: &[(String, AnyTensor)], step: usize) -> Result<()> {
        self.model.store.load_entries(entries, "param.")?;
        let mut m = self.model.store.clone();
        m.load_entries(entries, "adam.m.")?;
        let mut v = self.model.store.clone();
        v.load_entries(entries, "adam.v.")?;
        self.moments = Moments {
            m: m.iter().map(|p| p.value.clone()).collect(),
            v: v.iter().map(|p| p.value.clone()).collect(),
        };
        self.step = step;
        Ok(())
    }
}

fn check_grads<F: Real>(grads: &[Option<Vec<F>>], store: &ParamStore<F>) -> Result<()> {
    for (g, p) in grads.iter().zip(store.iter()) {
        if let Some(g) = g {
            if let Some(bad) = g.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    component: format!("gradient of {}", p.name),
                    value: bad.f64(),
                });
            }
        }
    }
    Ok(())
}

fn clip_global_norm<F: Real>(grads: &mut [Option<Vec<F>>], max_norm: f64) {
    let sq: f64 = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v.f64() * v.f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = F::of(max_norm / norm);
        grads
            .iter_mut()
            .flatten()
            .flat_map(|g| g.iter_mut())
            .for_each(|v| *v *= s);
    }
}

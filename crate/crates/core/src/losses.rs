//! Training objectives: the expander, the informative (variance and
//! covariance) terms, per-dataset heads, directed cross-dataset logit
//! projection, cross-entropy, and the uncertainty-weighted total.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Bound, Linear, ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Which standard-deviation formula the variance hinge uses.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VarianceFormula {
    /// Sample variance over the batch, `Σ_i (z_ij − mean_j)² / (B − 1)`.
    #[default]
    Vicreg,
    /// Un-squared deviations summed over the batch and divided by `d − 1`. The
    /// deviations sum to zero, so this degenerates to `1 − sqrt(eps)`.
    Unsquared,
}

fn need_batch(b: usize) -> Result<()> {
    if b < 2 {
        return Err(Error::BatchSize { need: 2, got: b });
    }
    Ok(())
}

fn batch_dims<F: Real>(g: &Graph<F>, z: Var) -> Result<(usize, usize)> {
    match *g.shape(z) {
        [b, d] => Ok((b, d)),
        ref s => Err(Error::Dimension(format!("expected [B, d] embeddings, got {s:?}"))),
    }
}

/// Two-layer map `R^d → R^hidden → R^d` feeding only the informative loss.
#[derive(Clone, Copy, Debug)]
pub struct Expander {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Expander {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut Rng, dim: usize, hidden: usize) -> Self {
        Self {
            fc1: Linear::new(store, rng, "expander.fc1", dim, hidden, true),
            fc2: Linear::new(store, rng, "expander.fc2", hidden, dim, true),
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<F>, p: &Bound, z: Var) -> Result<Var> {
        let (b, _) = batch_dims(g, z)?;
        need_batch(b)?;
        let h = self.fc1.forward(g, p, z)?;
        let h = g.gelu(h);
        self.fc2.forward(g, p, h)
    }
}

/// Hinge on the per-dimension batch standard deviation, averaged over `d`.
pub fn variance_loss<F: Real>(g: &mut Graph<F>, z: Var, eps: f64, formula: VarianceFormula) -> Result<Var> {
    let (b, d) = batch_dims(g, z)?;
    need_batch(b)?;
    let mean = g.mean(z, &[0])?;
    let centred = g.sub_rows(z, mean)?;
    let var = match formula {
        VarianceFormula::Vicreg => {
            let sq = g.square(centred);
            let s = g.sum(sq, &[0])?;
            g.scale(s, F::one() / F::of((b - 1) as f64))
        }
        VarianceFormula::Unsquared => {
            if d < 2 {
                return Err(Error::Dimension("unsquared variance needs d >= 2".into()));
            }
            let s = g.sum(centred, &[0])?;
            g.scale(s, F::one() / F::of((d - 1) as f64))
        }
    };
    let var = g.add_scalar(var, F::of(eps));
    let std = g.sqrt(var);
    let gap = g.neg(std);
    let gap = g.add_scalar(gap, F::one());
    let hinge = g.relu(gap);
    Ok(g.mean_all(hinge))
}

/// Sum of squared off-diagonal batch covariances, divided by `d`.
pub fn covariance_loss<F: Real>(g: &mut Graph<F>, z: Var) -> Result<Var> {
    let (b, d) = batch_dims(g, z)?;
    need_batch(b)?;
    let mean = g.mean(z, &[0])?;
    let centred = g.sub_rows(z, mean)?;
    let ct = g.transpose(centred)?;
    let cov = g.matmul(ct, centred)?;
    let cov = g.scale(cov, F::one() / F::of((b - 1) as f64));
    let mut mask = Tensor::full(&[d, d], F::one());
    for j in 0..d {
        mask.data_mut()[j * d + j] = F::zero();
    }
    let mask = g.constant(mask);
    let off = g.mul(cov, mask)?;
    let sq = g.square(off);
    let s = g.sum_all(sq);
    Ok(g.scale(s, F::one() / F::of(d as f64)))
}

/// Sum of the variance and covariance terms, as `(L^v, L^c)`.
pub fn informative_loss<F: Real>(
    g: &mut Graph<F>,
    z_expanded: Var,
    eps: f64,
    formula: VarianceFormula,
) -> Result<(Var, Var)> {
    Ok((
        variance_loss(g, z_expanded, eps, formula)?,
        covariance_loss(g, z_expanded)?,
    ))
}

impl<F: Real> Graph<F> {
    /// `x[b, :] − row` for every batch row `b`.
    pub fn sub_rows(&mut self, x: Var, row: Var) -> Result<Var> {
        let neg = self.neg(row);
        self.add_broadcast(x, neg)
    }
}

/// One linear classification head per dataset.
#[derive(Clone, Debug)]
pub struct HeadBank {
    pub heads: Vec<Linear>,
}

impl HeadBank {
    pub fn new<F: Real>(store: &mut ParamStore<F>, rng: &mut Rng, dim: usize, classes: &[usize]) -> Self {
        Self {
            heads: classes
                .iter()
                .enumerate()
                .map(|(k, &c)| Linear::new(store, rng, &format!("head{k}"), dim, c, true))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn classes(&self, k: usize) -> usize {
        self.heads[k].output
    }

    /// Logits `Y_k = h_k(Z)`.
    pub fn logits<F: Real>(&self, g: &mut Graph<F>, p: &Bound, k: usize, z: Var) -> Result<Var> {
        self.heads
            .get(k)
            .ok_or_else(|| Error::Lookup(format!("no head for dataset {k}")))?
            .forward(g, p, z)
    }
}

/// Directed class projections `W_{ik} ∈ R^{C_k×C_i}` for every ordered pair
/// `i ≠ k`, zero-initialized.
#[derive(Clone, Debug)]
pub struct ProjectionBank {
    k: usize,
    pairs: Vec<Option<ParamId>>,
}

impl ProjectionBank {
    pub fn new<F: Real>(store: &mut ParamStore<F>, classes: &[usize]) -> Self {
        let k = classes.len();
        let mut pairs = vec![None; k * k];
        for src in 0..k {
            for dst in 0..k {
                if src != dst {
                    pairs[src * k + dst] = Some(store.add(
                        format!("proj.{src}_{dst}"),
                        Tensor::zeros(&[classes[dst], classes[src]]),
                        true,
                    ));
                }
            }
        }
        Self { k, pairs }
    }

    pub fn datasets(&self) -> usize {
        self.k
    }

    /// Parameter of the map from dataset `src` logits into dataset `dst`.
    pub fn pair(&self, src: usize, dst: usize) -> Result<ParamId> {
        if src >= self.k || dst >= self.k {
            return Err(Error::Lookup(format!(
                "projection pair {src}:{dst} outside {} datasets",
                self.k
            )));
        }
        self.pairs[src * self.k + dst]
            .ok_or_else(|| Error::Lookup(format!("no projection from a dataset to itself ({src}:{dst})")))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.pairs.iter().flatten().copied()
    }

    pub fn zero<F: Real>(&self, store: &mut ParamStore<F>) {
        for id in self.ids() {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = F::zero());
        }
    }

    /// `W_{src,dst} Y_src` laid out row-wise, i.e. `Y_src · W_{src,dst}ᵀ`.
    pub fn project<F: Real>(&self, g: &mut Graph<F>, p: &Bound, src: usize, dst: usize, y_src: Var) -> Result<Var> {
        let w = p[self.pair(src, dst)?];
        let wt = g.transpose(w)?;
        g.matmul(y_src, wt)
    }
}

/// `Y'_k = Y_k + Σ_{i≠k} W_{ik} Y_i`, where `logits[i]` are head-`i` logits
/// on the samples labelled for dataset `k`.
pub fn project_logits<F: Real>(
    g: &mut Graph<F>,
    p: &Bound,
    k: usize,
    logits: &[Option<Var>],
    bank: &ProjectionBank,
) -> Result<Var> {
    let missing = |i: usize| Error::Contract(format!("head {i} output missing for dataset {k} samples"));
    let mut out = logits.get(k).copied().flatten().ok_or_else(|| missing(k))?;
    for (i, y) in logits.iter().enumerate() {
        if i == k {
            continue;
        }
        let y = y.ok_or_else(|| missing(i))?;
        let proj = bank.project(g, p, i, k, y)?;
        out = g.add(out, proj)?;
    }
    Ok(out)
}

/// Mean softmax cross-entropy. `None` when the dataset has no samples.
pub fn dataset_ce_loss<F: Real>(g: &mut Graph<F>, logits: Option<Var>, labels: &[usize]) -> Result<Option<Var>> {
    let Some(logits) = logits else {
        if labels.is_empty() {
            return Ok(None);
        }
        return Err(Error::Contract("labels given without logits".into()));
    };
    if labels.is_empty() {
        return Ok(None);
    }
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.pick(logp, labels)?;
    let m = g.mean_all(picked);
    Ok(Some(g.neg(m)))
}

/// Learnable `log σ_k`, one per dataset.
#[derive(Clone, Copy, Debug)]
pub struct SigmaParams {
    pub log_sigma: ParamId,
}

impl SigmaParams {
    pub fn new<F: Real>(store: &mut ParamStore<F>, k: usize, sigma_init: f64) -> Self {
        Self {
            log_sigma: store.add("log_sigma", Tensor::full(&[k], F::of(sigma_init.ln())), false),
        }
    }

    pub fn sigmas<F: Real>(&self, store: &ParamStore<F>) -> Vec<f64> {
        store.get(self.log_sigma).data().iter().map(|v| v.f64().exp()).collect()
    }
}

/// Per-step decomposition of the objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub variance: f64,
    pub covariance: f64,
    /// `L_k`, absent for datasets without samples in the batch.
    pub dataset: Vec<Option<f64>>,
    /// `σ_k`; absent for the unweighted objective.
    pub sigma: Option<Vec<f64>>,
    pub total: f64,
    pub counts: Vec<usize>,
}

impl LossReport {
    /// The total rebuilt from the components.
    pub fn reconstruct(&self) -> f64 {
        let mut t = self.variance + self.covariance;
        for (k, l) in self.dataset.iter().enumerate() {
            if let Some(l) = l {
                t += match &self.sigma {
                    Some(s) => l / (2.0 * s[k] * s[k]) + s[k].ln(),
                    None => *l,
                };
            }
        }
        t
    }
}

fn finite<F: Real>(g: &Graph<F>, v: Var, component: &str) -> Result<f64> {
    let x = g.item(v).f64();
    if !x.is_finite() {
        return Err(Error::Numeric {
            component: component.to_string(),
            value: x,
        });
    }
    Ok(x)
}

/// Inputs to [`total_loss`].
pub struct LossTerms<'a> {
    pub variance: Option<Var>,
    pub covariance: Option<Var>,
    pub dataset: &'a [Option<Var>],
    pub counts: &'a [usize],
}

/// `L^v + L^c + Σ_k [L_k / (2σ_k²) + ln σ_k]` over datasets present in the
/// batch. `log_sigma` is a `[K]` node. With `detach_sigma_loss`, σ sees a
/// detached `L_k` and the network sees a detached σ; the value is unchanged.
pub fn total_loss<F: Real>(
    g: &mut Graph<F>,
    terms: &LossTerms<'_>,
    log_sigma: Var,
    detach_sigma_loss: bool,
) -> Result<(Var, LossReport)> {
    let k = terms.dataset.len();
    if g.shape(log_sigma) != [k] {
        return Err(Error::Dimension(format!(
            "log_sigma has shape {:?}, expected [{k}]",
            g.shape(log_sigma)
        )));
    }
    let mut report = LossReport {
        variance: 0.0,
        covariance: 0.0,
        dataset: vec![None; k],
        sigma: Some(g.value(log_sigma).data().iter().map(|v| v.f64().exp()).collect()),
        total: 0.0,
        counts: terms.counts.to_vec(),
    };
    let mut total = g.scalar(F::zero());
    if let Some(v) = terms.variance {
        report.variance = finite(g, v, "variance loss")?;
        total = g.add(total, v)?;
    }
    if let Some(c) = terms.covariance {
        report.covariance = finite(g, c, "covariance loss")?;
        total = g.add(total, c)?;
    }
    for (i, lk) in terms.dataset.iter().enumerate() {
        let Some(lk) = *lk else { continue };
        report.dataset[i] = Some(finite(g, lk, &format!("dataset {i} loss"))?);
        let s = g.select_rows(log_sigma, &[i])?;
        let s = g.reshape(s, &[])?;
        let term = if detach_sigma_loss {
            let s_det = g.detach(s);
            let l_det = g.detach(lk);
            // L·w(σ̄) + L̄·w(σ) − L̄·w(σ̄) keeps the value, splits the gradient
            let w_det = weight(g, s_det);
            let w = weight(g, s);
            let a = g.mul(lk, w_det)?;
            let b = g.mul(l_det, w)?;
            let c = g.mul(l_det, w_det)?;
            let ab = g.add(a, b)?;
            let t = g.sub(ab, c)?;
            g.add(t, s)?
        } else {
            let w = weight(g, s);
            let t = g.mul(lk, w)?;
            g.add(t, s)?
        };
        total = g.add(total, term)?;
    }
    report.total = finite(g, total, "total loss")?;
    Ok((total, report))
}

/// `1 / (2σ²)` from `log σ`.
fn weight<F: Real>(g: &mut Graph<F>, log_sigma: Var) -> Var {
    let e = g.scale(log_sigma, F::of(-2.0));
    let e = g.exp(e);
    g.scale(e, F::of(0.5))
}

/// Unweighted `Σ_k L_k`, the plain cross-entropy objective.
pub fn plain_sum_loss<F: Real>(
    g: &mut Graph<F>,
    dataset: &[Option<Var>],
    counts: &[usize],
) -> Result<(Var, LossReport)> {
    let mut report = LossReport {
        variance: 0.0,
        covariance: 0.0,
        dataset: vec![None; dataset.len()],
        sigma: None,
        total: 0.0,
        counts: counts.to_vec(),
    };
    let mut total = g.scalar(F::zero());
    for (i, lk) in dataset.iter().enumerate() {
        if let Some(lk) = *lk {
            report.dataset[i] = Some(finite(g, lk, &format!("dataset {i} loss"))?);
            total = g.add(total, lk)?;
        }
    }
    report.total = finite(g, total, "total loss")?;
    Ok((total, report))
}

/// One row of a projection inspection table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProjectionPair {
    pub source: String,
    pub target: String,
    pub source_index: usize,
    pub target_index: usize,
    pub weight: f64,
}

/// The `n` largest entries of `W_{src,dst}`, descending, ties by
/// `(row, col)` ascending.
pub fn top_projection_pairs<F: Real>(
    store: &ParamStore<F>,
    bank: &ProjectionBank,
    src: usize,
    dst: usize,
    n: usize,
    source_names: &[String],
    target_names: &[String],
) -> Result<Vec<ProjectionPair>> {
    if n == 0 {
        return Err(Error::Contract("top_projection_pairs needs n >= 1".into()));
    }
    let w = store.get(bank.pair(src, dst)?);
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    let mut order: Vec<usize> = (0..rows * cols).collect();
    let data = w.data();
    order.sort_by(|&a, &b| {
        data[b]
            .partial_cmp(&data[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let name = |names: &[String], i: usize| names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
    Ok(order
        .into_iter()
        .take(n)
        .map(|flat| {
            let (r, c) = (flat / cols, flat % cols);
            ProjectionPair {
                source: name(source_names, c),
                target: name(target_names, r),
                source_index: c,
                target_index: r,
                weight: data[flat].f64(),
            }
        })
        .collect())
}

/// For each source class (column of `W_{src,dst}`), the target class with
/// the largest weight; ties go to the lowest index.
pub fn argmax_targets<F: Real>(
    store: &ParamStore<F>,
    bank: &ProjectionBank,
    src: usize,
    dst: usize,
) -> Result<Vec<usize>> {
    let w = store.get(bank.pair(src, dst)?);
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    Ok((0..cols)
        .map(|c| {
            let mut best = 0;
            for r in 1..rows {
                if w.data()[r * cols + c] > w.data()[best * cols + c] {
                    best = r;
                }
            }
            best
        })
        .collect())
}

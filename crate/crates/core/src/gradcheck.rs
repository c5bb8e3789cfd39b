//! Central-difference gradient checks in 64-bit precision.

use serde::Serialize;

use crate::autograd::{Conv3dSpec, Graph, Var};
use crate::config::{LossConfig, TrainMode};
use crate::error::Result;
use crate::losses::{
    covariance_loss, dataset_ce_loss, informative_loss, project_logits, total_loss, variance_loss, Expander, LossTerms,
    ProjectionBank, VarianceFormula,
};
use crate::mvit::{pooled_attention, Activation, Backbone, BackboneConfig};
use crate::params::{Bound, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{objective, Model};

/// A scalar function of some tensors, built on a fresh graph.
pub type Objective<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

fn eval(f: &Objective<'_>, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.item(out))
}

/// Autodiff gradients of `f` at `inputs`; unused inputs get zeros.
pub fn autodiff(f: &Objective<'_>, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let value = g.item(out);
    g.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((value, grads))
}

/// Largest `|a − n| / max(1, |a|, |n|)` over every input coordinate, with
/// `n = (f(x + h·e) − f(x − h·e)) / 2h`.
pub fn finite_diff_check(f: &Objective<'_>, inputs: &[Tensor<f64>], h: f64) -> Result<f64> {
    finite_diff_check_sampled(f, inputs, h, usize::MAX, 0)
}

/// Like [`finite_diff_check`] but probes at most `per_input` coordinates of
/// each input, chosen from `seed`.
pub fn finite_diff_check_sampled(
    f: &Objective<'_>,
    inputs: &[Tensor<f64>],
    h: f64,
    per_input: usize,
    seed: u64,
) -> Result<f64> {
    let (_, grads) = autodiff(f, inputs)?;
    let mut rng = Rng::new(seed, 0x6C);
    let mut worst = 0.0f64;
    let mut probe = inputs.to_vec();
    for (i, t) in inputs.iter().enumerate() {
        let coords: Vec<usize> = if t.len() <= per_input {
            (0..t.len()).collect()
        } else {
            (0..per_input).map(|_| rng.below(t.len())).collect()
        };
        for j in coords {
            let x = t.data()[j];
            probe[i].data_mut()[j] = x + h;
            let up = eval(f, &probe)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval(f, &probe)?;
            probe[i].data_mut()[j] = x;
            let n = (up - down) / (2.0 * h);
            let a = grads[i][j];
            worst = worst.max((a - n).abs() / 1f64.max(a.abs()).max(n.abs()));
        }
    }
    Ok(worst)
}

/// Outcome of one component of [`run_suite`].
#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub component: String,
    pub error: f64,
    pub threshold: f64,
    pub passed: bool,
}

pub const OP_THRESHOLD: f64 = 1e-5;
pub const LOSS_THRESHOLD: f64 = 1e-5;
pub const DEEP_THRESHOLD: f64 = 1e-4;
const H: f64 = 1e-5;

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("shape")
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| 0.5 + rng.uniform()).collect()).expect("shape")
}

/// A single case: name, threshold, objective and inputs.
struct Case<'a> {
    name: &'static str,
    threshold: f64,
    f: Box<Objective<'a>>,
    inputs: Vec<Tensor<f64>>,
}

fn case<'a>(
    name: &'static str,
    threshold: f64,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a,
) -> Case<'a> {
    Case {
        name,
        threshold,
        f: Box::new(f),
        inputs,
    }
}

/// Weighted sum with fixed pseudo-random weights, turning any tensor into a
/// scalar whose gradient exercises every output coordinate.
fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut rng = Rng::new(seed, 0x77);
    let w = g.constant(randn(&mut rng, &shape));
    let m = g.mul(x, w)?;
    Ok(g.sum_all(m))
}

fn op_cases(rng: &mut Rng) -> Vec<Case<'static>> {
    vec![
        case(
            "add",
            OP_THRESHOLD,
            vec![randn(rng, &[2, 3]), randn(rng, &[2, 3])],
            |g, v| {
                let y = g.add(v[0], v[1])?;
                project(g, y, 1)
            },
        ),
        case(
            "sub",
            OP_THRESHOLD,
            vec![randn(rng, &[2, 3]), randn(rng, &[2, 3])],
            |g, v| {
                let y = g.sub(v[0], v[1])?;
                project(g, y, 2)
            },
        ),
        case(
            "mul",
            OP_THRESHOLD,
            vec![randn(rng, &[2, 3]), randn(rng, &[2, 3])],
            |g, v| {
                let y = g.mul(v[0], v[1])?;
                project(g, y, 3)
            },
        ),
        case(
            "add_broadcast",
            OP_THRESHOLD,
            vec![randn(rng, &[2, 3, 4]), randn(rng, &[3, 4])],
            |g, v| {
                let y = g.add_broadcast(v[0], v[1])?;
                project(g, y, 4)
            },
        ),
        case("scale_shift", OP_THRESHOLD, vec![randn(rng, &[5])], |g, v| {
            let y = g.scale(v[0], -1.7);
            let y = g.add_scalar(y, 0.3);
            project(g, y, 5)
        }),
        case(
            "matmul",
            1e-6,
            vec![randn(rng, &[3, 4]), randn(rng, &[4, 2])],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, 6)
            },
        ),
        case(
            "matmul_batched",
            OP_THRESHOLD,
            vec![randn(rng, &[2, 3, 4]), randn(rng, &[2, 4, 2])],
            |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, 7)
            },
        ),
        case("permute_reshape", OP_THRESHOLD, vec![randn(rng, &[2, 3, 4])], |g, v| {
            let y = g.permute(v[0], &[2, 0, 1])?;
            let y = g.reshape(y, &[4, 6])?;
            project(g, y, 8)
        }),
        case(
            "conv3d",
            OP_THRESHOLD,
            vec![randn(rng, &[1, 3, 4, 4, 2]), randn(rng, &[2, 2, 2, 2, 3])],
            |g, v| {
                let y = g.conv3d(v[0], v[1], Conv3dSpec::new([1, 1, 1], [0, 0, 0]))?;
                project(g, y, 9)
            },
        ),
        case(
            "conv3d_depthwise_strided",
            OP_THRESHOLD,
            vec![randn(rng, &[2, 4, 4, 4, 3]), randn(rng, &[3, 3, 3, 1, 3])],
            |g, v| {
                let y = g.conv3d(v[0], v[1], Conv3dSpec::depthwise([2, 2, 1], [1, 1, 1], 3))?;
                project(g, y, 10)
            },
        ),
        case(
            "layer_norm",
            OP_THRESHOLD,
            vec![randn(rng, &[2, 5]), randn(rng, &[5]), randn(rng, &[5])],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-6)?;
                project(g, y, 11)
            },
        ),
        case("softmax", OP_THRESHOLD, vec![randn(rng, &[2, 3, 4])], |g, v| {
            let y = g.softmax(v[0], 1)?;
            project(g, y, 12)
        }),
        case("log_softmax", OP_THRESHOLD, vec![randn(rng, &[3, 5])], |g, v| {
            let y = g.log_softmax(v[0], 1)?;
            project(g, y, 13)
        }),
        case("gelu", OP_THRESHOLD, vec![randn(rng, &[7])], |g, v| {
            let y = g.gelu(v[0]);
            project(g, y, 14)
        }),
        case("exp_ln_sqrt_square", OP_THRESHOLD, vec![positive(rng, &[6])], |g, v| {
            let a = g.exp(v[0]);
            let b = g.ln(v[0]);
            let c = g.sqrt(v[0]);
            let d = g.square(v[0]);
            let ab = g.add(a, b)?;
            let cd = g.add(c, d)?;
            let y = g.mul(ab, cd)?;
            project(g, y, 15)
        }),
        case("sum_mean_axes", OP_THRESHOLD, vec![randn(rng, &[2, 3, 4])], |g, v| {
            let s = g.sum(v[0], &[0, 2])?;
            let m = g.mean(v[0], &[1])?;
            let a = project(g, s, 16)?;
            let b = project(g, m, 17)?;
            g.add(a, b)
        }),
        case("select_rows_pick", OP_THRESHOLD, vec![randn(rng, &[4, 3])], |g, v| {
            let r = g.select_rows(v[0], &[2, 0, 2])?;
            let p = g.pick(r, &[1, 0, 2])?;
            project(g, p, 18)
        }),
    ]
}

fn loss_cases(rng: &mut Rng) -> Vec<Case<'static>> {
    let mut cases = vec![
        case("variance_loss", LOSS_THRESHOLD, vec![randn(rng, &[6, 4])], |g, v| {
            // shrink so that some per-dimension stds fall below the hinge
            let z = g.scale(v[0], 0.6);
            variance_loss(g, z, 1e-4, VarianceFormula::Vicreg)
        }),
        case("covariance_loss", LOSS_THRESHOLD, vec![randn(rng, &[6, 4])], |g, v| {
            covariance_loss(g, v[0])
        }),
        case("dataset_ce_loss", LOSS_THRESHOLD, vec![randn(rng, &[4, 3])], |g, v| {
            Ok(dataset_ce_loss(g, Some(v[0]), &[0, 2, 1, 2])?.expect("samples"))
        }),
    ];
    // projection logits + CE: grads reach W, head i and head k together
    let mut store = ParamStore::<f64>::new();
    let bank = ProjectionBank::new(&mut store, &[3, 2]);
    let w01 = randn(rng, &[2, 3]);
    let w10 = randn(rng, &[3, 2]);
    cases.push(case(
        "projection_ce_loss",
        LOSS_THRESHOLD,
        vec![randn(rng, &[4, 3]), randn(rng, &[4, 2]), w01, w10],
        move |g, v| {
            let p = Bound::from_vars(vec![v[2], v[3]]);
            let y = project_logits(g, &p, 1, &[Some(v[0]), Some(v[1])], &bank)?;
            Ok(dataset_ce_loss(g, Some(y), &[1, 0, 0, 1])?.expect("samples"))
        },
    ));
    // σ-weighted total on a 4-sample batch drawn from 2 datasets
    cases.push(case(
        "total_loss",
        LOSS_THRESHOLD,
        vec![randn(rng, &[4, 3]), randn(rng, &[4, 3]), randn(rng, &[2])],
        |g, v| {
            let (lv, lc) = informative_loss(g, v[0], 1e-4, VarianceFormula::Vicreg)?;
            let y0 = g.select_rows(v[1], &[0, 1])?;
            let y1 = g.select_rows(v[1], &[2, 3])?;
            let l0 = dataset_ce_loss(g, Some(y0), &[2, 0])?;
            let l1 = dataset_ce_loss(g, Some(y1), &[1, 1])?;
            let terms = LossTerms {
                variance: Some(lv),
                covariance: Some(lc),
                dataset: &[l0, l1],
                counts: &[2, 2],
            };
            Ok(total_loss(g, &terms, v[2], false)?.0)
        },
    ));
    let mut store = ParamStore::<f64>::new();
    let expander = Expander::new(&mut store, &mut Rng::new(5, 1), 4, 8);
    let mut inputs = vec![randn(rng, &[5, 4])];
    inputs.extend(store.iter().map(|p| p.value.clone()));
    for t in inputs.iter_mut().skip(1) {
        let noise = randn(rng, t.shape());
        t.data_mut()
            .iter_mut()
            .zip(noise.data())
            .for_each(|(a, b)| *a += 0.5 * b);
    }
    cases.push(case(
        "expander_informative_loss",
        LOSS_THRESHOLD,
        inputs,
        move |g, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            let z = expander.forward(g, &p, v[0])?;
            let (lv, lc) = informative_loss(g, z, 1e-4, VarianceFormula::Vicreg)?;
            g.add(lv, lc)
        },
    ));
    cases
}

/// Parameters of `store` jittered so zero and identity inits do not hide
/// gradient paths.
fn jittered(store: &ParamStore<f64>, rng: &mut Rng, scale: f64) -> Vec<Tensor<f64>> {
    store
        .iter()
        .map(|p| {
            let mut t = p.value.clone();
            t.data_mut().iter_mut().for_each(|v| *v += scale * rng.normal());
            t
        })
        .collect()
}

fn deep_cases(rng: &mut Rng) -> Result<Vec<Case<'static>>> {
    let cfg = BackboneConfig::tiny();
    let mut cases = Vec::new();

    // attention alone on an 8-token, 8-channel grid with 2 heads
    let mut store = ParamStore::<f64>::new();
    let bb = Backbone::new(&mut store, &mut Rng::new(11, 0), &cfg)?;
    let attn = bb.blocks[0].attn;
    let mut inputs = vec![randn(rng, &[2, 8, 8])];
    inputs.extend(jittered(&store, rng, 0.3));
    cases.push(case("pooled_attention", DEEP_THRESHOLD, inputs, move |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let x = Activation {
            var: v[0],
            grid: [2, 2, 2],
        };
        let out = pooled_attention(g, &p, &attn, x, [1, 1, 1], [1, 2, 2])?;
        project(g, out.var, 21)
    }));

    // one full block with a query stride
    let block = bb.blocks[1];
    let mut inputs = vec![randn(rng, &[2, 8, 8])];
    inputs.extend(jittered(&store, rng, 0.3));
    cases.push(case("mvit_block", DEEP_THRESHOLD, inputs, move |g, v| {
        let p = Bound::from_vars(v[1..].to_vec());
        let x = Activation {
            var: v[0],
            grid: [2, 2, 2],
        };
        let out = block.forward(g, &p, x)?;
        project(g, out.var, 22)
    }));

    // backbone, heads, projections, expander and σ-weighted total
    let classes = [3, 2];
    let loss = LossConfig {
        expander_hidden: 8,
        ..LossConfig::default()
    };
    let model = Model::<f64>::new(&cfg, &loss, &classes, 13)?;
    let mut inputs = jittered(&model.store, rng, 0.2);
    let clips = {
        let mut t = Tensor::<f64>::zeros(&[4, 4, 4, 4, 1]);
        t.data_mut().iter_mut().for_each(|v| *v = rng.uniform());
        t
    };
    inputs.push(clips);
    let arch = model.arch;
    let n = inputs.len() - 1;
    cases.push(case("backbone_total_loss", DEEP_THRESHOLD, inputs, move |g, v| {
        let p = Bound::from_vars(v[..n].to_vec());
        let (l, _) = objective(g, &arch, &p, v[n], &[0, 1, 0, 1], &[2, 1, 0, 0], TrainMode::Full, &loss)?;
        Ok(l)
    }));
    Ok(cases)
}

/// Runs every component check. `threshold` overrides all per-component
/// thresholds when given.
pub fn run_suite(threshold: Option<f64>) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(2024, 0x9C);
    let mut cases = op_cases(&mut rng);
    cases.extend(loss_cases(&mut rng));
    cases.extend(deep_cases(&mut rng)?);
    let mut out = Vec::with_capacity(cases.len());
    for c in &cases {
        let error = finite_diff_check(&*c.f, &c.inputs, H)?;
        let threshold = threshold.unwrap_or(c.threshold);
        out.push(CheckResult {
            component: c.name.to_string(),
            error,
            threshold,
            passed: error < threshold,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let mut rng = Rng::new(1, 1);
        let x = randn(&mut rng, &[3, 4]);
        let f = |g: &mut Graph<f64>, v: &[Var]| Ok(g.sum_all(v[0]));
        assert!(finite_diff_check(&f, &[x], 1e-5).unwrap() <= 1e-10);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // detach hides the dependency from autodiff but not from the probe
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let d = g.detach(v[0]);
            let s = g.square(d);
            Ok(g.sum_all(s))
        };
        let x = Tensor::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        assert!(finite_diff_check(&f, &[x], 1e-5).unwrap() > 0.5);
    }
}

//! Central finite differences against reverse-mode gradients, in f64.
//! Every case reports its worst relative error instead of asserting, so the
//! same list serves the unit checks and the acceptance report.

use deepsic_core::networks::{Model, RateConfig, RatePreset, Variant};
use deepsic_core::nn::{BnMode, Graph, ParamId, Var};
use deepsic_core::rng::{seeded, standard_normal};
use deepsic_core::training::{TrainConfig, Trainer};
use deepsic_core::Tensor;

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-3;

/// Case name and worst relative error over its parameters.
pub type Outcome = (String, f64);

fn randn(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| scale * standard_normal(&mut rng))
}

/// Values bounded away from zero so leaky-relu kinks stay out of reach.
fn away_from_zero(shape: &[usize], seed: u64) -> Tensor<f64> {
    randn(shape, seed, 1.0).map(|v| if v >= 0.0 { v + 0.1 } else { v - 0.1 })
}

/// Checks `d build / d params` for every parameter. `build` maps the bound
/// parameter vars to a scalar loss.
fn check<F>(name: &str, params: Vec<Tensor<f64>>, build: F) -> Outcome
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |ps: &[Tensor<f64>]| -> (Graph<f64>, Var) {
        let mut g = Graph::training();
        let vars: Vec<Var> = ps
            .iter()
            .enumerate()
            .map(|(i, p)| g.param(ParamId::weight(i), p.clone()))
            .collect();
        let loss = build(&mut g, &vars);
        (g, loss)
    };
    let (g, loss) = eval(&params);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get(ParamId::weight(pi)).unwrap();
        let mut numeric = vec![0.0; p.len()];
        for (k, num) in numeric.iter_mut().enumerate() {
            let mut plus = params.clone();
            plus[pi].data_mut()[k] += H;
            let mut minus = params.clone();
            minus[pi].data_mut()[k] -= H;
            let (gp, lp) = eval(&plus);
            let (gm, lm) = eval(&minus);
            *num = (gp.value(lp).data()[0] - gm.value(lm).data()[0]) / (2.0 * H);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        // Exactly-zero gradients (a bias cancelled by batchnorm) only see FD noise.
        worst = worst.max(diff / na.max(nn).max(1e-6));
    }
    (name.to_string(), worst)
}

/// Scalar projection `Σ y ⊙ r` with a fixed random `r`.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let r = randn(g.value(y).shape(), seed, 1.0);
    let rv = g.input(r);
    let p = g.mul(y, rv).unwrap();
    g.sum(p)
}

pub fn conv() -> Vec<Outcome> {
    let mut out = Vec::new();
    for (k, s) in [(3, 1), (5, 2), (7, 4), (1, 1)] {
        let x = randn(&[2, 3, 9, 7], 1, 1.0);
        let w = randn(&[4, 3, k, k], 2, 0.3);
        let b = randn(&[4], 3, 0.1);
        out.push(check(&format!("conv k{k} s{s}"), vec![x, w, b], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], s).unwrap();
            project(g, y, 4)
        }));
    }
    out
}

pub fn conv_transpose() -> Vec<Outcome> {
    let mut out = Vec::new();
    for (k, s) in [(3, 1), (3, 2), (5, 2), (7, 4)] {
        let x = randn(&[2, 3, 4, 5], 5, 1.0);
        let w = randn(&[3, 2, k, k], 6, 0.3);
        let b = randn(&[2], 7, 0.1);
        out.push(check(&format!("deconv k{k} s{s}"), vec![x, w, b], |g, v| {
            let y = g.conv_transpose2d(v[0], v[1], v[2], s).unwrap();
            project(g, y, 8)
        }));
    }
    out
}

pub fn batchnorm() -> Vec<Outcome> {
    let x = randn(&[3, 4, 3, 3], 9, 2.0);
    let gamma = randn(&[4], 10, 1.0);
    let beta = randn(&[4], 11, 1.0);
    let rm = randn(&[4], 12, 0.5);
    let rv = randn(&[4], 13, 1.0).map(|v| v.abs() + 0.5);
    [BnMode::Train, BnMode::Infer]
        .into_iter()
        .map(|mode| {
            check(
                &format!("batchnorm {mode:?}"),
                vec![x.clone(), gamma.clone(), beta.clone()],
                |g, v| {
                    let (y, _) = g.batch_norm(v[0], v[1], v[2], mode, (&rm, &rv)).unwrap();
                    project(g, y, 14)
                },
            )
        })
        .collect()
}

pub fn fully_connected() -> Vec<Outcome> {
    let x = randn(&[3, 5], 15, 1.0);
    let w = randn(&[4, 5], 16, 0.5);
    let b = randn(&[4], 17, 0.1);
    vec![check("linear", vec![x, w, b], |g, v| {
        let y = g.linear(v[0], v[1], v[2]).unwrap();
        project(g, y, 18)
    })]
}

pub fn elementwise_and_pooling() -> Vec<Outcome> {
    let x = away_from_zero(&[2, 3, 4, 4], 19);
    let t = randn(&[2, 3, 4, 4], 23, 1.0);
    vec![
        check("leaky relu", vec![x.clone()], |g, v| {
            let y = g.leaky_relu(v[0], 0.2);
            project(g, y, 20)
        }),
        check("upsample", vec![x.clone()], |g, v| {
            let y = g.upsample_nearest(v[0], 2).unwrap();
            project(g, y, 21)
        }),
        check("global pool", vec![x.clone()], |g, v| {
            let y = g.global_avg_pool(v[0]).unwrap();
            project(g, y, 22)
        }),
        check("mse", vec![x.clone(), t], |g, v| g.mse(v[0], v[1]).unwrap()),
        check(
            "add/mul/scale",
            vec![x.clone(), randn(&[2, 3, 4, 4], 24, 1.0)],
            |g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let m = g.mul(a, v[0]).unwrap();
                let s = g.scale(m, 0.7);
                project(g, s, 25)
            },
        ),
        check("clamp inside range", vec![x.map(|v| v * 0.5)], |g, v| {
            let y = g.clamp(v[0], -4.0, 4.0);
            project(g, y, 26)
        }),
    ]
}

pub fn cross_entropy() -> Vec<Outcome> {
    let logits = randn(&[4, 6], 27, 2.0);
    vec![check("softmax cross entropy", vec![logits], |g, v| {
        g.softmax_cross_entropy(v[0], &[0, 5, 2, 2]).unwrap()
    })]
}

/// Feature values whose ±step/2 bins straddle a density knot, with both
/// edges kept clear of it so the rate is smooth under small perturbations.
fn straddling_features(shape: &[usize], seed: u64, step: f64) -> Tensor<f64> {
    let knot = 0.25;
    let margin = 0.002;
    let mut rng = seeded(seed);
    Tensor::from_fn(shape, |_| {
        let cell = (standard_normal(&mut rng) * 4.0).round().clamp(-14.0, 14.0);
        let u = margin + (step / 2.0 - 2.0 * margin) * rand::Rng::gen::<f64>(&mut rng);
        let sign = if rand::Rng::gen::<bool>(&mut rng) { 1.0 } else { -1.0 };
        cell * knot + sign * u
    })
}

pub fn rate_term() -> Vec<Outcome> {
    let step = 1.0 / 32.0;
    let y = straddling_features(&[2, 3, 3, 4], 28, step);
    let logits = randn(&[3, 32], 29, 1.0);
    vec![check("rate term", vec![y, logits], |g, v| {
        g.density_rate(v[0], v[1], step).unwrap()
    })]
}

pub fn small_network() -> Vec<Outcome> {
    let x = randn(&[2, 3, 8, 8], 30, 1.0);
    let w1 = randn(&[4, 3, 3, 3], 31, 0.4);
    let b1 = randn(&[4], 32, 0.1);
    let gamma = randn(&[4], 33, 1.0);
    let beta = randn(&[4], 34, 0.5);
    let w2 = randn(&[5, 4, 3, 3], 35, 0.4);
    let b2 = randn(&[5], 36, 0.1);
    let w3 = randn(&[3, 5], 37, 0.5);
    let b3 = randn(&[3], 38, 0.1);
    let dummy = Tensor::zeros(&[4]);
    vec![check(
        "conv-bn-leaky-conv-pool-linear",
        vec![x, w1, b1, gamma, beta, w2, b2, w3, b3],
        |g, v| {
            let h = g.conv2d(v[0], v[1], v[2], 2).unwrap();
            let (h, _) = g.batch_norm(h, v[3], v[4], BnMode::Train, (&dummy, &dummy)).unwrap();
            let h = g.leaky_relu(h, 0.2);
            let h = g.conv2d(h, v[5], v[6], 1).unwrap();
            let h = g.global_avg_pool(h).unwrap();
            let l = g.linear(h, v[7], v[8]).unwrap();
            g.softmax_cross_entropy(l, &[1, 2]).unwrap()
        },
    )]
}

/// Full objective on a tiny f64 model with the quantizer bypassed, sampled
/// over a few coordinates of every layer.
pub fn full_objective() -> Vec<Outcome> {
    let cfg = RateConfig::preset(RatePreset::Lo).with_channels(2);
    let model = Model::<f64>::new(cfg, 3, &mut seeded(40)).unwrap();
    let tc = TrainConfig {
        batch: 2,
        bypass_quantizer: true,
        variant: Variant::PreSemantic,
        lambda1: 50.0,
        lambda2: 1.0,
        ..TrainConfig::default()
    };
    let images = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 37) % 101) as f64 / 100.0);
    let labels = [0, 2];
    let loss_of = |m: &Model<f64>| {
        let mut t = Trainer::new(m.clone(), tc);
        t.evaluate(&images, &labels).unwrap().total
    };
    let grads = gradient_via_graph(&model, &images, &labels, tc);
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (li, layer) in model.layers().iter().enumerate() {
        for (slot, tensor) in [(ParamId::weight(li), &layer.weight), (ParamId::bias(li), &layer.bias)] {
            let Some(g) = grads.iter().find(|(id, _)| *id == slot).map(|(_, g)| g) else {
                continue;
            };
            for k in (0..tensor.len()).step_by((tensor.len() / 3).max(1)).take(3) {
                let mut plus = model.clone();
                let mut minus = model.clone();
                bump(&mut plus, slot, k, H);
                bump(&mut minus, slot, k, -H);
                let num = (loss_of(&plus) - loss_of(&minus)) / (2.0 * H);
                let a = g.data()[k];
                worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(1e-3));
                checked += 1;
            }
        }
    }
    let worst = if checked > 40 { worst } else { f64::INFINITY };
    vec![(format!("full objective, {checked} sampled coordinates"), worst)]
}

fn bump(m: &mut Model<f64>, id: ParamId, k: usize, by: f64) {
    let l = &mut m.layers_mut()[id.layer];
    l.param_mut(id.slot).data_mut()[k] += by;
}

fn gradient_via_graph(
    model: &Model<f64>,
    images: &Tensor<f64>,
    labels: &[usize],
    tc: TrainConfig,
) -> Vec<(ParamId, Tensor<f64>)> {
    let mut g = Graph::training();
    let mut log = Vec::new();
    let x = g.input(images.clone());
    let y = model.encoder_graph(&mut g, x, BnMode::Train, &mut log).unwrap();
    let yc = g.clamp(y, -4.0, 4.0);
    let xh = model.decoder_graph(&mut g, yc).unwrap();
    let d = g.mse(xh, x).unwrap();
    let dens = model.density_graph(&mut g);
    let r = g.density_rate(yc, dens, 1.0 / 32.0).unwrap();
    let logits = model.head_graph(&mut g, yc, BnMode::Train, &mut log).unwrap();
    let s = g.softmax_cross_entropy(logits, labels).unwrap();
    let wd = g.scale(d, tc.lambda1);
    let ws = g.scale(s, tc.lambda2);
    let a = g.add(r, wd).unwrap();
    let l = g.add(a, ws).unwrap();
    let grads = g.backward(l).unwrap();
    grads.iter().map(|(id, t)| (*id, t.clone())).collect()
}

/// Every case, layer kinds first.
pub fn all() -> Vec<Outcome> {
    [
        conv(),
        conv_transpose(),
        batchnorm(),
        fully_connected(),
        elementwise_and_pooling(),
        cross_entropy(),
        rate_term(),
        small_network(),
        full_objective(),
    ]
    .concat()
}

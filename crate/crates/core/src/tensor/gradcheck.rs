//! Central-difference gradient checks.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::BoundParams;
use super::{Graph, ParamStore, Tensor, TensorError, Var};

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

fn scalar_of<E: From<TensorError>>(g: &Graph, v: Var) -> Result<f64, E> {
    let t = g.value(v);
    if t.len() != 1 {
        return Err(TensorError::NonScalarLoss(t.shape().to_vec()).into());
    }
    Ok(t.item())
}

/// Max over coordinates of `|analytic - numeric| / max(1, |numeric|)` for a
/// scalar function of one tensor, using `(f(x+h) - f(x-h)) / 2h`.
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64) -> Result<f64, E>
where
    F: Fn(&Graph, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    let g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(&g, xv)?;
    g.backward(loss)?;
    let analytic = g.grad(xv).expect("leaf gradient");

    let eval = |xp: Tensor| -> Result<f64, E> {
        let g = Graph::new();
        let v = g.constant(xp);
        let out = f(&g, v)?;
        scalar_of(&g, out)
    };
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[i], numeric));
    }
    Ok(worst)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
}

/// Gradient check over the parameters of a model. With `per_param = (n,
/// seed)`, checks up to `n` coordinates of every parameter, drawn without
/// replacement from a seeded stream; otherwise checks every coordinate.
pub fn grad_check_params<F, E>(
    params: &ParamStore,
    f: F,
    h: f64,
    per_param: Option<(usize, u64)>,
) -> Result<GradCheckReport, E>
where
    F: Fn(&Graph, &BoundParams) -> Result<Var, E>,
    E: From<TensorError>,
{
    let g = Graph::new();
    let bound = params.bind(&g);
    let loss = f(&g, &bound)?;
    g.backward(loss)?;
    let grads = bound.grads(&g);

    let mut rng = per_param.map(|(_, seed)| ChaCha8Rng::seed_from_u64(seed));
    let mut chosen: Vec<(String, usize)> = Vec::new();
    for (name, t) in params.iter() {
        match (per_param, rng.as_mut()) {
            (Some((n, _)), Some(rng)) if n < t.len() => {
                let mut idx = sample(rng, t.len(), n).into_vec();
                idx.sort_unstable();
                chosen.extend(idx.into_iter().map(|i| (name.clone(), i)));
            }
            _ => chosen.extend((0..t.len()).map(|i| (name.clone(), i))),
        }
    }

    let eval = |p: &ParamStore| -> Result<f64, E> {
        let g = Graph::new();
        let bound = p.bind_frozen(&g);
        let out = f(&g, &bound)?;
        scalar_of(&g, out)
    };
    let mut worst = 0.0f64;
    let mut worst_at = None;
    let mut work = params.clone();
    for (name, i) in &chosen {
        let orig = work.get(name).unwrap().data()[*i];
        work.get_mut(name).unwrap().data_mut()[*i] = orig + h;
        let fp = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[*i] = orig - h;
        let fm = eval(&work)?;
        work.get_mut(name).unwrap().data_mut()[*i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads.get(name).map_or(0.0, |t| t.data()[*i]);
        let e = rel_err(analytic, numeric);
        if e > worst || worst_at.is_none() {
            worst = worst.max(e);
            worst_at = Some((name.clone(), *i));
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        worst: worst_at,
        coords_checked: chosen.len(),
    })
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// Reduces any output to a scalar with fixed random weights, so every output
/// coordinate contributes a distinct gradient.
fn probe(g: &Graph, y: Var, seed: u64) -> Result<Var, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_tensor(&mut rng, g.shape(y));
    let wv = g.constant(w);
    let p = g.mul(y, wv)?;
    Ok(g.sum(p))
}

fn check(
    h: f64,
    x: &Tensor,
    f: impl Fn(&Graph, Var) -> Result<Var, TensorError>,
) -> Result<f64, TensorError> {
    grad_check(|g, v| probe(g, f(g, v)?, 99), x, h)
}

/// Relative gradient error of every primitive op, per differentiable input,
/// on seeded random inputs kept away from kinks and ties.
pub fn primitive_grad_checks(seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rand_tensor(&mut rng, vec![4, 3]);
    let b = rand_tensor(&mut rng, vec![3, 5]);
    let bias = rand_tensor(&mut rng, vec![3]);
    let mut results = Vec::new();

    let bc = b.clone();
    results.push((
        "matmul.lhs",
        check(h, &a, move |g, x| {
            let w = g.constant(bc.clone());
            g.matmul(x, w)
        }),
    ));
    let ac = a.clone();
    results.push((
        "matmul.rhs",
        check(h, &b, move |g, x| {
            let l = g.constant(ac.clone());
            g.matmul(l, x)
        }),
    ));
    let bc = bias.clone();
    results.push((
        "add.broadcast.lhs",
        check(h, &a, move |g, x| {
            let b = g.constant(bc.clone());
            g.add(x, b)
        }),
    ));
    let ac = a.clone();
    results.push((
        "add.broadcast.rhs",
        check(h, &bias, move |g, x| {
            let l = g.constant(ac.clone());
            g.add(l, x)
        }),
    ));
    results.push(("mul", check(h, &a, |g, x| g.mul(x, x))));
    results.push(("scale", check(h, &a, |g, x| Ok(g.scale(x, -2.5)))));
    results.push(("sum", check(h, &a, |g, x| Ok(g.sum(x)))));
    // Keep relu inputs away from the kink.
    let shifted = Tensor::new(
        a.shape().to_vec(),
        a.data()
            .iter()
            .map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v })
            .collect(),
    )
    .unwrap();
    results.push(("relu", check(h, &shifted, |g, x| Ok(g.relu(x)))));
    results.push(("softmax.axis1", check(h, &a, |g, x| g.softmax(x, 1))));
    results.push(("softmax.axis0", check(h, &a, |g, x| g.softmax(x, 0))));
    results.push(("transpose", check(h, &a, |g, x| g.transpose(x))));
    results.push(("reshape", check(h, &a, |g, x| g.reshape(x, vec![2, 6]))));
    results.push(("gather", check(h, &a, |g, x| g.gather(x, &[3, 0, 0, 2]))));
    results.push((
        "masked_fill",
        check(h, &a, |g, x| {
            let mask: Vec<bool> = (0..12).map(|i| i % 3 == 1).collect();
            g.masked_fill(x, &mask, -3.0)
        }),
    ));
    let ac = a.clone();
    results.push((
        "concat.axis1",
        check(h, &a, move |g, x| {
            let other = g.constant(ac.clone());
            g.concat(&[other, x, x], 1)
        }),
    ));
    results.push(("concat.axis0", check(h, &a, |g, x| g.concat(&[x, x], 0))));
    results.push((
        "weighted_rows",
        check(h, &a, |g, x| {
            g.weighted_rows(x, &[0, 1, 2, 3, 3, 1], &[0.2, 0.5, 0.3, 0.6, 0.1, 0.3], 3)
        }),
    ));
    // Distinct values per segment so the argmax is stable under perturbation.
    let distinct = Tensor::new(
        vec![5, 2],
        (0..10)
            .map(|i| ((i * 7) % 10) as f64 * 0.1 + rng.gen_range(0.0..0.01))
            .collect(),
    )
    .unwrap();
    results.push((
        "max_over_segments",
        check(h, &distinct, |g, x| {
            g.max_over_segments(x, &[1, 0, 1, 2, 1], 3)
        }),
    ));

    let gamma = rand_tensor(&mut rng, vec![3]);
    let beta = rand_tensor(&mut rng, vec![3]);
    let (gc, bc) = (gamma.clone(), beta.clone());
    results.push((
        "layer_norm.x",
        check(h, &a, move |g, x| {
            let (gm, bt) = (g.constant(gc.clone()), g.constant(bc.clone()));
            g.layer_norm(x, gm, bt, 1e-5)
        }),
    ));
    let (ac, bc) = (a.clone(), beta.clone());
    results.push((
        "layer_norm.gamma",
        check(h, &gamma, move |g, x| {
            let (xa, bt) = (g.constant(ac.clone()), g.constant(bc.clone()));
            g.layer_norm(xa, x, bt, 1e-5)
        }),
    ));
    let (ac, gc) = (a.clone(), gamma.clone());
    results.push((
        "layer_norm.beta",
        check(h, &beta, move |g, x| {
            let (xa, gm) = (g.constant(ac.clone()), g.constant(gc.clone()));
            g.layer_norm(xa, gm, x, 1e-5)
        }),
    ));

    let seq = rand_tensor(&mut rng, vec![2, 5, 3]);
    let cw = rand_tensor(&mut rng, vec![4, 3, 3]);
    let cb = rand_tensor(&mut rng, vec![4]);
    let (wc, bc) = (cw.clone(), cb.clone());
    results.push((
        "conv1d.x",
        check(h, &seq, move |g, x| {
            let (w, b) = (g.constant(wc.clone()), g.constant(bc.clone()));
            g.conv1d(x, w, b)
        }),
    ));
    let (sc, bc) = (seq.clone(), cb.clone());
    results.push((
        "conv1d.w",
        check(h, &cw, move |g, x| {
            let (s, b) = (g.constant(sc.clone()), g.constant(bc.clone()));
            g.conv1d(s, x, b)
        }),
    ));
    let (sc, wc) = (seq.clone(), cw.clone());
    results.push((
        "conv1d.bias",
        check(h, &cb, move |g, x| {
            let (s, w) = (g.constant(sc.clone()), g.constant(wc.clone()));
            g.conv1d(s, w, x)
        }),
    ));

    let hid = 3;
    let w_ih = rand_tensor(&mut rng, vec![3, 4 * hid]);
    let w_hh = rand_tensor(&mut rng, vec![hid, 4 * hid]);
    let lb = rand_tensor(&mut rng, vec![4 * hid]);
    let lstm_inputs = [seq.clone(), w_ih.clone(), w_hh.clone(), lb.clone()];
    for (slot, name) in ["lstm.x", "lstm.w_ih", "lstm.w_hh", "lstm.bias"]
        .iter()
        .enumerate()
    {
        let fixed = lstm_inputs.clone();
        let err = check(h, &lstm_inputs[slot], move |g, x| {
            let vars: Vec<Var> = (0..4)
                .map(|i| {
                    if i == slot {
                        x
                    } else {
                        g.constant(fixed[i].clone())
                    }
                })
                .collect();
            g.lstm_sequence(vars[0], vars[1], vars[2], vars[3])
        });
        results.push((*name, err));
    }

    let logits = rand_tensor(&mut rng, vec![6, 4]);
    results.push((
        "cross_entropy",
        grad_check(
            |g: &Graph, x| {
                g.cross_entropy(x, &[0, 3, 1, 1, 2, 0], &[1.0, 10.0, 1.0, 1.0, 10.0, 1.0])
            },
            &logits,
            h,
        ),
    ));
    let (bc, lc) = (b.clone(), rand_tensor(&mut rng, vec![5]));
    let lcc = lc.clone();
    results.push((
        "linear.x",
        check(h, &a, move |g, x| {
            let (w, b) = (g.constant(bc.clone()), g.constant(lcc.clone()));
            g.linear(x, w, b)
        }),
    ));
    let ac = a.clone();
    results.push((
        "linear.w",
        check(h, &b, move |g, x| {
            let (xa, b) = (g.constant(ac.clone()), g.constant(lc.clone()));
            g.linear(xa, x, b)
        }),
    ));
    results
        .into_iter()
        .map(|(name, r)| r.map(|e| (name, e)))
        .collect()
}

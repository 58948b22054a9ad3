use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

const H: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn relu_values() {
    let g = Graph::new();
    let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
    assert_eq!(g.value(g.relu(x)).data(), &[0.0, 0.0, 2.0]);
}

#[test]
fn softmax_symmetric() {
    let g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);
}

#[test]
fn max_over_segments_values() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 0.0]]).unwrap());
    let y = g.max_over_segments(x, &[0, 0], 1).unwrap();
    assert_eq!(g.value(y).shape(), &[1, 2]);
    assert_eq!(g.value(y).data(), &[3.0, 2.0]);
}

#[test]
fn max_over_segments_rejects_empty_segment() {
    let g = Graph::new();
    let x = g.constant(Tensor::from_rows(&[vec![1.0], vec![2.0]]).unwrap());
    assert!(matches!(
        g.max_over_segments(x, &[0, 2], 3),
        Err(TensorError::EmptySegment { segment: 1, .. })
    ));
}

#[test]
fn backward_sum_of_squares() {
    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
}

#[test]
fn unused_leaf_gets_zero_grad() {
    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    let y = g.param(Tensor::vector(vec![3.0]));
    let loss = g.sum(x);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(y).unwrap().data(), &[0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![1.0, 2.0]));
    assert_eq!(g.backward(x), Err(TensorError::NonScalarLoss(vec![2])));
}

#[test]
fn fan_out_accumulates() {
    // loss = sum(3x) + sum(x * x): two branches through x, d/dx = 3 + 2x.
    let g = Graph::new();
    let x = g.param(Tensor::vector(vec![0.5, -1.0]));
    let a = g.scale(x, 3.0);
    let b = g.mul(x, x).unwrap();
    let sa = g.sum(a);
    let sb = g.sum(b);
    let both = g.concat(&[sa, sb], 0);
    assert!(both.is_err(), "scalars have no axis to concatenate");
    let stacked = g.add(sa, sb).unwrap();
    g.backward(stacked).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[4.0, 1.0]);
}

#[test]
fn shape_errors_name_the_op() {
    let g = Graph::new();
    let a = g.constant(Tensor::zeros(vec![2, 3]));
    let b = g.constant(Tensor::zeros(vec![2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().starts_with("matmul"), "{err}");
    let c = g.constant(Tensor::zeros(vec![4]));
    assert!(g.add(a, c).unwrap_err().to_string().starts_with("add"));
}

#[test]
fn grad_check_square() {
    let err = grad_check(
        |g: &Graph, x| -> Result<Var, TensorError> {
            let sq = g.mul(x, x)?;
            Ok(g.sum(sq))
        },
        &Tensor::vector(vec![3.0]),
        1e-5,
    )
    .unwrap();
    assert!(err <= 1e-8, "{err}");
}

#[test]
fn grad_check_softmax_cross_entropy() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = rand_tensor(&mut rng, vec![6, 4]);
    let targets = [0, 3, 1, 1, 2, 0];
    let weights = [1.0, 10.0, 1.0, 1.0, 10.0, 1.0];
    let err = grad_check(
        |g: &Graph, x| g.cross_entropy(x, &targets, &weights),
        &logits,
        H,
    )
    .unwrap();
    assert!(err <= TOL, "{err}");
}

#[test]
fn grad_check_primitives() {
    let results = primitive_grad_checks(1, H).unwrap();
    assert_eq!(results.len(), 31);
    for (name, err) in &results {
        assert!(*err <= TOL, "{name}: relative error {err:e}");
    }
}

#[test]
fn lstm_is_causal_and_zero_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, vec![1, 4, 2]);
    let w_ih = rand_tensor(&mut rng, vec![2, 8]);
    let w_hh = rand_tensor(&mut rng, vec![2, 8]);
    let b = rand_tensor(&mut rng, vec![8]);
    let run = |x: Tensor| {
        let g = Graph::new();
        let vars = [
            g.constant(x),
            g.constant(w_ih.clone()),
            g.constant(w_hh.clone()),
            g.constant(b.clone()),
        ];
        let h = g.lstm_sequence(vars[0], vars[1], vars[2], vars[3]).unwrap();
        g.to_tensor(h)
    };
    let full = run(x.clone());
    let mut altered = x.clone();
    altered.data_mut()[6] += 1.0; // step 3 only
    let other = run(altered);
    assert_eq!(full.data()[..6], other.data()[..6]);
    assert_ne!(full.data()[6..], other.data()[6..]);
}

#[test]
fn ops_are_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = rand_tensor(&mut rng, vec![17, 9]);
    let b = rand_tensor(&mut rng, vec![9, 13]);
    let run = || {
        let g = Graph::new();
        let (x, w) = (g.param(a.clone()), g.param(b.clone()));
        let y = g.matmul(x, w).unwrap();
        let s = g.softmax(y, 1).unwrap();
        let l = g.sum(s);
        g.backward(l).unwrap();
        (g.to_tensor(s), g.grad(x).unwrap(), g.grad(w).unwrap())
    };
    assert_eq!(run(), run());
}

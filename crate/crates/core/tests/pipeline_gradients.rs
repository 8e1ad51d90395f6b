//! Gradients of the full model, network through head through the (wrapped)
//! loss, against central differences in every network parameter.

use hardmine::losses::{ClassifierHead, EmbeddingBatch, LabelBatch};
use hardmine::math::{finite_diff_grad, max_relative_error};
use hardmine::objective::{LossKind, LossSpec};
use hardmine::trainer::{xavier_uniform, DenseNet};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn objective(spec: &LossSpec, net: &DenseNet, head: &ClassifierHead, x: &Array2<f64>, y: &LabelBatch) -> f64 {
    let emb = EmbeddingBatch::new(net.embed(x).unwrap()).unwrap();
    spec.evaluate(&emb, y, head).unwrap().objective
}

fn flat(net: &DenseNet) -> Vec<f64> {
    net.layers()
        .iter()
        .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
        .collect()
}

fn unflat(template: &DenseNet, theta: &[f64]) -> DenseNet {
    let mut net = template.clone();
    let mut it = theta.iter().copied();
    for l in net.layers_mut() {
        l.weights.iter_mut().chain(l.bias.iter_mut()).for_each(|v| *v = it.next().unwrap());
    }
    net
}

#[test]
fn network_gradients_match_finite_differences_for_every_loss() {
    for kind in LossKind::ALL {
        let spec = LossSpec::new(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut net = DenseNet::xavier(&[5, 6, 4], &mut rng).unwrap();
        for l in net.layers_mut() {
            l.bias.mapv_inplace(|_| rng.random_range(0.05..0.3));
        }
        let head = ClassifierHead::new(
            xavier_uniform(4, 3, &mut rng),
            Array1::from_shape_simple_fn(3, || rng.random_range(-0.5..0.5)),
            kind.norm_mode(),
        )
        .unwrap();
        let x = Array2::from_shape_simple_fn((4, 5), || rng.random_range(-1.0..1.0));
        let y = LabelBatch::new(vec![0, 1, 2, 1], 3).unwrap();

        let (emb, cache) = net.forward(&x).unwrap();
        let eval = spec.evaluate(&EmbeddingBatch::new(emb).unwrap(), &y, &head).unwrap();
        let grads = net.backward(&cache, &eval.grad_x).unwrap();
        let analytic: Vec<f64> = grads
            .layers
            .iter()
            .flat_map(|g| g.weights.iter().chain(g.bias.iter()).copied())
            .collect();

        let numeric = finite_diff_grad(|t| Ok(objective(&spec, &unflat(&net, t), &head, &x, &y)), &flat(&net), 1e-6)
            .unwrap();
        let err = max_relative_error(&analytic, &numeric);
        assert!(err < 1e-5, "{kind}: max relative error {err:e}");
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sucode_tensor::gradcheck::{all_samples, check};
use sucode_tensor::{concat, irfft2, Graph, Tensor, Var};

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-6;
// Gradients smaller than this are compared in absolute rather than relative terms.
const FLOOR: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Weighted sum with fixed pseudo-random weights, so every output element
/// contributes a distinct amount to the scalar.
fn project<'g>(y: Var<'g>) -> Var<'g> {
    let shape = y.shape();
    let w = Tensor::from_fn(&shape, |i| ((i * 37 + 11) % 17) as f64 / 17.0 - 0.4);
    y.mul(&y.graph().constant(w)).sum_all()
}

fn assert_grads<F>(f: F, inputs: &[Tensor])
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Var<'g>,
{
    let report = check(|g, v| project(f(g, v)), inputs, &all_samples(inputs), STEP, FLOOR);
    assert!(report.passed(TOL), "{report:?}");
}

#[test]
fn elementwise_broadcasting_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    let c = rand_tensor(&mut rng, &[2, 1, 4]);
    assert_grads(|_, v| v[0].add(&v[1]).mul(&v[2]).sub(&v[1]), &[a.clone(), b.clone(), c.clone()]);
    let pos = Tensor::from_fn(&[2, 1, 4], |i| 0.5 + i as f64 * 0.1);
    assert_grads(|_, v| v[0].div(&v[1]), &[a.clone(), pos]);
    assert_grads(|_, v| v[0].mul_scalar(3.0).add_scalar(1.0).neg(), &[a]);
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[3, 5]);
    assert_grads(|_, v| v[0].square(), &[x.clone()]);
    assert_grads(|_, v| v[0].exp(), &[x.clone()]);
    assert_grads(|_, v| v[0].sigmoid(), &[x.clone()]);
    assert_grads(|_, v| v[0].silu(), &[x.clone()]);
    assert_grads(|_, v| v[0].softplus(), &[x.clone()]);
    assert_grads(|_, v| v[0].tanh(), &[x.clone()]);
    assert_grads(|_, v| v[0].sin().add(&v[0].cos()), &[x.clone()]);
    assert_grads(|_, v| v[0].leaky_relu(0.2), &[x.clone()]);
    assert_grads(|_, v| v[0].abs(), &[x.clone()]);
    let pos = x.map(|v| v.abs() + 0.5);
    assert_grads(|_, v| v[0].ln().add(&v[0].sqrt()), &[pos]);
}

#[test]
fn shape_and_reduction_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 4]);
    let y = rand_tensor(&mut rng, &[2, 3, 2]);
    assert_grads(|_, v| v[0].permute(&[2, 0, 1]), &[x.clone()]);
    assert_grads(|_, v| v[0].reshape(&[6, 4]), &[x.clone()]);
    assert_grads(|_, v| v[0].slice(2, 1, 2), &[x.clone()]);
    assert_grads(|_, v| v[0].slice(1, 1, 2), &[x.clone()]);
    assert_grads(|_, v| concat(&[v[0], v[1]], 2), &[x.clone(), y]);
    assert_grads(|_, v| v[0].mean_keepdim(&[0, 2]), &[x.clone()]);
    assert_grads(|_, v| v[0].mean_all(), &[x]);
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = rand_tensor(&mut rng, &[2, 3, 4]);
    let w = rand_tensor(&mut rng, &[4, 5]);
    let b = rand_tensor(&mut rng, &[2, 4, 2]);
    let bias = rand_tensor(&mut rng, &[5]);
    assert_grads(|_, v| v[0].linear(&v[1], Some(&v[2])), &[a.clone(), w, bias]);
    assert_grads(|_, v| v[0].matmul(&v[1]), &[a.clone(), b]);
    assert_grads(|_, v| v[0].transpose_last(), &[a]);
}

#[test]
fn convolution_and_resampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 5, 6, 3]);
    let w = rand_tensor(&mut rng, &[3, 3, 3, 4]);
    let b = rand_tensor(&mut rng, &[4]);
    assert_grads(|_, v| v[0].conv2d(&v[1], Some(&v[2]), 1, 1), &[x.clone(), w.clone(), b.clone()]);
    assert_grads(|_, v| v[0].conv2d(&v[1], None, 2, 1), &[x.clone(), w]);
    let w4 = rand_tensor(&mut rng, &[4, 4, 3, 2]);
    assert_grads(|_, v| v[0].conv2d(&v[1], None, 2, 1), &[x.clone(), w4]);
    let w1 = rand_tensor(&mut rng, &[1, 1, 3, 2]);
    assert_grads(|_, v| v[0].conv2d(&v[1], None, 1, 0), &[x.clone(), w1]);
    assert_grads(|_, v| v[0].upsample_nearest(2), &[x.clone()]);
    assert_grads(|_, v| v[0].resize_bilinear(3, 4), &[x.clone()]);
    assert_grads(|_, v| v[0].resize_bilinear(7, 9), &[x]);
}

#[test]
fn normalization_and_softmax() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    assert_grads(|_, v| v[0].group_norm(2, &v[1], &v[2], 1e-5), &[x.clone(), gamma.clone(), beta.clone()]);
    assert_grads(|_, v| v[0].layer_norm(&v[1], &v[2], 1e-5), &[x.clone(), gamma, beta]);
    assert_grads(|_, v| v[0].softmax_last(), &[x]);
}

#[test]
fn gather_rows_scatters_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let table = rand_tensor(&mut rng, &[5, 3]);
    assert_grads(|_, v| v[0].gather_rows(&[4, 0, 4, 2]), &[table]);
}

#[test]
fn spectral_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for &(h, w) in &[(4, 6), (3, 5)] {
        let x = rand_tensor(&mut rng, &[1, h, w, 2]);
        assert_grads(|_, v| v[0].rfft2().0, &[x.clone()]);
        assert_grads(|_, v| v[0].rfft2().1, &[x.clone()]);
        let wh = w / 2 + 1;
        let re = rand_tensor(&mut rng, &[1, h, wh, 2]);
        let im = rand_tensor(&mut rng, &[1, h, wh, 2]);
        assert_grads(move |_, v| irfft2(&v[0], &v[1], h, w), &[re.clone(), im.clone()]);
        assert_grads(|_, v| Var::complex_abs(&v[0], &v[1]), &[re.clone(), im.clone()]);
        assert_grads(|_, v| Var::complex_angle(&v[0], &v[1]), &[re, im]);
        // Full magnitude/phase round trip through the polar form.
        assert_grads(
            move |_, v| {
                let (re, im) = v[0].rfft2();
                let a = Var::complex_abs(&re, &im);
                let p = Var::complex_angle(&re, &im);
                irfft2(&a.mul(&p.cos()), &a.mul(&p.sin()), h, w)
            },
            &[x],
        );
    }
}

#[test]
fn detach_blocks_gradient() {
    let g = Graph::new();
    let x = g.param(Tensor::new(&[2], vec![1.0, 2.0]));
    let y = x.mul(&x.detach()).sum_all();
    let grads = g.backward(y);
    // d/dx (x * sg[x]) = sg[x]
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 2.0]);
}

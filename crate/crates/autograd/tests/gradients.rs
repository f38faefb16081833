use autograd::gradcheck::check_gradients;
use autograd::nn::{GruCell, ParamStore};
use autograd::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_input(rng: &mut ChaCha8Rng, shape: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let n: usize = shape.iter().product();
    ((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape.to_vec())
}

fn assert_close<F: Fn(&[Tensor]) -> Tensor>(name: &str, f: F, inputs: &[(Vec<f64>, Vec<usize>)]) {
    let report = check_gradients(f, inputs, 1e-6);
    assert!(report.max_rel_err < 1e-6, "{name}: {report:?}");
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = rand_input(&mut rng, &[3, 4]);
    let b = rand_input(&mut rng, &[4]);
    let c: (Vec<f64>, Vec<usize>) = (b.0.iter().map(|v| v.abs() + 0.5).collect(), vec![3, 1]);
    assert_close("mixed", |x| {
        x[0].mul(&x[1]).add(&x[0].tanh()).div(&x[2]).sub(&x[1].sigmoid()).exp().ln().sum_all()
    }, &[a.clone(), b.clone(), (c.0[..3].to_vec(), c.1)]);
    assert_close("softplus/log_sigmoid", |x| x[0].softplus().add(&x[0].log_sigmoid()).square().mean_all(), &[a.clone()]);
    assert_close("leaky", |x| x[0].leaky_relu(0.2).mul(&x[0]).sum_all(), &[a.clone()]);
    assert_close("broadcast_to", |x| x[0].broadcast_to(&[2, 3, 4]).square().sum_all(), &[b.clone()]);
}

#[test]
fn reductions() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let a = rand_input(&mut rng, &[2, 3, 4]);
    for axis in 0..3 {
        assert_close("sum_axis", |x| x[0].sum_axis(axis, false).square().sum_all(), &[a.clone()]);
        assert_close("max_axis", |x| x[0].max_axis(axis, true).square().sum_all(), &[a.clone()]);
        assert_close("logsumexp", |x| x[0].logsumexp(axis, false).square().sum_all(), &[a.clone()]);
        assert_close("softmax", |x| x[0].softmax(axis).mul(&x[0]).sum_all(), &[a.clone()]);
        assert_close("log_softmax", |x| x[0].log_softmax(axis).square().sum_all(), &[a.clone()]);
    }
}

#[test]
fn shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let a = rand_input(&mut rng, &[2, 3, 4]);
    let b = rand_input(&mut rng, &[2, 2, 4]);
    let w = rand_input(&mut rng, &[2, 3, 4]);
    let wt = Tensor::new(w.0.clone(), &w.1);
    assert_close("permute", |x| x[0].permute(&[2, 0, 1]).reshape(&[2, 3, 4]).mul(&wt).sum_all(), &[a.clone()]);
    assert_close("narrow", |x| x[0].narrow(1, 1, 2).square().sum_all(), &[a.clone()]);
    assert_close("cat", |x| Tensor::cat(&[x[0].clone(), x[1].clone()], 1).narrow(1, 2, 3).mul(&wt).sum_all(), &[a.clone(), b.clone()]);
    assert_close("index_select", |x| x[0].index_select(&[1, 0, 1]).square().sum_all(), &[a.clone()]);
    assert_close("cosine", |x| x[0].cosine_similarity(&x[1], 2, false).sum_all(), &[a.clone(), w.clone()]);
    assert_close("l2norm", |x| x[0].l2_normalize(1, 1e-8).mul(&wt).sum_all(), &[a.clone()]);
}

#[test]
fn matmul_variants() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let a = rand_input(&mut rng, &[3, 4]);
    let b = rand_input(&mut rng, &[4, 5]);
    assert_close("mm", |x| x[0].matmul(&x[1]).square().sum_all(), &[a, b.clone()]);
    let a3 = rand_input(&mut rng, &[2, 3, 4]);
    let b3 = rand_input(&mut rng, &[2, 4, 5]);
    assert_close("bmm", |x| x[0].matmul(&x[1]).square().sum_all(), &[a3.clone(), b3]);
    assert_close("3x2", |x| x[0].matmul(&x[1]).square().sum_all(), &[a3, b]);
}

#[test]
fn image_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = rand_input(&mut rng, &[2, 3, 6, 6]);
    let w = rand_input(&mut rng, &[4, 3, 3, 3]);
    let b = rand_input(&mut rng, &[4]);
    for &(stride, pad) in &[(1, 1), (2, 1), (1, 0)] {
        assert_close(
            "conv2d",
            |t| t[0].conv2d(&t[1], Some(&t[2]), stride, pad).square().sum_all(),
            &[x.clone(), w.clone(), b.clone()],
        );
    }
    assert_close("upsample", |t| t[0].upsample2x().square().sum_all(), &[x.clone()]);
    assert_close("avgpool", |t| t[0].avg_pool2x().square().sum_all(), &[x]);
}

#[test]
fn gru_unrolled() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut store, &mut rng, "gru", 3, 4);
    let xs = rand_input(&mut rng, &[5, 3]);
    let report = check_gradients(
        |t| {
            let p = store.bind(false);
            let mut h = Tensor::zeros(&[1, 4]);
            for step in 0..5 {
                h = cell.step(&p, &t[0].narrow(0, step, 1), &h);
            }
            h.square().sum_all()
        },
        &[xs],
        1e-6,
    );
    assert!(report.max_rel_err < 1e-6, "{report:?}");
}

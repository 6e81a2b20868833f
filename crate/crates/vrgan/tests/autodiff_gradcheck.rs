//! Finite-difference checks for the tape, including one second-order case
//! mirroring the gradient-penalty pattern.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vrgan::autodiff::{grad, Tape, Var};

fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen::<f64>() * 2.0 - 1.0)
}

/// Central-difference check of d f(leaves) / d leaves[k] for every leaf.
fn check_grad<FN>(shapes: &[&[usize]], f: FN, tol: f64)
where
    FN: Fn(&Tape<f64>, &[Var<f64>]) -> Var<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let datas: Vec<ArrayD<f64>> = shapes.iter().map(|s| rand_arr(&mut rng, s)).collect();

    let tape = Tape::new();
    let leaves: Vec<Var<f64>> = datas.iter().map(|d| tape.leaf(d.clone())).collect();
    let out = f(&tape, &leaves);
    let refs: Vec<&Var<f64>> = leaves.iter().collect();
    let gs = grad(&out, &refs);

    let h = 1e-6;
    for (k, data) in datas.iter().enumerate() {
        let g = gs[k].value();
        for idx in 0..data.len() {
            let mut plus = datas.clone();
            let mut minus = datas.clone();
            *plus[k].iter_mut().nth(idx).unwrap() += h;
            *minus[k].iter_mut().nth(idx).unwrap() -= h;
            let eval = |ds: &[ArrayD<f64>]| {
                let t = Tape::new();
                let ls: Vec<Var<f64>> = ds.iter().map(|d| t.leaf(d.clone())).collect();
                f(&t, &ls).scalar_value()
            };
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let an = *g.iter().nth(idx).unwrap();
            assert!(
                (fd - an).abs() < tol * (1.0 + fd.abs()),
                "leaf {k} elem {idx}: fd={fd} analytic={an}"
            );
        }
    }
}

#[test]
fn elementwise_chain() {
    check_grad(
        &[&[2, 3], &[2, 3]],
        |_t, l| {
            l[0].mul(&l[1])
                .add(&l[0].sqr().scale(0.5))
                .tanh()
                .abs()
                .mean_all()
        },
        1e-5,
    );
}

#[test]
fn matmul_and_bias() {
    check_grad(
        &[&[3, 4], &[4, 2], &[2]],
        |_t, l| {
            l[0].matmul(&l[1])
                .add_row_bias(&l[2])
                .leaky_relu(0.2)
                .sqr()
                .mean_all()
        },
        1e-5,
    );
}

#[test]
fn conv_stride1_and_stride2() {
    for &(stride, pad) in &[(1usize, 1usize), (2, 1)] {
        check_grad(
            &[&[1, 2, 6, 6], &[3, 2, 3, 3], &[3]],
            |_t, l| {
                l[0].conv2d(&l[1], stride, pad)
                    .add_chan_bias(&l[2])
                    .relu()
                    .sum_all()
            },
            1e-5,
        );
    }
}

#[test]
fn unet_style_ops() {
    check_grad(
        &[&[1, 2, 4, 4], &[1, 2, 4, 4], &[2, 4, 3, 3]],
        |_t, l| {
            let cat = l[0].concat_chan(&l[1]);
            let y = cat.conv2d(&l[2], 1, 1);
            let down = y.avg_pool2();
            down.upsample2().sum_spatial().sqr().mean_all()
        },
        1e-5,
    );
}

#[test]
fn per_sample_ops() {
    check_grad(
        &[&[3, 2, 2], &[3]],
        |_t, l| {
            l[0].mul_per_sample(&l[1])
                .sum_per_sample()
                .sqr()
                .mean_all()
        },
        1e-5,
    );
}

#[test]
fn second_order_gradient_penalty_pattern() {
    // loss = mean_n (||d D(x)/d x||_2 - 1)^2 for a tiny conv critic;
    // check d loss / d w by finite differences over w.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x_data = rand_arr(&mut rng, &[2, 1, 4, 4]);
    let w_data = rand_arr(&mut rng, &[1, 1, 3, 3]);

    let penalty = |w_arr: &ArrayD<f64>, want_grad: bool| -> (f64, Option<ArrayD<f64>>) {
        let t = Tape::<f64>::new();
        let x = t.leaf(x_data.clone());
        let w = t.leaf(w_arr.clone());
        let score = x.conv2d(&w, 1, 1).leaky_relu(0.2).sum_per_sample().sum_all();
        let gx = grad(&score, &[&x]).remove(0);
        let norm = gx.sqr().sum_per_sample().add_scalar(1e-12).sqrt();
        let pen = norm.add_scalar(-1.0).sqr().mean_all();
        if want_grad {
            let gw = grad(&pen, &[&w]).remove(0);
            (pen.scalar_value(), Some(gw.value()))
        } else {
            (pen.scalar_value(), None)
        }
    };

    let (_, gw) = penalty(&w_data, true);
    let gw = gw.unwrap();
    let h = 1e-6;
    for idx in 0..w_data.len() {
        let mut plus = w_data.clone();
        let mut minus = w_data.clone();
        *plus.iter_mut().nth(idx).unwrap() += h;
        *minus.iter_mut().nth(idx).unwrap() -= h;
        let fd = (penalty(&plus, false).0 - penalty(&minus, false).0) / (2.0 * h);
        let an = *gw.iter().nth(idx).unwrap();
        assert!(
            (fd - an).abs() < 1e-5 * (1.0 + fd.abs()),
            "w elem {idx}: fd={fd} analytic={an}"
        );
    }
}

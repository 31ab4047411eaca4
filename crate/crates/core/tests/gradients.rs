//! Central finite-difference checks of every differentiable operator.

use msfin::gradcheck::{check_inputs, project, random_tensor, CheckOptions, GradCheck};
use msfin::tensor::{Shape, Tape, Tensor, TensorError};

const TOL: f64 = 1e-4;

fn sh(n: usize, c: usize, h: usize, w: usize) -> Shape {
    Shape::new(n, c, h, w)
}

/// Checks `sum(op(inputs) * R)` for a fixed random R.
fn check_op(
    shapes: &[Shape],
    seed: u64,
    op: impl Fn(&Tape<f64>, &[Tensor<f64>]) -> Result<Tensor<f64>, TensorError>,
) -> GradCheck {
    let inputs: Vec<_> = shapes
        .iter()
        .enumerate()
        .map(|(i, &s)| random_tensor(s, seed + 100 * i as u64))
        .collect();
    let probe = op(&Tape::inference(), &inputs).expect("forward");
    let r = random_tensor(probe.shape(), seed + 7);
    let report = check_inputs(&inputs, CheckOptions { seed, ..Default::default() }, |tape, xs| project(tape, &op(tape, xs)?, &r))
        .expect("gradient check");
    assert!(
        report.max_rel_err < TOL,
        "max rel err {:.3e} at {:?}",
        report.max_rel_err,
        report.worst
    );
    assert!(report.checked > 0);
    report
}

#[test]
fn conv2d_dense_padded() {
    check_op(&[sh(2, 3, 5, 6), sh(4, 3, 3, 3), sh(1, 4, 1, 1)], 1, |t, x| {
        t.conv2d(&x[0], &x[1], Some(&x[2]), 1, 1, 1)
    });
}

#[test]
fn conv2d_strided() {
    check_op(&[sh(1, 2, 7, 8), sh(3, 2, 3, 3), sh(1, 3, 1, 1)], 2, |t, x| {
        t.conv2d(&x[0], &x[1], Some(&x[2]), 2, 1, 1)
    });
}

#[test]
fn conv2d_grouped_and_depthwise() {
    check_op(&[sh(2, 6, 5, 5), sh(6, 2, 3, 3)], 3, |t, x| t.conv2d(&x[0], &x[1], None, 1, 1, 3));
    check_op(&[sh(1, 4, 4, 5), sh(4, 1, 3, 3)], 4, |t, x| t.conv2d(&x[0], &x[1], None, 1, 1, 4));
}

#[test]
fn conv2d_pointwise_unpadded() {
    check_op(&[sh(2, 5, 3, 4), sh(3, 5, 1, 1), sh(1, 3, 1, 1)], 5, |t, x| {
        t.conv2d(&x[0], &x[1], Some(&x[2]), 1, 0, 1)
    });
}

#[test]
fn conv_transpose2d() {
    check_op(&[sh(2, 3, 3, 4), sh(3, 2, 4, 4), sh(1, 2, 1, 1)], 6, |t, x| {
        t.conv_transpose2d(&x[0], &x[1], Some(&x[2]), 2, 1)
    });
}

#[test]
fn pixel_shuffle() {
    check_op(&[sh(2, 8, 3, 2)], 7, |t, x| t.pixel_shuffle(&x[0], 2));
}

#[test]
fn channel_shuffle() {
    check_op(&[sh(1, 6, 3, 3)], 8, |t, x| t.channel_shuffle(&x[0], 3));
}

#[test]
fn global_avg_pool() {
    check_op(&[sh(2, 3, 4, 5)], 9, |t, x| t.global_avg_pool(&x[0]));
}

#[test]
fn relu_and_leaky_relu() {
    check_op(&[sh(1, 3, 4, 4)], 10, |t, x| t.relu(&x[0]));
    check_op(&[sh(1, 3, 4, 4)], 11, |t, x| t.leaky_relu(&x[0], 0.2));
}

#[test]
fn sigmoid() {
    check_op(&[sh(1, 3, 4, 4)], 12, |t, x| t.sigmoid(&t.scale(&x[0], 3.0)?));
}

#[test]
fn add_scale_sum() {
    check_op(&[sh(1, 2, 3, 3), sh(1, 2, 3, 3)], 13, |t, x| {
        let s = t.add(&x[0], &t.scale(&x[1], -1.5)?)?;
        t.sum(&t.mul(&s, &s)?)
    });
}

#[test]
fn mul_full_and_broadcast() {
    check_op(&[sh(2, 3, 4, 4), sh(2, 3, 4, 4)], 14, |t, x| t.mul(&x[0], &x[1]));
    check_op(&[sh(2, 3, 4, 4), sh(2, 3, 1, 1)], 15, |t, x| t.mul(&x[0], &x[1]));
    check_op(&[sh(2, 3, 1, 1), sh(2, 3, 4, 4)], 16, |t, x| t.mul(&x[0], &x[1]));
}

#[test]
fn concat_channels() {
    check_op(&[sh(2, 1, 3, 3), sh(2, 3, 3, 3), sh(2, 2, 3, 3)], 17, |t, x| {
        t.concat_channels(&[&x[0], &x[1], &x[2]])
    });
}

#[test]
fn mean_abs_diff() {
    check_op(&[sh(2, 3, 4, 4), sh(2, 3, 4, 4)], 18, |t, x| t.mean_abs_diff(&x[0], &x[1]));
}

#[test]
fn reflect_pad_and_crop() {
    check_op(&[sh(1, 2, 5, 6)], 19, |t, x| t.reflect_pad(&x[0], 8, 9));
    check_op(&[sh(1, 2, 5, 6)], 20, |t, x| t.crop(&x[0], 3, 4));
}

#[test]
fn channel_attention_chain() {
    // gap -> 1x1 down -> relu -> 1x1 up -> sigmoid -> rescale.
    check_op(
        &[sh(2, 8, 4, 4), sh(4, 8, 1, 1), sh(1, 4, 1, 1), sh(8, 4, 1, 1), sh(1, 8, 1, 1)],
        21,
        |t, x| {
            let s = t.global_avg_pool(&x[0])?;
            let d = t.relu(&t.conv2d(&s, &x[1], Some(&x[2]), 1, 0, 1)?)?;
            let a = t.sigmoid(&t.conv2d(&d, &x[3], Some(&x[4]), 1, 0, 1)?)?;
            t.mul(&x[0], &a)
        },
    );
}

#[test]
fn shared_input_accumulates() {
    check_op(&[sh(1, 2, 4, 4), sh(2, 2, 3, 3)], 22, |t, x| {
        let y = t.conv2d(&x[0], &x[1], None, 1, 1, 1)?;
        let z = t.conv2d(&y, &x[1], None, 1, 1, 1)?;
        t.add(&z, &x[0])
    });
}

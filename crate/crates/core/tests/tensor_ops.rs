mod common;

use ocunet::autodiff::{Conv2dOptions, Padding};
use ocunet::gradcheck::{check, project, random_tensor};
use ocunet::{Graph, Tensor};
use proptest::prelude::*;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape, data).unwrap()
}

#[test]
fn conv2d_matches_direct_loops() {
    for (case, &(h, w, cin, cout, k, stride, dil)) in [
        (5, 7, 2, 3, 3, 1, 1),
        (6, 6, 3, 2, 3, 2, 1),
        (9, 8, 1, 4, 3, 1, 3),
        (7, 5, 2, 2, 5, 1, 1),
        (8, 8, 4, 1, 1, 2, 1),
        (4, 4, 2, 3, 7, 1, 1),
    ]
    .iter()
    .enumerate()
    {
        let seed = case as u64;
        let x = common::uniform(2 * h * w * cin, -1.0, 1.0, seed);
        let kern = common::uniform(k * k * cin * cout, -1.0, 1.0, seed + 100);
        let bias = common::uniform(cout, -1.0, 1.0, seed + 200);
        let (want, (oh, ow)) = common::conv2d_same(
            &x,
            (2, h, w, cin),
            &kern,
            (k, k, cout),
            Some(&bias),
            stride,
            dil,
        );
        let g = Graph::new();
        let xv = g.constant(t(&[2, h, w, cin], x));
        let kv = g.constant(t(&[k, k, cin, cout], kern));
        let bv = g.constant(t(&[cout], bias));
        let opts = Conv2dOptions {
            stride,
            dilation: dil,
            padding: Padding::Same,
        };
        let y = g.value(g.conv2d(xv, kv, Some(bv), opts).unwrap());
        assert_eq!(y.shape(), &[2, oh, ow, cout], "case {case}");
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn dense_matches_direct_loops() {
    let (n, a, m) = (5, 7, 3);
    let x = common::uniform(n * a, -2.0, 2.0, 1);
    let w = common::uniform(a * m, -2.0, 2.0, 2);
    let b = common::uniform(m, -2.0, 2.0, 3);
    let want = common::dense(&x, n, a, &w, m, Some(&b));
    let g = Graph::new();
    let y = g
        .dense(
            g.constant(t(&[n, a], x)),
            g.constant(t(&[a, m], w)),
            Some(g.constant(t(&[m], b))),
        )
        .unwrap();
    for (p, q) in g.value(y).data().iter().zip(&want) {
        assert!((p - q).abs() < 1e-12);
    }
}

#[test]
fn conv2d_gradients_pass_finite_differences_with_stride() {
    let x = random_tensor(&[1, 7, 6, 2], 1);
    let k = random_tensor(&[3, 3, 2, 2], 2);
    let out = check(&[x, k], 80, 3, |g, v| {
        let y = g.conv2d(
            v[0],
            v[1],
            None,
            Conv2dOptions {
                stride: 2,
                dilation: 1,
                padding: Padding::Same,
            },
        )?;
        project(g, y, 4)
    })
    .unwrap();
    assert!(out.max_rel_error < 1e-6, "{out:?}");
}

#[test]
fn float32_forward_tracks_float64() {
    let x = random_tensor(&[1, 6, 6, 3], 9);
    let k = random_tensor(&[3, 3, 3, 4], 10);
    let g64 = Graph::new();
    let y64 = g64.value(
        g64.conv2d(
            g64.constant(x.clone()),
            g64.constant(k.clone()),
            None,
            Conv2dOptions::default(),
        )
        .unwrap(),
    );
    let g32 = Graph::<f32>::new();
    let y32 = g32.value(
        g32.conv2d(
            g32.constant(x.cast()),
            g32.constant(k.cast()),
            None,
            Conv2dOptions::default(),
        )
        .unwrap(),
    );
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() < 1e-5);
    }
}

#[test]
fn shape_errors_name_both_operands() {
    let g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[1, 4, 4, 2]));
    let b = g.constant(Tensor::zeros(&[1, 4, 5, 2]));
    let msg = g.add(a, b).unwrap_err().to_string();
    assert!(msg.contains("[1, 4, 4, 2]") && msg.contains("[1, 4, 5, 2]"), "{msg}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(
        data in prop::collection::vec(-30.0f64..30.0, 2 * 3 * 5),
    ) {
        let g = Graph::new();
        let y = g.value(g.softmax(g.constant(t(&[2, 3, 5], data))));
        for row in y.data().chunks(5) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn sigmoid_is_bounded_and_monotone(a in -40.0f64..40.0, d in 0.0f64..5.0) {
        let g = Graph::new();
        let y = g.value(g.sigmoid(g.constant(t(&[2], vec![a, a + d]))));
        let (p, q) = (y.data()[0], y.data()[1]);
        prop_assert!((0.0..=1.0).contains(&p) && p <= q);
    }

    #[test]
    fn broadcast_add_commutes(
        a in prop::collection::vec(-5.0f64..5.0, 2 * 3 * 4),
        b in prop::collection::vec(-5.0f64..5.0, 4),
    ) {
        let g = Graph::new();
        let x = g.constant(t(&[2, 3, 4], a));
        let y = g.constant(t(&[1, 1, 4], b));
        let l = g.value(g.add(x, y).unwrap());
        let r = g.value(g.add(y, x).unwrap());
        prop_assert_eq!(l.data(), r.data());
    }

    #[test]
    fn max_pool_never_exceeds_input_max(
        data in prop::collection::vec(-10.0f64..10.0, 4 * 6 * 2),
    ) {
        let g = Graph::new();
        let top = data.iter().cloned().fold(f64::MIN, f64::max);
        let y = g.value(g.max_pool2(g.constant(t(&[1, 4, 6, 2], data))).unwrap());
        prop_assert_eq!(y.shape(), &[1, 2, 3, 2]);
        prop_assert!(y.data().iter().all(|&v| v <= top));
    }

    #[test]
    fn conv_with_unit_pointwise_kernel_is_identity(
        data in prop::collection::vec(-3.0f64..3.0, 3 * 4 * 2),
    ) {
        let g = Graph::new();
        let eye = t(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let y = g.value(
            g.conv2d(
                g.constant(t(&[1, 3, 4, 2], data.clone())),
                g.constant(eye),
                None,
                Conv2dOptions::default(),
            )
            .unwrap(),
        );
        prop_assert_eq!(y.data(), &data[..]);
    }

    #[test]
    fn gradient_of_sum_is_ones(data in prop::collection::vec(-3.0f64..3.0, 1..20)) {
        let n = data.len();
        let g = Graph::new();
        let x = g.leaf(t(&[n], data).with_requires_grad(true));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        prop_assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));
    }
}

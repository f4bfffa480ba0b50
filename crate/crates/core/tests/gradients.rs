use ddnet_core::gradsuite::{format_table, run_suite};
use ddnet_core::{Padding, Shape4, Tape, Tensor4};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn randn(shape: Shape4, seed: u64) -> Tensor4<f64> {
    Tensor4::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[test]
fn finite_difference_suite_passes() {
    let reports = run_suite().unwrap();
    let table = format_table(&reports);
    println!("{table}");
    assert!(reports.iter().all(|r| r.passed), "{table}");
    assert!(reports.iter().any(|r| r.name.starts_with("dd-net")));
}

/// `<conv(x), y> == <x, conv_transpose(y)>` for the same weight tensor.
#[test]
fn conv_transpose_is_the_adjoint_of_conv() {
    for (k, stride, h) in [(2, 2, 4), (3, 2, 3), (3, 1, 5), (1, 1, 4)] {
        let (cin, cout) = (3, 4);
        let x_h = (h - 1) * stride + k;
        let x = randn(Shape4::new(2, cin, x_h, x_h), 1);
        let w = randn(Shape4::new(cout, cin, k, k), 2);
        let y = randn(Shape4::new(2, cout, h, h), 3);
        let mut tape = Tape::new();
        let (xv, wv, yv) = (tape.constant(x.clone()), tape.constant(w), tape.constant(y.clone()));
        let cx = tape.conv2d(xv, wv, None, stride, Padding::Valid).unwrap();
        let ty = tape.conv_transpose2d(yv, wv, None, stride).unwrap();
        assert_eq!(tape.shape(cx), y.shape());
        assert_eq!(tape.shape(ty), x.shape());
        let lhs = tape.value(cx).dot(&y);
        let rhs = x.dot(tape.value(ty));
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "k={k} s={stride}: {lhs} vs {rhs}");
    }
}

proptest! {
    #[test]
    fn concat_then_slice_recovers_parts(a in 1usize..4, b in 1usize..4, seed in 0u64..1000) {
        let x = randn(Shape4::new(2, a, 3, 2), seed);
        let y = randn(Shape4::new(2, b, 3, 2), seed + 1);
        let mut tape = Tape::new();
        let (xv, yv) = (tape.constant(x.clone()), tape.constant(y.clone()));
        let c = tape.concat_channels(&[xv, yv]).unwrap();
        let back = tape.slice_channels(c, a, b).unwrap();
        prop_assert_eq!(tape.value(back), &y);
        let front = tape.slice_channels(c, 0, a).unwrap();
        prop_assert_eq!(tape.value(front), &x);
    }

    #[test]
    fn softmax_rows_sum_to_one(c in 1usize..6, seed in 0u64..1000) {
        let x = randn(Shape4::new(2, c, 2, 3), seed).cast::<f64>();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let p = tape.softmax_channels(xv);
        let v = tape.value(p);
        for n in 0..2 { for h in 0..2 { for w in 0..3 {
            let s: f64 = (0..c).map(|ch| v.at(n, ch, h, w)).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }}}
    }

    #[test]
    fn same_padding_keeps_ceil_size(h in 1usize..12, w in 1usize..12, k in 1usize..5, s in 1usize..4) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor4::zeros(Shape4::new(1, 1, h, w)));
        let wt = tape.constant(Tensor4::zeros(Shape4::new(1, 1, k, k)));
        let y = tape.conv2d(x, wt, None, s, Padding::Same).unwrap();
        prop_assert_eq!(tape.shape(y), Shape4::new(1, 1, h.div_ceil(s), w.div_ceil(s)));
    }
}

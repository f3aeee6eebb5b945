use curvetext::encoding::{decode_box, decode_curve, encode_box, encode_curve};
use curvetext::geometry::{AxisBox, BezierText, Point2};
use proptest::prelude::*;

type P = Point2<f64>;

fn shape() -> impl Strategy<Value = BezierText<f64>> {
    prop::array::uniform8((-500.0..500.0f64, -500.0..500.0f64)).prop_map(|a| BezierText::from_control_points(a.map(|(x, y)| P::new(x, y))))
}

fn abox() -> impl Strategy<Value = AxisBox<f64>> {
    (-500.0..500.0f64, -500.0..500.0f64, 0.5..300.0f64, 0.5..300.0f64).prop_map(|(cx, cy, w, h)| AxisBox::new(cx, cy, w, h).unwrap())
}

/// Integer multiples of 1/8 keep every subtraction and division exact.
fn dyadic(lo: i32, hi: i32) -> impl Strategy<Value = f64> {
    (lo * 8..hi * 8).prop_map(|v| v as f64 / 8.0)
}

fn pow2() -> impl Strategy<Value = f64> {
    (0u32..8).prop_map(|e| (1u32 << e) as f64)
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn curve_round_trip(gt in shape(), p in abox()) {
        let back = decode_curve(&encode_curve(&gt, &p).unwrap(), &p);
        for (a, b) in back.control_points().iter().zip(gt.control_points().iter()) {
            prop_assert!(rel_close(a.x, b.x, 1e-9) && rel_close(a.y, b.y, 1e-9));
        }
    }

    #[test]
    fn box_round_trip(gt in abox(), p in abox()) {
        let back = decode_box(&encode_box(&gt, &p).unwrap(), &p);
        for (a, b) in [(back.cx, gt.cx), (back.cy, gt.cy), (back.w, gt.w), (back.h, gt.h)] {
            prop_assert!(rel_close(a, b, 1e-9));
        }
    }

    #[test]
    fn curve_encoding_formula(gt in shape(), p in abox()) {
        let t = encode_curve(&gt, &p).unwrap();
        for (i, c) in gt.control_points().iter().enumerate() {
            prop_assert!(rel_close(t.offsets[2 * i], (c.x - p.cx) / p.w, 1e-12));
            prop_assert!(rel_close(t.offsets[2 * i + 1], (c.y - p.cy) / p.h, 1e-12));
        }
    }

    #[test]
    fn translation_invariance_is_exact(
        pts in prop::array::uniform8((dyadic(-64, 64), dyadic(-64, 64))),
        cx in dyadic(-64, 64), cy in dyadic(-64, 64), w in pow2(), h in pow2(),
        dx in dyadic(-64, 64), dy in dyadic(-64, 64),
    ) {
        let gt = BezierText::from_control_points(pts.map(|(x, y)| P::new(x, y)));
        let p = AxisBox::new(cx, cy, w, h).unwrap();
        let moved = gt.translated(P::new(dx, dy));
        let pm = AxisBox::new(cx + dx, cy + dy, w, h).unwrap();
        prop_assert_eq!(encode_curve(&gt, &p).unwrap(), encode_curve(&moved, &pm).unwrap());
    }

    #[test]
    fn scale_invariance(gt in shape(), p in abox(), s in 0.01..100.0f64) {
        let scaled = gt.map(|q| P::new(q.x * s, q.y * s));
        let ps = AxisBox::new(p.cx * s, p.cy * s, p.w * s, p.h * s).unwrap();
        let a = encode_curve(&gt, &p).unwrap();
        let b = encode_curve(&scaled, &ps).unwrap();
        for (x, y) in a.offsets.iter().zip(&b.offsets) {
            prop_assert!(rel_close(*x, *y, 1e-9));
        }
    }
}

#[test]
fn documented_examples() {
    let p = AxisBox::new(10.0, 20.0, 4.0, 8.0).unwrap();
    let gt = BezierText::from_control_points([P::new(12.0, 16.0); 8]);
    let t = encode_curve(&gt, &p).unwrap();
    assert_eq!(&t.offsets[..2], &[0.5, -0.5]);

    let p = AxisBox::new(0.0, 0.0, 2.0, 3.0).unwrap();
    let g = AxisBox::new(0.0, 0.0, 4.0, 3.0).unwrap();
    let t = encode_box(&g, &p).unwrap();
    assert_eq!(t.deltas, [0.0, 0.0, 2f64.ln(), 0.0]);
    assert_eq!(encode_box(&p, &p).unwrap().deltas, [0.0; 4]);
}

#[test]
fn non_positive_target_size_rejected() {
    let p = AxisBox::new(0.0, 0.0, 2.0, 3.0).unwrap();
    let bad = AxisBox { cx: 0.0, cy: 0.0, w: 0.0, h: 1.0 };
    assert!(encode_box(&bad, &p).is_err());
    assert!(encode_box(&p, &bad).is_err());
}

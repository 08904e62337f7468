use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use teach_detr::geometry::{giou, giou_grad, iou, BBox};

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.02..0.6),
        rng.random_range(0.02..0.6),
    )
    .unwrap()
}

fn shifted(b: &BBox, k: usize, d: f64) -> BBox {
    let mut v = b.to_array();
    v[k] += d;
    BBox::from_array(v).unwrap()
}

#[test]
fn giou_bounds_and_ordering() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..5000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let g = giou(&a, &b);
        let i = iou(&a, &b);
        assert!((-1.0..=1.0).contains(&g), "{g}");
        assert!((0.0..=1.0).contains(&i));
        assert!(g <= i);
        assert_eq!(g, giou(&b, &a));
        assert!((giou(&a, &a) - 1.0).abs() <= 1e-12);
    }
}

#[test]
fn giou_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let h = 1e-7;
    for _ in 0..1000 {
        let (a, b) = (random_box(&mut rng), random_box(&mut rng));
        let g = giou_grad(&a, &b);
        for (k, gk) in g.into_iter().enumerate() {
            let fd = (giou(&shifted(&a, k, h), &b) - giou(&shifted(&a, k, -h), &b)) / (2.0 * h);
            let tol = 1e-4 * gk.abs().max(fd.abs()).max(1e-4);
            assert!((gk - fd).abs() <= tol, "component {k}: analytic {gk} vs numeric {fd} for {a:?} {b:?}");
        }
    }
}

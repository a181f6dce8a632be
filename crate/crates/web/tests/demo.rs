use reflseg::episodes::IMAGE_SIZE;
use reflseg::tensor::{flip_h, Tensor};
use reflseg_web::{gray_rgba, heat_rgba, image_rgba, Demo};

#[test]
fn episode_is_deterministic_and_single_class() {
    let a = Demo::new(3, 9).unwrap();
    let b = Demo::new(3, 9).unwrap();
    assert_eq!(a.query, b.query);
    assert_eq!(a.support.class_id, 3);
    assert_eq!(a.query.class_id, 3);
    assert_ne!(a.support.image, a.query.image);
    assert!(Demo::new(20, 0).is_err());
}

#[test]
fn priors_are_unit_range_maps() {
    let demo = Demo::new(7, 1).unwrap();
    let p = demo.priors(2.0, 2.0, -2.0).unwrap();
    for m in [&p.original, &p.reflected, &p.fused] {
        assert_eq!(m.shape(), &[16, 16]);
        assert!(m.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
    // With all weight on the original prior, fusion is a monotone map of it.
    let only = demo.priors(0.0, 1.0, 0.0).unwrap();
    let expect = p.original.map(|v| 1.0 / (1.0 + (-v).exp()));
    assert!(only.fused.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn mirroring_the_query_mirrors_its_discrepancy() {
    let mut demo = Demo::new(2, 4).unwrap();
    let before = demo.flip_discrepancy().unwrap();
    assert!(before.data().iter().any(|&v| v > 0.0));
    assert!((before.data().iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
    demo.mirror_query().unwrap();
    demo.mirror_query().unwrap();
    assert_eq!(demo.flip_discrepancy().unwrap(), before);
    demo.mirror_query().unwrap();
    let after = demo.flip_discrepancy().unwrap();
    // |E(I) - flip E(flip I)| is the mirror image of |E(flip I) - flip E(I)|.
    assert!(after.max_abs_diff(&flip_h(&before).unwrap()) < 1e-12);
}

#[test]
fn rgba_buffers_have_image_size() {
    let demo = Demo::new(0, 0).unwrap();
    let n = IMAGE_SIZE * IMAGE_SIZE * 4;
    assert_eq!(image_rgba(&demo.query).len(), n);
    let map = Tensor::full(&[16, 16], 0.5);
    let g = gray_rgba(&map).unwrap();
    assert_eq!(g.len(), n);
    assert_eq!(&g[..4], &[128, 128, 128, 255]);
    let h = heat_rgba(&Tensor::full(&[16, 16], 1.0)).unwrap();
    assert_eq!(&h[..4], &[255, 255, 0, 255]);
    assert!(gray_rgba(&Tensor::zeros(&[5, 5])).is_err());
}

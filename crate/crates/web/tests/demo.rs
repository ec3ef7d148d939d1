use helmscat_web::{contrast_raster_impl, grid_boxes_impl, solve_field_impl};

#[test]
fn raster_has_domain_suffix_and_peak_at_centre() {
    let v = contrast_raster_impl("gaussian", 31).unwrap();
    assert_eq!(v.len(), 31 * 31 + 3);
    assert_eq!(&v[31 * 31..], &[0.0, 0.0, 0.5]);
    let centre = v[15 * 31 + 15];
    assert!(v[..31 * 31].iter().all(|&x| x <= centre));
}

#[test]
fn unknown_contrast_is_rejected() {
    assert!(contrast_raster_impl("sphere", 8).is_err());
    assert!(contrast_raster_impl("gaussian", 0).is_err());
}

#[test]
fn grid_boxes_tile_the_domain() {
    let b = grid_boxes_impl("gaussian", 20.0, 1e-3, 4).unwrap();
    assert_eq!(b.len() % 4, 0);
    let area: f64 = b.chunks(4).map(|c| 4.0 * c[2] * c[2]).sum();
    assert!((area - 1.0).abs() < 1e-12);
}

#[test]
fn small_solve_returns_consistent_field() {
    let r = solve_field_impl("gaussian", 10.0, 1e-2, 4).unwrap();
    assert_eq!(r.points.len(), 2 * r.n);
    assert_eq!(r.total.len(), 2 * r.n);
    assert!(r.residual <= 1e-8);
    assert!(r.total.iter().all(|x| x.is_finite()));
}

#[test]
fn oversized_solve_is_refused() {
    let e = solve_field_impl("gaussian", 40.0, 1e-10, 8).err().unwrap();
    assert!(e.contains("demo limit"));
}

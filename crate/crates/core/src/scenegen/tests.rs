use super::*;

fn flat_scene(h: usize, w: usize) -> SceneSpec {
    SceneSpec {
        height: h,
        width: w,
        ground: Ground::flat([0.8, 0.7, 0.6]),
        light: Light::from_angles(0.0, 45.0),
        objects: Vec::new(),
        mirror: None,
        seed: 0,
    }
}

fn boxed(row: f64, col: f64, half: f64, height: f64) -> ObjectSpec {
    ObjectSpec {
        shape: Shape::Box {
            half_rows: half,
            half_cols: half,
        },
        center: [row, col],
        height,
        albedo: [0.2, 0.3, 0.9],
    }
}

#[test]
fn empty_flat_scene_has_unit_depth() {
    let s = flat_scene(16, 16);
    let d = render_depth(&s, &[]);
    assert!(d.data().iter().all(|&v| v == 1.0));
}

#[test]
fn box_depth_inside_and_outside() {
    let mut s = flat_scene(32, 32);
    s.objects.push(boxed(16.0, 16.0, 3.0, 0.5));
    let d = render_depth(&s, &[0]);
    assert_eq!(d.get(16, 16), 0.5);
    assert_eq!(d.get(13, 19), 0.5);
    assert_eq!(d.get(12, 16), 1.0);
    assert_eq!(d.get(0, 0), 1.0);
}

#[test]
fn dome_profile_matches_closed_form() {
    let mut s = flat_scene(32, 32);
    let (h, r) = (0.4, 6.0);
    s.objects.push(ObjectSpec {
        shape: Shape::Dome { radius: r },
        center: [16.0, 16.0],
        height: h,
        albedo: [0.5; 3],
    });
    let d = render_depth(&s, &[0]);
    for i in 8..25 {
        for j in 8..25 {
            let dist = ((i as f64 - 16.0).powi(2) + (j as f64 - 16.0).powi(2)).sqrt();
            let expect = if dist <= r { 1.0 - h * (1.0 - (dist / r).powi(2)).sqrt() } else { 1.0 };
            assert!((d.get(i, j) as f64 - expect).abs() < 1e-6, "({i},{j})");
        }
    }
}

#[test]
fn flat_scene_casts_no_shadow() {
    let s = flat_scene(16, 16);
    assert!(shadow_mask(&render_depth(&s, &[]), &s.light).is_empty());
}

#[test]
fn box_shadow_length_at_45_degrees() {
    for &(h, expect) in &[(0.3, 9usize), (0.2, 6), (0.45, 14)] {
        let mut s = flat_scene(48, 48);
        s.objects.push(boxed(24.0, 30.0, 3.0, h));
        let m = shadow_mask(&render_depth(&s, &[0]), &s.light);
        // light points toward +col, so the shadow falls on lower columns
        let row: Vec<usize> = (0..48).filter(|&j| m.get(24, j)).collect();
        assert_eq!(row.len(), expect, "h={h}: {row:?}");
        assert_eq!(*row.last().unwrap(), 26, "shadow starts next to the box");
        assert!(!m.get(24, 27), "box top is lit");
    }
}

#[test]
fn shadow_of_disjoint_boxes_is_union() {
    let mut s = flat_scene(48, 48);
    s.light = Light::from_angles(90.0, 40.0);
    s.objects.push(boxed(30.0, 10.0, 3.0, 0.3));
    s.objects.push(boxed(36.0, 34.0, 4.0, 0.25));
    let both = shadow_mask(&render_depth(&s, &[0, 1]), &s.light);
    let a = shadow_mask(&render_depth(&s, &[0]), &s.light);
    let b = shadow_mask(&render_depth(&s, &[1]), &s.light);
    assert!(!a.is_empty() && !b.is_empty());
    assert_eq!(both, a.union(&b));
}

#[test]
fn flat_render_is_albedo_times_lambert() {
    let s = flat_scene(8, 8);
    let img = render_rgb(
        &s.normals(&[]),
        &s.albedo(&[]),
        &s.light,
        &Mask::empty(8, 8),
        &reflections(&s, &[]),
    );
    let lz = s.light.z as f32;
    for i in 0..8 {
        for j in 0..8 {
            let p = img.pixel(i, j);
            for c in 0..3 {
                assert!((p[c] - s.ground.albedo[c] * lz).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn shadowed_pixel_is_attenuated() {
    let s = flat_scene(8, 8);
    let normals = s.normals(&[]);
    let albedo = s.albedo(&[]);
    let refl = reflections(&s, &[]);
    let lit = render_rgb(&normals, &albedo, &s.light, &Mask::empty(8, 8), &refl);
    let mut shadow = Mask::empty(8, 8);
    shadow.set(3, 4, true);
    let dark = render_rgb(&normals, &albedo, &s.light, &shadow, &refl);
    for c in 0..3 {
        assert_eq!(dark.pixel(3, 4)[c], SHADOW_ATTENUATION * lit.pixel(3, 4)[c]);
    }
    assert_eq!(dark.pixel(0, 0), lit.pixel(0, 0));
}

#[test]
fn single_box_pair_artifact_is_its_shadow() {
    let mut s = flat_scene(32, 32);
    s.objects.push(boxed(16.0, 20.0, 3.0, 0.3));
    let p = make_pair(&s, 0, "a").unwrap();
    assert_eq!(p.mask, s.footprint(0));
    let shadow = shadow_mask(&p.x0_minus, &s.light);
    assert_eq!(p.artifact_mask, shadow.difference(&p.mask));
    assert!(!p.artifact_mask.is_empty());
}

#[test]
fn mirror_reflection_enters_artifact_mask() {
    let mut s = flat_scene(32, 32);
    s.light = Light::from_angles(0.0, 60.0);
    s.mirror = Some(MirrorStrip {
        start_row: 20,
        end_row: 28,
    });
    s.objects.push(boxed(15.0, 12.0, 3.0, 0.3));
    let p = make_pair(&s, 0, "m").unwrap();
    // rows 18..=12 reflect into rows 21..=27
    for r in 21..28 {
        assert!(p.artifact_mask.get(r, 12), "row {r}");
    }
    assert!(!p.artifact_mask.get(20, 12));
    let refl = p.i_minus.pixel(22, 12);
    let base = p.i_plus.pixel(22, 12);
    assert_ne!(refl, base);
}

#[test]
fn removing_one_object_keeps_the_other() {
    let mut s = flat_scene(48, 48);
    s.ground.slope = [0.02, 0.01];
    s.ground.variation = 0.05;
    s.ground.frequency = [1.0, 1.5];
    s.light = Light::from_angles(200.0, 35.0);
    s.objects.push(boxed(12.0, 12.0, 4.0, 0.3));
    s.objects.push(ObjectSpec {
        shape: Shape::Dome { radius: 5.0 },
        center: [34.0, 32.0],
        height: 0.4,
        albedo: [0.9, 0.1, 0.1],
    });
    let p = make_pair(&s, 0, "ab").unwrap();
    let keep = s.footprint(1);
    for i in 0..48 {
        for j in 0..48 {
            if keep.get(i, j) && !p.artifact_mask.get(i, j) {
                assert_eq!(p.i_minus.pixel(i, j), p.i_plus.pixel(i, j));
            }
        }
    }
}

#[test]
fn make_pair_rejects_missing_target() {
    let s = flat_scene(16, 16);
    assert!(matches!(make_pair(&s, 0, "x"), Err(CoreError::InvalidScene(_))));
}

#[test]
fn validation_rejects_bad_scenes() {
    let mut s = flat_scene(32, 32);
    s.light = Light::from_angles(0.0, 10.0);
    assert!(s.validate().is_err());
    let mut s = flat_scene(32, 32);
    s.objects.push(boxed(2.0, 16.0, 3.0, 0.3));
    assert!(s.validate().is_err());
    let mut s = flat_scene(32, 32);
    s.objects.push(boxed(16.0, 16.0, 3.0, 0.05));
    assert!(s.validate().is_err());
    let mut s = flat_scene(32, 32);
    s.objects.push(boxed(16.0, 16.0, 2.0, 0.3));
    assert!(s.validate().is_err());
    let mut s = flat_scene(32, 32);
    s.mirror = Some(MirrorStrip {
        start_row: 15,
        end_row: 20,
    });
    s.objects.push(boxed(16.0, 16.0, 3.0, 0.3));
    assert!(s.validate().is_err());
}

#[test]
fn flatten_corruption_returns_input() {
    let mut s = flat_scene(32, 32);
    s.objects.push(boxed(16.0, 16.0, 3.0, 0.3));
    let p = make_pair(&s, 0, "c").unwrap();
    let out = corrupt_depth(&p.x0_minus, &p.mask, CorruptMode::FlattenToInput);
    assert_eq!(out, p.x0_minus);
}

#[test]
fn blur_keeps_constant_region() {
    let d = DepthMap::filled(12, 12, 0.7);
    let m = Mask::full(12, 12);
    assert_eq!(corrupt_depth(&d, &m, CorruptMode::Blur), d);
}

#[test]
fn blur_smears_step_edge() {
    let (h, w) = (10, 10);
    let mut d = DepthMap::filled(h, w, 1.0);
    for i in 0..h {
        for j in 0..5 {
            d.set(i, j, 0.5);
        }
    }
    let mut m = Mask::empty(h, w);
    for j in 0..w {
        m.set(5, j, true);
    }
    let out = corrupt_depth(&d, &m, CorruptMode::Blur);
    for j in 0..w {
        let (j0, j1) = (j.saturating_sub(2), (j + 2).min(w - 1));
        let expect = (j0..=j1).map(|b| if b < 5 { 0.5 } else { 1.0 }).sum::<f64>() / (j1 - j0 + 1) as f64;
        assert!((out.get(5, j) as f64 - expect).abs() < 1e-6, "col {j}");
        assert_eq!(out.get(4, j), d.get(4, j));
    }
}

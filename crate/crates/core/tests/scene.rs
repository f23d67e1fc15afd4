//! Scene generation, rendering and visibility against geometric oracles.

use cotr::scene::*;
use proptest::prelude::*;

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn aggregate(spec: &ClassDistributionSpec, seeds: std::ops::Range<u64>) -> Vec<u64> {
    let mut total = vec![0u64; spec.categories.len()];
    for seed in seeds {
        let g = generate_scene(seed, spec, &GridSpec::desk()).unwrap();
        for (t, c) in total.iter_mut().zip(class_histogram(&g)) {
            *t += c;
        }
    }
    total
}

#[test]
fn histogram_tracks_weights_over_fifty_seeds() {
    for exponent in [1.0, 2.0] {
        let spec = ClassDistributionSpec::default_long_tail(exponent);
        let total = aggregate(&spec, 0..50);
        let counts: Vec<f64> = total.iter().map(|&c| c as f64).collect();
        let rho = spearman(&counts, &spec.effective_weights());
        assert!(rho > 0.8, "exponent {exponent}: rank correlation {rho}, counts {total:?}");
        if exponent == 2.0 {
            let max = *total.iter().max().unwrap() as f64;
            let min = *total.iter().min().unwrap() as f64;
            assert!(min < 0.05 * max, "{total:?}");
        }
    }
}

#[test]
fn dataset_histogram_is_additive() {
    let spec = ClassDistributionSpec::default_long_tail(1.0);
    let grids: Vec<_> = (0..4).map(|s| generate_scene(s, &spec, &GridSpec::desk()).unwrap()).collect();
    let mut sum = vec![0u64; spec.categories.len()];
    for g in &grids {
        for (a, b) in sum.iter_mut().zip(class_histogram(g)) {
            *a += b;
        }
        assert_eq!(class_histogram(g).iter().sum::<u64>(), g.occupied_count() as u64);
    }
    assert_eq!(sum, aggregate(&spec, 0..4));
}

#[test]
fn single_camera_faces_forward() {
    let rig = place_camera_rig(0, &RigSpec { n_cameras: 1, ..RigSpec::default() }, &GridSpec::desk()).unwrap();
    assert_eq!(rig.len(), 1);
    let fwd = rig.cameras[0].pose.rotation[2];
    assert!((fwd[0] - 1.0).abs() < 1e-12 && fwd[1].abs() < 1e-12);
}

#[test]
fn six_frusta_cover_voxels_within_range() {
    let dims = GridSpec::desk();
    let rig = place_camera_rig(0, &RigSpec { n_cameras: 6, ..RigSpec::default() }, &dims).unwrap();
    let spec = ClassDistributionSpec::default_long_tail(1.0);
    let (mut inside, mut total) = (0usize, 0usize);
    for seed in 0..5 {
        let g = generate_scene(seed, &spec, &dims).unwrap();
        for idx in (0..dims.n_voxels()).filter(|&i| g.is_occupied(i)) {
            let c = dims.voxel_center(idx);
            let r = c[0].hypot(c[1]);
            if !(3.0..=8.0).contains(&r) {
                continue;
            }
            total += 1;
            let seen = rig.cameras.iter().any(|cam| matches!(cam.project(c), Some((u, v, _)) if cam.in_image(u, v)));
            inside += seen as usize;
        }
    }
    let frac = inside as f64 / total as f64;
    assert!(frac >= 0.95, "coverage {frac}");
}

fn wall_scene() -> (SemanticVoxelGrid, CameraRig) {
    let dims = GridSpec::desk();
    let mut g = SemanticVoxelGrid::empty(dims, CategoryTable::new([("wall", false), ("box", true)]));
    // wall occupying x ∈ [5, 5.5) across the full y/z extent
    for y in 0..dims.dims[1] {
        for z in 0..dims.dims[2] {
            g.set(dims.index(26, y, z), 0);
        }
    }
    g.set(dims.voxel_of_point([8.0 - 0.25, 0.1, 0.6]).unwrap(), 1);
    let rig = place_camera_rig(0, &RigSpec { n_cameras: 1, ..RigSpec::default() }, &dims).unwrap();
    (g, rig)
}

#[test]
fn wall_hides_voxel_behind_it() {
    let (g, rig) = wall_scene();
    let view = render_view(&g, &rig.cameras[0]);
    assert!(view.semantic.iter().all(|&s| s != 1));
    let centre = 16 * 56 + 28;
    assert!((view.depth[centre] as f64 - 5.0).abs() < 1e-6);
    let vis = compute_visible_mask(&g, &rig);
    assert!(!vis[g.spec.voxel_of_point([7.75, 0.1, 0.6]).unwrap()]);
    assert!(vis[g.spec.voxel_of_point([5.25, 0.1, 0.6]).unwrap()]);
}

#[test]
fn empty_grid_everything_in_frustum_is_visible() {
    let dims = GridSpec::desk();
    let g = SemanticVoxelGrid::empty(dims, CategoryTable::new([("a", false)]));
    let rig = place_camera_rig(0, &RigSpec::default(), &dims).unwrap();
    let vis = compute_visible_mask(&g, &rig);
    for idx in 0..dims.n_voxels() {
        let c = dims.voxel_center(idx);
        let in_frustum = rig.cameras.iter().any(|cam| matches!(cam.project(c), Some((u, v, _)) if cam.in_image(u, v)));
        assert!(vis[idx] || !in_frustum);
    }
}

#[test]
fn rendered_depth_lands_in_occupied_voxels_and_hits_are_visible() {
    let dims = GridSpec::desk();
    let rig = place_camera_rig(0, &RigSpec::default(), &dims).unwrap();
    let spec = ClassDistributionSpec::default_long_tail(1.0);
    let (mut good, mut finite) = (0usize, 0usize);
    for seed in 0..3 {
        let g = generate_scene(seed, &spec, &dims).unwrap();
        let vis = compute_visible_mask(&g, &rig);
        for cam in &rig.cameras {
            let view = render_view(&g, cam);
            for v in 0..view.height {
                for u in 0..view.width {
                    let d = view.depth[v * view.width + u];
                    if !d.is_finite() {
                        continue;
                    }
                    assert!(d > 0.0);
                    finite += 1;
                    // nudge half a voxel past the entry face
                    let p = cam.back_project(u as f64 + 0.5, v as f64 + 0.5, d as f64 + 1e-4);
                    if let Some(idx) = dims.voxel_of_point(p) {
                        if g.is_occupied(idx) && g.get(idx) == view.semantic[v * view.width + u] {
                            good += 1;
                        }
                    }
                }
            }
        }
        // occupied voxels hit first by some pixel ray are visible
        for cam in &rig.cameras {
            let origin = cam.center();
            let mut seen = std::collections::HashSet::new();
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let dir = cam.ray_direction(u as f64 + 0.5, v as f64 + 0.5);
                    if let Some(s) = raycast::GridRay::new(&dims, origin, dir).find(|s| g.is_occupied(s.voxel)) {
                        seen.insert(s.voxel);
                    }
                }
            }
            assert!(seen.iter().all(|&i| vis[i]));
        }
    }
    assert!(good as f64 >= 0.99 * finite as f64, "{good}/{finite}");
}

#[test]
fn free_fraction_is_configurable() {
    let dims = GridSpec::desk();
    for (frac, lo, hi) in [(0.02, 0.84, 0.88), (0.08, 0.77, 0.83), (0.15, 0.70, 0.78)] {
        let mut spec = ClassDistributionSpec::default_long_tail(1.0);
        spec.object_fraction = frac;
        let g = generate_scene(0, &spec, &dims).unwrap();
        let free = g.free_fraction();
        assert!((lo..hi).contains(&free), "object_fraction {frac}: free {free}");
    }
}

#[test]
fn formats_round_trip() {
    let spec = ClassDistributionSpec::default_long_tail(1.0);
    let g = generate_scene(4, &spec, &GridSpec::desk()).unwrap();
    let mut a = Vec::new();
    g.write_ovg1(&mut a).unwrap();
    let back = SemanticVoxelGrid::read_ovg1(&a[..]).unwrap();
    let mut b = Vec::new();
    back.write_ovg1(&mut b).unwrap();
    assert_eq!(a, b);
    assert_eq!(back.with_category_flags(&spec.category_table()).unwrap(), g);

    let text = export_ply(&g);
    let parsed = parse_ply_voxels(&text, &g.spec).unwrap();
    let mut got: Vec<usize> = parsed.iter().map(|p| p.0).collect();
    got.sort_unstable();
    let want: Vec<usize> = (0..g.spec.n_voxels()).filter(|&i| g.is_occupied(i)).collect();
    assert_eq!(got, want);
    for (idx, col) in parsed {
        assert_eq!(col, palette(g.get(idx)));
    }
}

#[test]
fn full_scale_grid_is_representable() {
    let dims = GridSpec::full_scale();
    let g = SemanticVoxelGrid::empty(dims, CategoryTable::new([("a", false)]));
    assert_eq!(g.labels().len(), 640_000);
    assert_eq!(dims.voxel_of_point([-39.9, 39.9, 5.3]), Some(dims.index(0, 199, 15)));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 16, ..ProptestConfig::default() })]

    #[test]
    fn removing_voxels_never_shrinks_visibility(seed in 0u64..1000, keep in 0.0f64..1.0) {
        let dims = GridSpec { dims: [16, 16, 4], voxel_size: 0.5, origin: [-4.0, -4.0, -1.0] };
        let spec = ClassDistributionSpec { object_fraction: 0.15, ego_clearance: 1.0, ..ClassDistributionSpec::default_long_tail(1.0) };
        let g = generate_scene(seed, &spec, &dims).unwrap();
        let rig = place_camera_rig(seed, &RigSpec { n_cameras: 3, ..RigSpec::default() }, &dims).unwrap();
        let before = compute_visible_mask(&g, &rig);
        let mut h = g.clone();
        for idx in 0..dims.n_voxels() {
            let r = ((idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ seed) % 1000;
            if h.is_occupied(idx) && (r as f64) >= keep * 1000.0 {
                h.set(idx, EMPTY);
            }
        }
        let after = compute_visible_mask(&h, &rig);
        for i in 0..before.len() {
            prop_assert!(!before[i] || after[i]);
        }
    }
}

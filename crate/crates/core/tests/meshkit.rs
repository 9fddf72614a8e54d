use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use viscosurr_core::meshkit::{
    build_box_mesh, depth_layers, total_volume, total_volume_gradient, Field3, FixedSpec, GridMesh,
};
use viscosurr_core::CoreError;
use viscosurr_tensorad::{Decomposition, HexVolume};

fn unit_box(dims: [usize; 3]) -> GridMesh {
    build_box_mesh(dims, [1.0; 3], FixedSpec::None).unwrap()
}

/// Displacement field realising `x -> A x + t` at every node.
fn affine_field(mesh: &GridMesh, a: [[f64; 3]; 3], t: [f64; 3]) -> Field3 {
    let mut f = Field3::for_mesh(mesh);
    for (n, x) in mesh.rest_positions().iter().enumerate() {
        let mut u = [0.0; 3];
        for i in 0..3 {
            u[i] = (0..3).map(|j| a[i][j] * x[j]).sum::<f64>() + t[i] - x[i];
        }
        f.set(n, u);
    }
    f
}

fn det3(a: [[f64; 3]; 3]) -> f64 {
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

#[test]
fn paper_grid_masks() {
    let m = build_box_mesh([17, 17, 8], [1.0; 3], FixedSpec::PaperDefault).unwrap();
    assert_eq!(m.n_nodes(), 2312);
    assert_eq!(m.cells().len(), 16 * 16 * 7);
    for n in 0..m.n_nodes() {
        let [i, j, k] = m.node_ijk(n);
        let expected_fixed = k == 0 || (k < 7 && (i == 0 || j == 0 || i == 16 || j == 16));
        assert_eq!(m.dirichlet()[n], expected_fixed, "node {i},{j},{k}");
        if k == 7 {
            assert!(m.is_free(n), "top node {i},{j} must be free");
        }
    }
    assert_eq!(m.top_free_nodes().len(), 17 * 17);
}

#[test]
fn tiny_boxes_have_expected_volume() {
    let cube = unit_box([2, 2, 2]);
    assert_eq!(cube.cells().len(), 1);
    assert_eq!(total_volume(&cube, &Field3::for_mesh(&cube)).unwrap(), 1.0);
    let pair = unit_box([3, 2, 2]);
    assert_eq!((pair.n_nodes(), pair.cells().len()), (12, 2));
    assert_eq!(total_volume(&pair, &Field3::for_mesh(&pair)).unwrap(), 2.0);
}

#[test]
fn corner_order_is_x_fastest() {
    let m = unit_box([2, 2, 2]);
    let c = m.cells()[0].node_indices;
    for (corner, &n) in c.iter().enumerate() {
        let p = m.rest_positions()[n as usize];
        assert_eq!(p, [(corner & 1) as f64, ((corner >> 1) & 1) as f64, ((corner >> 2) & 1) as f64]);
    }
}

#[test]
fn invalid_meshes_are_rejected() {
    assert!(matches!(build_box_mesh([1, 4, 4], [1.0; 3], FixedSpec::None), Err(CoreError::InvalidMesh(_))));
    assert!(matches!(build_box_mesh([3, 3, 3], [1.0, 0.0, 1.0], FixedSpec::None), Err(CoreError::InvalidMesh(_))));
    let n = 8;
    let err = GridMesh::new([2, 2, 2], [1.0; 3], [0.0; 3], vec![false; n], vec![true; n]);
    assert!(matches!(err, Err(CoreError::InvalidMesh(_))));
}

#[test]
fn occupancy_mask_drops_cells_and_constraints() {
    let m = build_box_mesh([3, 3, 3], [1.0; 3], FixedSpec::PaperDefault).unwrap();
    let mut occ = vec![true; m.n_nodes()];
    occ[m.node_index(0, 0, 0)] = false;
    let masked = m.with_occupancy(occ).unwrap();
    assert_eq!(masked.cells().len(), 7);
    assert!(!masked.dirichlet()[0]);
    assert_eq!(masked.rest_volume(), 7.0);
    assert_eq!(masked.active_nodes().len(), 26);
}

#[test]
fn uniform_scaling_gives_cubic_volume() {
    let m = unit_box([2, 2, 2]);
    let s = 1.1;
    let f = affine_field(&m, [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]], [0.0; 3]);
    let v = total_volume(&m, &f).unwrap();
    assert!((v - 1.331).abs() < 1e-12, "{v}");
}

#[test]
fn volume_rejects_mismatched_field() {
    let m = unit_box([2, 2, 2]);
    let f = Field3::zeros([3, 2, 2]);
    assert!(matches!(total_volume(&m, &f), Err(CoreError::Contract { .. })));
}

#[test]
fn mirror_decomposition_agrees_for_affine_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let m = unit_box([2, 2, 2]);
    let rest = m.rest_positions().to_vec();
    let cells: Vec<[u32; 8]> = m.cells().iter().map(|c| c.node_indices).collect();
    let primary = HexVolume::new(rest.clone(), cells.clone()).unwrap();
    let mirror = HexVolume::new(rest, cells).unwrap().with_decomposition(Decomposition::Mirror);
    for _ in 0..200 {
        let mut a = [[0.0; 3]; 3];
        for (i, row) in a.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = f64::from(i == j as usize) + rng.random_range(-0.3..0.3);
            }
        }
        let t = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        let f = affine_field(&m, a, t);
        let vp = primary.volume(|n| f.get(n));
        let vm = mirror.volume(|n| f.get(n));
        assert!((vp - vm).abs() < 1e-12, "{vp} vs {vm}");
        assert!((vp - det3(a).abs()).abs() < 1e-12);
    }
}

#[test]
fn volume_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dims in [[2, 2, 2], [3, 2, 3], [3, 3, 2]] {
        let m = build_box_mesh(dims, [1.0, 0.8, 1.2], FixedSpec::None).unwrap();
        let mut u = Field3::for_mesh(&m);
        for v in u.values_mut() {
            *v = rng.random_range(-0.2..0.2);
        }
        let (_, grad) = total_volume_gradient(&m, &u).unwrap();
        let h = 1e-3;
        let mut worst = 0.0f64;
        for i in 0..u.values().len() {
            let mut up = u.clone();
            up.values_mut()[i] += h;
            let mut dn = u.clone();
            dn.values_mut()[i] -= h;
            let fd = (total_volume(&m, &up).unwrap() - total_volume(&m, &dn).unwrap()) / (2.0 * h);
            let an = grad.values()[i];
            worst = worst.max((an - fd).abs() / an.abs().max(fd.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "dims {dims:?}: relative error {worst:.3e}");
    }
}

#[test]
fn depth_layers_partition_active_nodes() {
    let m = build_box_mesh([4, 3, 8], [1.0; 3], FixedSpec::PaperDefault).unwrap();
    let layers = depth_layers(&m);
    assert_eq!(layers.len(), 8);
    for (l, layer) in layers.iter().enumerate() {
        assert!((layer.normalized_depth - l as f64 / 7.0).abs() < 1e-15);
    }
    let mut all: Vec<usize> = layers.iter().flat_map(|l| l.nodes.iter().copied()).collect();
    all.sort_unstable();
    assert_eq!(all, m.active_nodes());
    assert!(layers[0].nodes.iter().all(|&n| m.node_ijk(n)[2] == 7));

    let thin = depth_layers(&unit_box([3, 3, 2]));
    assert_eq!(thin.iter().map(|l| l.normalized_depth).collect::<Vec<_>>(), vec![0.0, 1.0]);
}

proptest! {
    #[test]
    fn rigid_translation_preserves_volume(t in prop::array::uniform3(-20.0f64..20.0), nx in 2usize..5, nz in 2usize..4) {
        let m = build_box_mesh([nx, 3, nz], [1.0, 0.5, 2.0], FixedSpec::None).unwrap();
        let mut f = Field3::for_mesh(&m);
        for n in 0..m.n_nodes() {
            f.set(n, t);
        }
        let v0 = m.rest_volume();
        prop_assert!((total_volume(&m, &f).unwrap() - v0).abs() <= 1e-9 * v0);
    }

    #[test]
    fn uniform_scale_is_cubic(s in 0.3f64..3.0, nx in 2usize..5) {
        let m = build_box_mesh([nx, 4, 3], [1.0, 1.5, 0.7], FixedSpec::None).unwrap();
        let f = affine_field(&m, [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, s]], [0.0; 3]);
        let v0 = m.rest_volume();
        prop_assert!((total_volume(&m, &f).unwrap() - s * s * s * v0).abs() <= 1e-9 * s * s * s * v0);
    }
}

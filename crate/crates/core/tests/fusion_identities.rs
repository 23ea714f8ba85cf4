use autodiff::{Graph, Tensor};
use coperception::geometry::Se2;
use coperception::mvmi::{estimate_js_mi, estimate_local_mi, js_mi};
use coperception::params::BoundParams;
use coperception::perception::{relative_voxel_transform, Architecture, FeatureMap, Net, NetConfig, ViewOrigin};
use coperception::scene::{BevGrid, GridConfig};
use coperception::trainer::{total_loss, LossConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_arch() -> Architecture {
    let net = NetConfig {
        encoder_channels: [4, 8],
        collab_hidden: 4,
        decoder_channels: 4,
        projection_dim: 4,
        global_hidden: 8,
        local_hidden: 4,
        compression_exponent: 0,
    };
    let grid = GridConfig {
        size: 16,
        ..GridConfig::default()
    };
    Architecture::new(net, grid).unwrap()
}

fn random_view(g: &mut Graph, arch: &Architecture, rng: &mut ChaCha8Rng, source: usize) -> FeatureMap {
    let t = Tensor::from_fn(arch.feature_shape().to_vec(), |_| rng.gen_range(-1.0..1.0));
    FeatureMap {
        var: g.constant(t),
        frame: 0,
        source,
        origin: ViewOrigin::Aligned,
    }
}

#[test]
fn single_view_fusion_is_identity() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for trial in 0..100 {
        let params = arch.init_params(trial).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::pipeline(&params, &mut g);
        let net = Net::new(&arch, &bound);
        let ego = random_view(&mut g, &arch, &mut rng, 0);
        let fused = net.fuse(&mut g, &ego, &[ego]).unwrap();
        let diff = g.value(fused.feature.var).max_abs_diff(g.value(ego.var)).unwrap();
        assert!(diff <= 1e-12, "trial {trial}: {diff}");
    }
}

#[test]
fn fusion_weights_form_a_simplex_and_ignore_view_order() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for trial in 0..50 {
        let params = arch.init_params(trial).unwrap();
        let mut g = Graph::new();
        let bound = BoundParams::pipeline(&params, &mut g);
        let net = Net::new(&arch, &bound);
        let n = rng.gen_range(2..=5);
        let views: Vec<FeatureMap> = (0..n).map(|j| random_view(&mut g, &arch, &mut rng, j)).collect();
        let fused = net.fuse(&mut g, &views[0], &views).unwrap();
        let mut shuffled = views.clone();
        shuffled.reverse();
        let again = net.fuse(&mut g, &views[0], &shuffled).unwrap();
        assert_eq!(g.value(fused.feature.var), g.value(again.feature.var));

        let cells = arch.feature_size() * arch.feature_size();
        for cell in 0..cells {
            let ws: Vec<f64> = fused.weights.iter().map(|(_, w)| g.value(*w).data()[cell]).collect();
            assert!(ws.iter().all(|w| (0.0..=1.0).contains(w)));
            assert!((ws.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn encoding_is_translation_equivariant_at_stride() {
    let arch = small_arch();
    let params = arch.init_params(3).unwrap();
    let mut g = Graph::new();
    let bound = BoundParams::pipeline(&params, &mut g);
    let net = Net::new(&arch, &bound);
    let n = arch.grid.size;
    let c = arch.grid.channels;
    let mut occ = Tensor::zeros([n, n, c]);
    occ.set(&[6, 7, 0], 1.0);
    occ.set(&[7, 7, 1], 1.0);
    let mut shifted = Tensor::zeros([n, n, c]);
    shifted.set(&[8, 9, 0], 1.0);
    shifted.set(&[9, 9, 1], 1.0);
    let bev = |occupancy| BevGrid {
        occupancy,
        resolution: arch.grid.resolution,
    };
    let a = net.encode(&mut g, &bev(occ), 0).unwrap();
    let b = net.encode(&mut g, &bev(shifted), 0).unwrap();
    let (fa, fb) = (g.value(a.var), g.value(b.var));
    // Shifting the input by two cells moves stride-2 features by one cell.
    for r in 2..6 {
        for col in 2..6 {
            for ch in 0..arch.feature_channels() {
                let va = fa.at(&[r, col, ch]);
                let vb = fb.at(&[r + 1, col + 1, ch]);
                assert!((va - vb).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn relative_transform_of_ego_is_identity() {
    let p = Se2::new(3.0, -2.0, 0.7);
    assert_eq!(relative_voxel_transform(&p, &p, 1.0), autodiff::Rigid2::IDENTITY);
}

#[test]
fn graph_js_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let pos: Vec<f64> = (0..7).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let neg: Vec<f64> = (0..5).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let mut g = Graph::new();
        let p = g.constant(Tensor::new([7], pos.clone()).unwrap());
        let n = g.constant(Tensor::new([5], neg.clone()).unwrap());
        let v = js_mi(&mut g, p, n).unwrap();
        let expected = estimate_js_mi(&pos, &neg).unwrap();
        assert!((g.value(v).item().unwrap() - expected).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn loss_breakdown_composes(
        cls in 0.0f64..5.0, reg in 0.0f64..5.0, gmi in 0.0f64..3.0, lmi in 0.0f64..3.0,
        alpha in 0.0f64..=1.0, lambda in 0.01f64..10.0, bg in 0.0f64..1.0,
    ) {
        let cfg = LossConfig { alpha, lambda, beta_global: bg, beta_local: 1.0 - bg };
        let b = total_loss(cls, reg, gmi, lmi, &cfg).unwrap();
        prop_assert!((b.mi - lambda * (bg * gmi + (1.0 - bg) * lmi)).abs() <= 1e-12);
        prop_assert!((b.total - ((1.0 - alpha) * (cls + reg) + alpha * b.mi)).abs() <= 1e-12);
        if alpha == 0.0 {
            prop_assert_eq!(b.total, cls + reg);
        }
    }

    #[test]
    fn local_mi_equals_flattened_estimate(h in 1usize..6, w in 1usize..6, seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pos = Tensor::from_fn([h, w], |_| rng.gen_range(-4.0..4.0));
        let neg = Tensor::from_fn([h, w], |_| rng.gen_range(-4.0..4.0));
        let local = estimate_local_mi(&pos, &neg).unwrap();
        // Mean of the per-voxel estimates.
        let per_voxel: f64 = pos
            .data()
            .iter()
            .zip(neg.data())
            .map(|(&p, &n)| estimate_js_mi(&[p], &[n]).unwrap())
            .sum::<f64>()
            / (h * w) as f64;
        prop_assert!((local - per_voxel).abs() <= 1e-12);
        prop_assert!((local - estimate_js_mi(pos.data(), neg.data()).unwrap()).abs() <= 1e-12);
    }
}

//! Section-level timing of one desk-scale training step's pieces.
use cfun_core::boxes::BBox3D;
use cfun_core::detector::{backbone_fpn_forward, init_detector, rpn_forward, DetectorConfig};
use cfun_core::graph::Graph;
use cfun_core::kernels::RoiAlignSpec;
use cfun_core::params::ParamStore;
use cfun_core::rng::SplitMix64;
use cfun_core::unet::{init_unet, unet_forward, UnetConfig};
use ndarray::Array4;
use std::time::Instant;

fn main() {
    let mut rng = SplitMix64::new(7);
    let dcfg = DetectorConfig::desk();
    let ucfg = UnetConfig::desk();
    let mut store = ParamStore::new();
    let mut irng = rng.fork();
    init_detector(&mut store, &mut irng, &dcfg);
    init_unet(&mut store, &mut irng, &ucfg);
    let x = Array4::from_shape_fn((1, 96, 128, 128), |_| rng.next_f32());
    let bx = BBox3D::new(20.0, 30.0, 30.0, 84.0, 94.0, 94.0).unwrap();

    for round in 0..3 {
        let mut g = Graph::new();
        let t = Instant::now();
        let xin = g.input(x.clone().into_dyn());
        let pyr = backbone_fpn_forward(&mut g, &store, &dcfg, xin).unwrap();
        let (scores, _deltas) = rpn_forward(&mut g, &store, &dcfg, &pyr);
        let t_det = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let crop = g.roi_align(
            xin,
            bx,
            RoiAlignSpec {
                out_size: [32, 32, 32],
                samples_per_bin: 2,
            },
        );
        let logits = unet_forward(&mut g, &store, &ucfg, crop).unwrap();
        let t_unet = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let probs = g.softmax_channels(logits);
        let (c, dz, dy, dxx) = {
            let v = g.value4(probs);
            v.dim()
        };
        let mut target = Array4::<f32>::zeros((c, dz, dy, dxx));
        target.index_axis_mut(ndarray::Axis(0), 0).fill(1.0);
        let el = g.edge_loss(probs, &target, false);
        let t_edge = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let s = g.sum(scores);
        let total = g.weighted_sum(&[el, s], &[1.0, 1.0]);
        g.backward(total);
        let t_bwd = t.elapsed().as_secs_f64();
        if round > 0 {
            println!(
                "det_fwd {t_det:.3}s  unet_fwd {t_unet:.3}s  edge_fwd {t_edge:.3}s  bwd {t_bwd:.3}s"
            );
        }
    }
}

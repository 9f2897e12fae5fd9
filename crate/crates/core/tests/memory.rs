use idm_core::diffusion::loss_and_grads;
use idm_core::iunet::{IUNet, IUNetConfig};
use idm_core::revgraph::Mode;
use idm_core::tensor::meter;
use idm_core::{Prng, Tensor};

struct Step {
    peak: usize,
    flops: u64,
    final_live: usize,
}

fn step(blocks: usize, mode: Mode) -> Step {
    let mut m: IUNet<f64> = IUNet::new(IUNetConfig { blocks_per_level: blocks, ..IUNetConfig::small() }, 1).unwrap();
    m.randomize_identity_params(2, 0.3);
    let mut prng = Prng::new(3);
    let x: Tensor<f64> = prng.randn(&[2, 1, 8, 8, 8]).unwrap();
    let eps: Tensor<f64> = prng.randn(&[2, 1, 8, 8, 8]).unwrap();
    let (res, flops) = meter::count_flops(|| loss_and_grads(&mut m, &x, &eps, 100, 0.0, 0.0, mode).unwrap());
    Step {
        peak: res.1.peak_bytes,
        flops,
        final_live: res.1.final_live_bytes(),
    }
}

#[test]
fn invertible_peak_does_not_grow_with_depth() {
    let inv: Vec<Step> = [1, 2, 4, 8].into_iter().map(|b| step(b, Mode::InvertibleRecompute)).collect();
    let store: Vec<Step> = [1, 2, 4, 8].into_iter().map(|b| step(b, Mode::StoreAll)).collect();
    let base = inv[0].peak as f64;
    for s in &inv {
        assert!((s.peak as f64 / base - 1.0).abs() <= 0.1, "invertible peaks {:?}", inv.iter().map(|s| s.peak).collect::<Vec<_>>());
    }
    // Every extra block keeps one more input per level in StoreAll.
    let peaks: Vec<usize> = store.iter().map(|s| s.peak).collect();
    let per_block = (peaks[1] - peaks[0]) as f64;
    assert!(per_block > 0.0, "store peaks {peaks:?}");
    for (w, blocks) in peaks.windows(2).zip([1.0, 2.0, 4.0]) {
        assert_eq!((w[1] - w[0]) as f64, per_block * blocks, "store peaks {peaks:?}");
    }
    for (i, s) in inv.iter().zip(&store).skip(2) {
        assert!(i.peak < s.peak);
    }
}

#[test]
fn recomputation_costs_extra_flops() {
    for blocks in [1, 4] {
        let (i, s) = (step(blocks, Mode::InvertibleRecompute), step(blocks, Mode::StoreAll));
        let ratio = i.flops as f64 / s.flops as f64;
        assert!(ratio > 1.0 && ratio <= 4.0, "blocks {blocks}: ratio {ratio}");
    }
}

#[test]
fn nothing_stays_live_after_a_step() {
    for mode in [Mode::StoreAll, Mode::InvertibleRecompute] {
        let s = step(2, mode);
        // Only the caller's x and ε remain.
        assert_eq!(s.final_live, 2 * 2 * 512 * 8, "{mode:?}");
    }
}

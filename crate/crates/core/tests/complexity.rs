//! Executed FLOP counts against the closed forms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mim_core::arch::{MimConfig, MimModel};
use mim_core::complexity::{count_flops, ssm_flops, transformer_flops};
use mim_core::graph::FlopKind;
use mim_core::params::{Ctx, Init, Mode, ParamStore, Path};
use mim_core::ssm::{s6_forward, SsmParams, DEFAULT_STATE_DIM};
use mim_core::{Graph, Tensor};

fn measured_s6(n: usize, d: usize) -> u64 {
    let mut store = ParamStore::new();
    let mut init = Init::new(5);
    let p = SsmParams::new(&mut store, &mut init, &Path::root("s6"), 2 * d, DEFAULT_STATE_DIM, d.div_ceil(16)).unwrap();
    let mut g = Graph::new();
    let mut ctx = Ctx::new(&mut g, &store, Mode::Eval);
    let x = ctx.g.constant(Tensor::zeros([1, n, 2 * d]));
    s6_forward(&mut ctx, x, &p).unwrap();
    g.flops().by_kind(FlopKind::Ssm)
}

#[test]
fn scan_core_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let (n, d) = (rng.gen_range(1..200), rng.gen_range(1..48));
        let measured = measured_s6(n, d) as f64;
        let analytic = ssm_flops(n as u64, d as u64) as f64;
        assert!((measured / analytic - 1.0).abs() <= 0.05, "n={n} d={d}: {measured} vs {analytic}");
    }
}

#[test]
fn encoder_cost_is_linear_in_pixels() {
    let cfg = MimConfig::default();
    let (model, store) = MimModel::init(&cfg, 0).unwrap();
    let small = count_flops(&model, &store, 1).unwrap();
    let big_cfg = MimConfig { height: 128, width: 128, ..cfg };
    let (big_model, big_store) = MimModel::init(&big_cfg, 0).unwrap();
    let big = count_flops(&big_model, &big_store, 1).unwrap();
    let ratio = big.measured_encoder as f64 / small.measured_encoder as f64;
    assert!((ratio - 4.0).abs() <= 0.1, "{ratio}");
    // attention over the same token counts grows faster than 4x
    let t = transformer_flops(big.n, big.d) as f64 / transformer_flops(small.n, small.d) as f64;
    assert!(t > 4.0, "{t}");
    assert_eq!(big.n, 4 * small.n);
}

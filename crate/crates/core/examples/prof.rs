// quick component timing via the library
use liso_core::*;
use std::time::Instant;
fn main() {
    let cfg = liso_core::nets::NetConfig {
        hidden_channels: 16, stem_channels: 8, decoder_channels: 16, head_channels: 8,
        bpp: 1, leaky_slope: 0.2,
    };
    let params = liso_core::nets::init_stego_params(cfg, 1).unwrap();
    let img = liso_core::synth::synth_image(64, 3).unwrap();
    let msg = liso_core::bitstream::sample_random_message(64, 64, 1, 5).unwrap();

    // time inference iteration pieces
    let t = Instant::now();
    let ocfg = liso_core::optim::OptimizeConfig { max_iters: 6, stop_on_zero: false, patience: 100, ..Default::default() };
    let (_x, trace, _s) = liso_core::optim::liso_encode(&img, &msg, &params, &ocfg, None).unwrap();
    println!("liso_encode 20 iters: {:.3}s ({:.1} ms/iter)", t.elapsed().as_secs_f64(), t.elapsed().as_secs_f64()*1000.0/trace.iterations() as f64);
}

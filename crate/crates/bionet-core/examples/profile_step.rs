// Scratch step profiler (deleted before release).
use bionet_core::nn::*;
use bionet_core::nn::ops;
use ndarray::Array4;
use std::time::Instant;

fn t(name: &str, mut f: impl FnMut()) {
    let t0 = Instant::now();
    let iters = 3;
    for _ in 0..iters { f(); }
    println!("{name}: {:.0} ms", t0.elapsed().as_secs_f64() / iters as f64 * 1e3);
}

fn main() {
    let g_cfg = NetworkConfig { in_channels: 1, out_channels: 12, base_width: 16, depth: 4, bio_head_width: 64 };
    let c_cfg = NetworkConfig { in_channels: 13, out_channels: 1, ..g_cfg.clone() };
    let mut u_g = build_unet(&g_cfg, SegHead::Softmax, 1).unwrap();
    let mut u_c = build_unet(&c_cfg, SegHead::Sigmoid, 2).unwrap();
    let x = Array4::<f64>::from_elem((8, 1, 128, 128), 0.5);

    t("u_g fwd infer", || { let _ = u_g.forward(x.clone(), false).unwrap(); });
    t("u_g fwd train", || { let _ = u_g.forward(x.clone(), true).unwrap(); u_g.backward(&Array4::zeros((8,12,128,128))); });
    let gp = u_g.forward(x.clone(), false).unwrap();
    let cin = ops::concat_channels(&x, &gp);
    t("u_c fwd infer", || { let _ = u_c.forward(cin.clone(), false).unwrap(); });
    t("u_c fwd+bwd", || { let _ = u_c.forward(cin.clone(), true).unwrap(); u_c.backward(&Array4::zeros((8,1,128,128))); });
    let mut adam = Adam::new(&u_g);
    t("adam step u_g", || adam.step(&mut u_g, 1e-3));
    t("digest u_g", || { let _ = param_digest(&u_g); });

    // bio net at desk scale
    let bio = build_bio_net(&NetworkConfig { in_channels: 1, out_channels: 1, base_width: 16, depth: 4, bio_head_width: 64 }, 3).unwrap();
    t("bio fwd tape (8x128x128)", || { let _ = bio.forward_tape(&x).unwrap(); });
    let (_, tape) = bio.forward_tape(&x).unwrap();
    t("bio bwd input", || { let _ = bio.backward_input(&tape, &ndarray::Array1::zeros(8)); });
}

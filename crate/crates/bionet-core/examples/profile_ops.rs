// Scratch kernel profiler (deleted before release).
use bionet_core::nn::ops::*;
use ndarray::{Array1, Array4};
use std::time::Instant;

fn bench(name: &str, flops: f64, mut f: impl FnMut()) {
    let t = Instant::now();
    let iters = 5;
    for _ in 0..iters { f(); }
    let dt = t.elapsed().as_secs_f64() / iters as f64;
    println!("{name}: {:.1} ms, {:.1} GFLOPS", dt * 1e3, flops / dt / 1e9);
}

fn main() {
    let n = 8;
    // L0 conv: 16->16 at 128x128
    let x = Array4::<f64>::from_elem((n, 16, 128, 128), 0.5);
    let w = Array4::<f64>::from_elem((16, 16, 3, 3), 0.01);
    let b = Array1::<f64>::zeros(16);
    let flops = 2.0 * (n * 16 * 16 * 9 * 128 * 128) as f64;
    bench("conv16x16@128 fwd", flops, || { let _ = conv2d_forward(&x, &w, &b, 1, 1); });
    let gy = Array4::<f64>::from_elem((n, 16, 128, 128), 0.1);
    bench("conv16x16@128 bwd", 2.0 * flops, || { let _ = conv2d_backward(&x, &w, &gy, 1, 1, true); });

    // L3 conv: 128->128 at 16x16
    let x = Array4::<f64>::from_elem((n, 128, 16, 16), 0.5);
    let w = Array4::<f64>::from_elem((128, 128, 3, 3), 0.01);
    let b = Array1::<f64>::zeros(128);
    let flops = 2.0 * (n * 128 * 128 * 9 * 16 * 16) as f64;
    bench("conv128x128@16 fwd", flops, || { let _ = conv2d_forward(&x, &w, &b, 1, 1); });
    let gy = Array4::<f64>::from_elem((n, 128, 16, 16), 0.1);
    bench("conv128x128@16 bwd", 2.0 * flops, || { let _ = conv2d_backward(&x, &w, &gy, 1, 1, true); });

    // decoder conv: 32->16 at 128x128 (concat input)
    let x = Array4::<f64>::from_elem((n, 32, 128, 128), 0.5);
    let w = Array4::<f64>::from_elem((16, 32, 3, 3), 0.01);
    let b = Array1::<f64>::zeros(16);
    let flops = 2.0 * (n * 16 * 32 * 9 * 128 * 128) as f64;
    bench("conv32x16@128 fwd", flops, || { let _ = conv2d_forward(&x, &w, &b, 1, 1); });

    // raw GEMM comparison at the L0 shape [16,144]x[144,16384]
    let a = ndarray::Array2::<f64>::from_elem((16, 144), 0.01);
    let bm = ndarray::Array2::<f64>::from_elem((144, 16384), 0.5);
    let flops = 2.0 * (16 * 144 * 16384) as f64;
    bench("gemm 16x144x16384", flops, || { let _ = a.dot(&bm); });
    let a = ndarray::Array2::<f64>::from_elem((64, 144), 0.01);
    let flops = 2.0 * (64 * 144 * 16384) as f64;
    bench("gemm 64x144x16384", flops, || { let _ = a.dot(&bm); });
}

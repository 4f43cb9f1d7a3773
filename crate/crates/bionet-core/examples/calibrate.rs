// Scratch calibration run for desk-scale settings (deleted before release).
use bionet_core::phantom::{generate_phantom, PhantomConfig};
use bionet_core::training::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let e1: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let e2: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let mode: AblationMode = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(AblationMode::Bionet);

    let pc = PhantomConfig { seed: 7, ..PhantomConfig::default() };
    let t0 = Instant::now();
    let train: Vec<_> = (0..64).map(|i| generate_phantom(&pc, i).unwrap()).collect();
    let test: Vec<_> = (64..80).map(|i| generate_phantom(&pc, i).unwrap()).collect();
    eprintln!("phantoms: {:.1}s", t0.elapsed().as_secs_f64());

    let cfg1 = TrainConfig { epochs: e1, seed: 11, base_width: 16, ..TrainConfig::desk_scale() };
    let t0 = Instant::now();
    let (bio, log1) = train_bio_stage(&train, &test, &cfg1).unwrap();
    eprintln!("stage1 {e1} epochs: {:.1}s", t0.elapsed().as_secs_f64());
    for r in &log1.records {
        eprintln!("  ep {:2} lr {:.4} train {:.3} val_mae {:.3} ({:.1}s)", r.epoch, r.lr, r.loss_total, r.val_thickness_mae.unwrap(), r.wall_secs);
    }

    let cfg2 = TrainConfig { epochs: e2, seed: 12, base_width: 16, ablation_mode: mode, ..TrainConfig::desk_scale() };
    let t0 = Instant::now();
    let (_bundle, log2) = train_cascade_stage(&train, &test, Some(&bio), &cfg2).unwrap();
    eprintln!("stage2 {e2} epochs ({mode}): {:.1}s", t0.elapsed().as_secs_f64());
    for r in &log2.records {
        let v = r.val.as_ref().unwrap();
        eprintln!("  ep {:2} lr {:.4} ml {:?} ch {:?} bio {:?} tot {:.3} | DI {:.4} IOU {:.4} AUSDE {:?} ({:.1}s)",
            r.epoch, r.lr, r.loss_multilayers.map(|v| (v*1000.).round()/1000.), r.loss_choroid.map(|v| (v*1000.).round()/1000.),
            r.loss_bio.map(|v| (v*1000.).round()/1000.), r.loss_total, v.dice, v.iou, v.ausde_mean.map(|v| (v*100.).round()/100.), r.wall_secs);
    }
}

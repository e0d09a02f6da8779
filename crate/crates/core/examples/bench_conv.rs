use augrmixat::data::generate_shapes;
use augrmixat::trainer::*;
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let n_train: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(384);
    let epochs: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(30);
    let seed: u64 = args.get(3).map(|s| s.parse().unwrap()).unwrap_or(1);

    let train_ds = generate_shapes(n_train, 3, 16, 100 + seed).unwrap();
    let eval_ds = generate_shapes(240, 3, 16, 9_000).unwrap();

    for (name, mode, l1, l2) in [
        ("standard", TrainMode::Standard, 1.0f32, 1.0f32),
        ("pgdat", TrainMode::Pgdat, 1.0, 1.0),
        ("augrmixat-1-1", TrainMode::Augrmixat, 1.0, 1.0),
        ("augrmixat-1-4", TrainMode::Augrmixat, 1.0, 4.0),
        ("augrmixat-1-8", TrainMode::Augrmixat, 1.0, 8.0),
        ("augrmixat-4-1", TrainMode::Augrmixat, 4.0, 1.0),
    ] {
        let cfg = TrainConfig {
            mode,
            epochs,
            seed,
            threads: 2,
            lambda1: l1,
            lambda2: l2,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let (stack, reports) = train(&train_ds, &cfg).unwrap();
        let train_s = t0.elapsed().as_secs_f64();
        let row = sweep_eval(&stack, &eval_ds, 777).unwrap();
        let last = reports.last().unwrap();
        println!(
            "{name:15} {train_s:5.1}s | ce {:.3} jsau {:.3} jsad {:.3} top1 {:.3} | clean {:.3} fgsm {:.3} pgd10 {:.3} pgd20 {:.3} cw20 {:.3} corr {:.3} occ {:.3}",
            last.ce, last.js_aug, last.js_adv, last.train_top1, row.clean, row.fgsm, row.pgd10, row.pgd20, row.cw20, row.corr, row.occ
        );
    }
}

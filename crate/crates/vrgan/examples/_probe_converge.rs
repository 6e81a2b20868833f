use vrgan::config::RunConfig;
use vrgan::toydata::gen_toy_dataset;
use vrgan::train::{train_vrgan, TrainData};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .init();
    let mut cfg = RunConfig::toy_desk();
    cfg.toy.noise_sigma_px = 1.0;
    cfg.train.max_epochs = 30;
    cfg.train.early_stop_patience = 60;
    cfg.train.seed = 1000;
    let ds = gen_toy_dataset(&cfg.toy).unwrap();
    let data = TrainData::from_toy(&ds);
    let t0 = std::time::Instant::now();
    let out = train_vrgan(
        &cfg.train,
        cfg.model.generator.clone(),
        cfg.model.regressor.clone(),
        &data,
    )
    .unwrap();
    eprintln!(
        "total {:.1}s best epoch {} ncc {:.4}",
        t0.elapsed().as_secs_f64(),
        out.best_epoch,
        out.best_val_ncc
    );
}

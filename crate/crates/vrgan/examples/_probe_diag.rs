use vrgan::config::RunConfig;
use vrgan::eval::{ncc, EvalPair, MapModel};
use vrgan::toydata::gen_toy_dataset;
use vrgan::train::{train_vrgan, TrainData};
use vrgan::ImageRaster;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .init();
    let mut cfg = RunConfig::toy_desk();
    cfg.train.max_epochs = 24;
    cfg.train.early_stop_patience = 60;
    cfg.train.seed = 1000;
    let ds = gen_toy_dataset(&cfg.toy).unwrap();
    let data = TrainData::from_toy(&ds);
    let out = train_vrgan(
        &cfg.train,
        cfg.model.generator.clone(),
        cfg.model.regressor.clone(),
        &data,
    )
    .unwrap();
    eprintln!("best epoch {} ncc {:.4}", out.best_epoch, out.best_val_ncc);

    let model = MapModel::Vrgan {
        unet: &out.state.gen,
        stats: out.state.stats.clone(),
    };
    // per-sample ncc binned by band width
    let mut rows: Vec<(f64, f64)> = Vec::new();
    for p in &ds.val {
        let ep = EvalPair::from_toy(p);
        let d = model.delta_map(&ep.image, ep.y, ep.y_prime);
        let score = ncc(&p.gt_map, &ImageRaster::new(d.clone())).unwrap();
        let width = cfg.toy.side_scale * (ep.y - ep.y_prime).abs();
        rows.push((width, score));
    }
    rows.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    for chunk in rows.chunks(40) {
        let w0 = chunk[0].0;
        let w1 = chunk[chunk.len() - 1].0;
        let m = chunk.iter().map(|r| r.1).sum::<f64>() / chunk.len() as f64;
        eprintln!(
            "width {:>4.1}-{:>4.1} px: mean ncc {:.4} (n={})",
            w0,
            w1,
            m,
            chunk.len()
        );
    }
    // dump a few maps
    std::fs::create_dir_all("/tmp/diag").unwrap();
    for (k, p) in ds.val.iter().take(6).enumerate() {
        let ep = EvalPair::from_toy(p);
        let d = model.delta_map(&ep.image, ep.y, ep.y_prime);
        let dr = ImageRaster::new(d);
        let score = ncc(&p.gt_map, &dr).unwrap();
        eprintln!(
            "sample {k}: y {:.3} y' {:.3} ncc {:.3} pred[min {:.2} max {:.2} meanabs {:.3}]",
            ep.y,
            ep.y_prime,
            score,
            dr.data.iter().cloned().fold(f32::INFINITY, f32::min),
            dr.data.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
            dr.data.iter().map(|v| v.abs()).sum::<f32>() / dr.data.len() as f32
        );
        dr.save_png(std::path::Path::new(&format!("/tmp/diag/pred_{k}.png"))).unwrap();
        p.gt_map.save_png(std::path::Path::new(&format!("/tmp/diag/gt_{k}.png"))).unwrap();
        ImageRaster::new(ep.image.clone())
            .save_png(std::path::Path::new(&format!("/tmp/diag/x_{k}.png")))
            .unwrap();
    }
}

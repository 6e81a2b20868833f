use ndarray::Array2;
use vrgan::config::RunConfig;
use vrgan::eval::ncc;
use vrgan::toydata::{gen_toy_dataset, gt_effect_map};
use vrgan::ImageRaster;

fn blur(a: &Array2<f32>, sigma: f64) -> Array2<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f32> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp() as f32)
        .collect();
    let s: f32 = k.iter().sum();
    let k: Vec<f32> = k.iter().map(|v| v / s).collect();
    let (h, w) = a.dim();
    let mut tmp = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (d, kv) in k.iter().enumerate() {
                let jj = (j as i64 + d as i64 - r).clamp(0, w as i64 - 1) as usize;
                acc += kv * a[[i, jj]];
            }
            tmp[[i, j]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut acc = 0.0;
            for (d, kv) in k.iter().enumerate() {
                let ii = (i as i64 + d as i64 - r).clamp(0, h as i64 - 1) as usize;
                acc += kv * tmp[[ii, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

fn main() {
    let cfg = RunConfig::toy_desk();
    let ds = gen_toy_dataset(&cfg.toy).unwrap();
    let pairs = &ds.val;

    // band width stats
    let mut widths: Vec<f64> = pairs
        .iter()
        .map(|p| cfg.toy.side_scale * (p.sample.y - p.y_prime).abs())
        .collect();
    widths.sort_by(|a, b| a.partial_cmp(b).unwrap());
    eprintln!(
        "band width px: min {:.1} p10 {:.1} med {:.1} p90 {:.1} max {:.1}",
        widths[0],
        widths[pairs.len() / 10],
        widths[pairs.len() / 2],
        widths[9 * pairs.len() / 10],
        widths[pairs.len() - 1]
    );

    for sigma in [0.5, 1.0, 1.5, 2.0] {
        let mut accum = 0.0;
        for p in pairs {
            let b = ImageRaster::new(blur(&p.gt_map.data, sigma));
            accum += ncc(&p.gt_map, &b).unwrap();
        }
        eprintln!("blur sigma {sigma}: mean ncc {:.4}", accum / pairs.len() as f64);
    }

    for delta in [0.01, 0.02, 0.04] {
        let mut accum = 0.0;
        for p in pairs {
            let wrong = gt_effect_map(
                (p.sample.y + delta).min(1.0),
                (p.y_prime - delta).max(0.0),
                &cfg.toy,
            )
            .unwrap();
            accum += ncc(&p.gt_map, &wrong).unwrap();
        }
        eprintln!(
            "target offset +-{delta}: mean ncc {:.4}",
            accum / pairs.len() as f64
        );
    }

    // blurred AND slightly offset, the realistic failure mode
    for (sigma, delta) in [(1.0, 0.01), (1.5, 0.02)] {
        let mut accum = 0.0;
        for p in pairs {
            let wrong = gt_effect_map(
                (p.sample.y + delta).min(1.0),
                (p.y_prime - delta).max(0.0),
                &cfg.toy,
            )
            .unwrap();
            let b = ImageRaster::new(blur(&wrong.data, sigma));
            accum += ncc(&p.gt_map, &b).unwrap();
        }
        eprintln!(
            "blur {sigma} + offset {delta}: mean ncc {:.4}",
            accum / pairs.len() as f64
        );
    }
}

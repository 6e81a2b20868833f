//! Pair lung-function tests with imaging exams, preprocess the images and
//! build a registered subtraction ground truth for one longitudinal pair.
//!
//! Pairing is mutual-nearest-neighbor per subject within a day gap; the
//! preprocessing pipeline is center crop, bilinear resize, crop, histogram
//! equalization and an exact [-1, 1] rescale. The ground-truth map is the
//! registered difference image between the affected and unaffected exams.
//!
//! Run with: cargo run --release --example pair_and_preprocess

use chrono::NaiveDate;
use vrgan::toydata::substream;
use vrgan::xraydata::{
    pair_exams, preprocess, smooth_test_image, warp_affine, AffineTransform, ExamRef, PftRecord,
    XraySample,
};

fn d(s: &str) -> NaiveDate {
    NaiveDate::parse_from_str(s, "%Y-%m-%d").expect("date literal")
}

fn main() -> vrgan::Result<()> {
    // Two subjects, one x-ray each within the 30-day window, one orphan PFT.
    let pfts = vec![
        PftRecord::new("s01", d("2019-03-01"), 2.8, 3.5)?, // ratio 0.80
        PftRecord::new("s01", d("2020-06-15"), 1.9, 3.4)?, // ratio 0.56
        PftRecord::new("s02", d("2019-05-10"), 3.1, 4.0)?, // no x-ray in range
    ];
    let xrays = vec![
        ExamRef { subject_id: "s01".into(), exam_date: d("2019-03-05") },
        ExamRef { subject_id: "s01".into(), exam_date: d("2020-06-20") },
        ExamRef { subject_id: "s02".into(), exam_date: d("2020-01-01") },
    ];
    let pairing = pair_exams(&pfts, &xrays, 30);
    for &(pi, xi) in &pairing.pairs {
        println!(
            "matched {} PFT {} (ratio {:.2}) with x-ray {}",
            pfts[pi].subject_id, pfts[pi].exam_date, pfts[pi].ratio, xrays[xi].exam_date
        );
    }
    println!(
        "unmatched: {} PFTs, {} x-rays",
        pairing.unmatched_pfts.len(),
        pairing.unmatched_xrays.len()
    );

    // Preprocess two synthetic "acquisitions" of the same subject, the later
    // one shifted as if positioned differently, then register and subtract.
    let raw = smooth_test_image(96, 9);
    let shifted = warp_affine(&raw, &AffineTransform::rotation_scale_shift(2.0, 1.0, 2.0, 1.0));
    let mut rng = substream(0, 0x30);
    let x_img = preprocess(&raw, 64, 72, false, &mut rng)?;
    let t_img = preprocess(&shifted, 64, 72, false, &mut rng)?;
    let x_sample = XraySample {
        subject_id: "s01".into(),
        exam_date: d("2019-03-05"),
        image: x_img,
        y: pfts[0].ratio,
        days_to_pft: 4,
    };
    let target_sample = XraySample {
        subject_id: "s01".into(),
        exam_date: d("2020-06-20"),
        image: t_img,
        y: pfts[1].ratio,
        days_to_pft: 5,
    };
    let study = vrgan::xraydata::build_gt_map(x_sample, target_sample)?;
    let gt = &study.gt_map.data;
    println!(
        "gt map: range [{:.3}, {:.3}], registration converged = {}",
        gt.iter().cloned().fold(f32::INFINITY, f32::min),
        gt.iter().cloned().fold(f32::NEG_INFINITY, f32::max),
        study.registration_converged
    );
    Ok(())
}

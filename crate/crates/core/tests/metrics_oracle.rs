mod common;

use common::{loop_confusion, loop_csi, loop_fss, loop_hss, loop_mse, random_field};
use ndarray::{s, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use raindiff::metrics::{
    binarize, confusion, csi, evaluate_report, fss, hss, mse_metric, Band, HssMode, ReportOptions,
};

#[test]
fn scores_match_loop_oracles_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let p = random_field(&mut rng, 16, 16);
        let o = random_field(&mut rng, 16, 16);
        for t in [0.5, 2.0, 8.0] {
            let (pm, om) = (binarize(p.view(), t), binarize(o.view(), t));
            let c = confusion(pm.view(), om.view()).unwrap();
            assert_eq!(c, loop_confusion(pm.view(), om.view()));
            assert_eq!(csi(&c), loop_csi(&c));
            assert_eq!(hss(&c, HssMode::Standard), loop_hss(&c, false));
            assert_eq!(hss(&c, HssMode::Paper), loop_hss(&c, true));
            for n in [1, 3, 5] {
                assert_eq!(
                    fss(p.view(), o.view(), t, n).unwrap(),
                    loop_fss(pm.view(), om.view(), n)
                );
            }
        }
        assert_eq!(mse_metric(p.view(), o.view()).unwrap(), loop_mse(p.view(), o.view()));
    }
}

#[test]
fn report_pools_frames_like_a_single_tall_field() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pred = Array3::from_shape_fn((3, 8, 8), |_| 0.0)
        + &Array3::from_shape_vec((3, 8, 8), random_field(&mut rng, 24, 8).into_raw_vec_and_offset().0)
            .unwrap();
    let obs = Array3::from_shape_vec((3, 8, 8), random_field(&mut rng, 24, 8).into_raw_vec_and_offset().0)
        .unwrap();
    let report = evaluate_report(pred.view(), obs.view(), &ReportOptions::default()).unwrap();
    for (k, band) in Band::REPORT.iter().enumerate() {
        let mut c = raindiff::metrics::ConfusionCounts::default();
        for f in 0..3 {
            let pm = pred.slice(s![f, .., ..]).mapv(|v| band.event(v));
            let om = obs.slice(s![f, .., ..]).mapv(|v| band.event(v));
            c = c + loop_confusion(pm.view(), om.view());
        }
        assert_eq!(report.bands[k].counts, c);
        assert_eq!(report.bands[k].csi, loop_csi(&c));
    }
    let mut sq = 0.0;
    for (a, b) in pred.iter().zip(obs.iter()) {
        sq += (a - b) * (a - b);
    }
    assert_eq!(report.mse, sq / pred.len() as f64);
}

#[test]
fn fss_extremes_and_neighbourhood_growth() {
    let mut obs = Array2::<f64>::zeros((16, 16));
    obs.slice_mut(s![6..9, 6..9]).fill(10.0);
    assert_eq!(fss(obs.view(), obs.view(), 2.0, 5).unwrap(), Some(1.0));
    let zero = Array2::<f64>::zeros((16, 16));
    assert_eq!(fss(zero.view(), obs.view(), 2.0, 5).unwrap(), Some(0.0));
    let mut shifted = Array2::<f64>::zeros((16, 16));
    shifted.slice_mut(s![6..9, 7..10]).fill(10.0);
    let f1 = fss(shifted.view(), obs.view(), 2.0, 1).unwrap().unwrap();
    let f5 = fss(shifted.view(), obs.view(), 2.0, 5).unwrap().unwrap();
    assert!(f5 >= f1, "FSS(5) = {f5} < FSS(1) = {f1}");
}

#[test]
fn heidke_forms_on_a_perfect_forecast() {
    let c = raindiff::metrics::ConfusionCounts { tp: 5, fp: 0, fn_: 0, tn: 5 };
    assert_eq!(hss(&c, HssMode::Standard), Some(1.0));
    let paper = hss(&c, HssMode::Paper).unwrap();
    assert!((paper - 25.0 / 75.0).abs() < 1e-9);
}

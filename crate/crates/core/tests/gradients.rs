//! Central finite-difference verification of every loss gradient at f64,
//! on random small inputs with a moderate temperature.

use crossfeat::losses::{
    bongard_infonce, decorrelation_loss, info_nce, metadata_loss, respace_diversity_loss,
    rpm_reasoning_loss,
};
use crossfeat::rng::Stream;
use ndarray::{Array1, Array2};

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const TEMP: f64 = 0.1;

fn unit_vec(stream: &mut Stream, d: usize) -> Array1<f64> {
    let mut v = Array1::from_shape_simple_fn(d, || stream.normal());
    let norm = v.dot(&v).sqrt();
    v.mapv_inplace(|x| x / norm);
    v
}

fn unit_rows(stream: &mut Stream, n: usize, d: usize) -> Array2<f64> {
    let mut m = Array2::from_shape_simple_fn((n, d), || stream.normal());
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        row.mapv_inplace(|x| x / norm);
    }
    m
}

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8)
}

/// Central differences over one flattened input, comparing against the
/// analytic gradient produced by the loss itself.
fn check_input(
    label: &str,
    analytic: &[f64],
    data: &mut [f64],
    eval: &mut dyn FnMut(&[f64]) -> f64,
) {
    assert_eq!(analytic.len(), data.len());
    for i in 0..data.len() {
        let orig = data[i];
        data[i] = orig + H;
        let up = eval(data);
        data[i] = orig - H;
        let down = eval(data);
        data[i] = orig;
        let fd = (up - down) / (2.0 * H);
        let err = rel_err(fd, analytic[i]);
        assert!(
            err < TOL,
            "{label}[{i}]: fd {fd:.8e} vs analytic {:.8e} (rel {err:.2e})",
            analytic[i]
        );
    }
}

#[test]
fn info_nce_gradients_match_finite_differences() {
    for draw in 0..20 {
        let mut stream = Stream::substream(100, "fd-infonce", draw);
        let d = 2 + stream.below(7); // d <= 8
        let m = 1 + stream.below(6); // M <= 6
        let pos = unit_vec(&mut stream, d);
        let pos_t = unit_vec(&mut stream, d);
        let negs = unit_rows(&mut stream, m, d);
        let (_, grads) = info_nce(pos.view(), pos_t.view(), negs.view(), TEMP).unwrap();

        let mut pos_data = pos.to_vec();
        check_input(
            "d_pos",
            grads.d_pos.as_slice().unwrap(),
            &mut pos_data,
            &mut |p| {
                let pv = Array1::from_vec(p.to_vec());
                info_nce(pv.view(), pos_t.view(), negs.view(), TEMP)
                    .unwrap()
                    .0
            },
        );
        let mut pt_data = pos_t.to_vec();
        check_input(
            "d_pos_tilde",
            grads.d_pos_tilde.as_slice().unwrap(),
            &mut pt_data,
            &mut |p| {
                let pv = Array1::from_vec(p.to_vec());
                info_nce(pos.view(), pv.view(), negs.view(), TEMP).unwrap().0
            },
        );
        let mut neg_data = negs.clone().into_raw_vec_and_offset().0;
        check_input(
            "d_negatives",
            grads.d_negatives.as_slice().unwrap(),
            &mut neg_data,
            &mut |p| {
                let nv = Array2::from_shape_vec((m, d), p.to_vec()).unwrap();
                info_nce(pos.view(), pos_t.view(), nv.view(), TEMP).unwrap().0
            },
        );
    }
}

#[test]
fn bongard_infonce_gradient_matches_finite_differences() {
    // The aggregate routes pair and mean gradients back to all 14 rows.
    for draw in 0..20 {
        let mut stream = Stream::substream(101, "fd-bongard", draw);
        let d = 2 + stream.below(5);
        let z = unit_rows(&mut stream, 14, d);
        let (_, dz) = bongard_infonce(z.view(), TEMP).unwrap();
        let mut data = z.clone().into_raw_vec_and_offset().0;
        check_input("dz", dz.as_slice().unwrap(), &mut data, &mut |p| {
            let zv = Array2::from_shape_vec((14, d), p.to_vec()).unwrap();
            bongard_infonce(zv.view(), TEMP).unwrap().0
        });
    }
}

#[test]
fn decorrelation_gradient_matches_finite_differences() {
    for draw in 0..20 {
        let mut stream = Stream::substream(102, "fd-decorr", draw);
        let n = 2 + stream.below(5); // N <= 6
        let d = 2 + stream.below(7); // d <= 8
        let batch = Array2::from_shape_simple_fn((n, d), || stream.normal());
        let (_, dx) = decorrelation_loss(batch.view()).unwrap();
        let mut data = batch.clone().into_raw_vec_and_offset().0;
        check_input("dx", dx.as_slice().unwrap(), &mut data, &mut |p| {
            let bv = Array2::from_shape_vec((n, d), p.to_vec()).unwrap();
            decorrelation_loss(bv.view()).unwrap().0
        });
    }
}

#[test]
fn metadata_gradients_match_finite_differences() {
    for draw in 0..20 {
        let mut stream = Stream::substream(103, "fd-meta", draw);
        let s = 1 + stream.below(3);
        let k = 2 + stream.below(5); // K <= 6
        let d = 2 + stream.below(7);
        // Raw (non-normalized) inputs: the loss normalizes internally and the
        // gradient must include that chain.
        let qbar = Array2::from_shape_simple_fn((s, d), || stream.normal());
        let codebook = Array2::from_shape_simple_fn((k, d), || stream.normal());
        let targets: Vec<usize> = (0..s).map(|_| stream.below(k)).collect();
        let (_, grads) = metadata_loss(qbar.view(), codebook.view(), &targets, TEMP).unwrap();

        let mut q_data = qbar.clone().into_raw_vec_and_offset().0;
        check_input("d_qbar", grads.d_qbar.as_slice().unwrap(), &mut q_data, &mut |p| {
            let qv = Array2::from_shape_vec((s, d), p.to_vec()).unwrap();
            metadata_loss(qv.view(), codebook.view(), &targets, TEMP)
                .unwrap()
                .0
        });
        let mut t_data = codebook.clone().into_raw_vec_and_offset().0;
        check_input(
            "d_codebook",
            grads.d_codebook.as_slice().unwrap(),
            &mut t_data,
            &mut |p| {
                let tv = Array2::from_shape_vec((k, d), p.to_vec()).unwrap();
                metadata_loss(qbar.view(), tv.view(), &targets, TEMP).unwrap().0
            },
        );
    }
}

#[test]
fn respace_diversity_gradient_matches_finite_differences() {
    for draw in 0..20 {
        let mut stream = Stream::substream(104, "fd-div", draw);
        let m = 2 + stream.below(5);
        let d = 2 + stream.below(7);
        let basis = Array2::from_shape_simple_fn((m, d), || stream.normal());
        let (_, grad) = respace_diversity_loss(basis.view(), TEMP);
        let mut data = basis.clone().into_raw_vec_and_offset().0;
        check_input("d_basis", grad.as_slice().unwrap(), &mut data, &mut |p| {
            let bv = Array2::from_shape_vec((m, d), p.to_vec()).unwrap();
            respace_diversity_loss(bv.view(), TEMP).0
        });
    }
}

#[test]
fn reasoning_gradient_matches_finite_differences() {
    for draw in 0..20 {
        let mut stream = Stream::substream(105, "fd-ce", draw);
        let n = 2 + stream.below(7);
        let answer = stream.below(n);
        let scores = Array1::from_shape_simple_fn(n, || stream.normal());
        let (_, grad) = rpm_reasoning_loss(scores.view(), answer).unwrap();
        let mut data = scores.to_vec();
        check_input("d_scores", grad.as_slice().unwrap(), &mut data, &mut |p| {
            let sv = Array1::from_vec(p.to_vec());
            rpm_reasoning_loss(sv.view(), answer).unwrap().0
        });
    }
}

//! Plain-array references shared by the integration tests.
#![allow(dead_code)]

use odegrud::missingness::Series;
use odegrud::params::ParamSet;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn matvec(p: &ParamSet, name: &str, x: &[f64]) -> Vec<f64> {
    let t = p.get(name).unwrap();
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

pub fn pre(p: &ParamSet, sfx: &str, x: &[f64], h: &[f64], m: Option<&[f64]>) -> Vec<f64> {
    let wx = matvec(p, &format!("cell.w{sfx}"), x);
    let uh = matvec(p, &format!("cell.u{sfx}"), h);
    let vm = m.map(|m| matvec(p, &format!("cell.v{sfx}"), m));
    let b = p.get(&format!("cell.b{sfx}")).unwrap().data();
    (0..h.len())
        .map(|i| wx[i] + uh[i] + vm.as_ref().map_or(0.0, |v| v[i]) + b[i])
        .collect()
}

/// Plain-array GRU over the rows of `x`, with mask terms when `m` is given.
pub fn reference_logit(p: &ParamSet, hidden: usize, rows: &[Vec<f64>], masks: Option<&[Vec<f64>]>) -> f64 {
    let mut h = vec![0.0; hidden];
    for (t, x) in rows.iter().enumerate() {
        let m = masks.map(|ms| ms[t].as_slice());
        let r: Vec<f64> = pre(p, "_r", x, &h, m).into_iter().map(sigmoid).collect();
        let z: Vec<f64> = pre(p, "_z", x, &h, m).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(&h).map(|(a, b)| a * b).collect();
        let c: Vec<f64> = pre(p, "", x, &rh, m).into_iter().map(f64::tanh).collect();
        h = (0..hidden).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
    }
    let w = p.get("head.w").unwrap().data();
    w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + p.get("head.b").unwrap().data()[0]
}

pub fn random_series(rng: &mut ChaCha8Rng, dim: usize, len: usize, p_obs: f64, label: u8) -> Series {
    let mut t = rng.random_range(0.0..1.0);
    let (mut times, mut values, mut mask) = (vec![], vec![], vec![]);
    for _ in 0..len {
        times.push(t);
        t += rng.random_range(0.2..2.0);
        for _ in 0..dim {
            let obs = rng.random_bool(p_obs);
            mask.push(if obs { 1.0 } else { 0.0 });
            values.push(rng.random_range(-2.0..2.0));
        }
    }
    Series::new("r", dim, times, values, mask, label).unwrap()
}

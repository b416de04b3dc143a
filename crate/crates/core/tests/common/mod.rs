#![allow(dead_code)]

use h3trans::data::{Dataset, InteractionRecord};
use h3trans::numeric::{Tape, Tensor2, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in `[-1, 1]`.
pub fn rand_tensor(rows: usize, cols: usize, seed: u64) -> Tensor2 {
    let mut r = rng(seed);
    Tensor2::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| r.random_range(-1.0..=1.0))
            .collect(),
    )
    .unwrap()
}

pub fn rec(user: usize, item: usize, domain: usize, timestamp: u64) -> InteractionRecord {
    InteractionRecord {
        user,
        item,
        domain,
        timestamp,
        rating: None,
    }
}

/// Dataset sized by the largest ids in `records`.
pub fn dataset(records: &[(usize, usize, usize, u64)], domains: usize) -> Dataset {
    let users = records.iter().map(|r| r.0).max().map_or(0, |u| u + 1);
    let items = records.iter().map(|r| r.1).max().map_or(0, |i| i + 1);
    let recs = records
        .iter()
        .map(|&(u, i, m, t)| rec(u, i, m, t))
        .collect();
    Dataset::from_records(recs, domains, users, items).unwrap()
}

/// Random dataset where every user clicks `per_user` distinct items in each
/// domain; domain `m` owns items `m * items_per_domain ..`.
pub fn random_dataset(
    users: usize,
    items_per_domain: usize,
    domains: usize,
    per_user: usize,
    seed: u64,
) -> Dataset {
    let mut r = rng(seed);
    let mut records = Vec::new();
    let mut ts = 0;
    for u in 0..users {
        for m in 0..domains {
            let mut picked: Vec<usize> = Vec::new();
            while picked.len() < per_user.min(items_per_domain) {
                let i = m * items_per_domain + r.random_range(0..items_per_domain);
                if !picked.contains(&i) {
                    picked.push(i);
                }
            }
            for i in picked {
                ts += 1;
                records.push(rec(u, i, m, ts));
            }
        }
    }
    Dataset::from_records(records, domains, users, items_per_domain * domains).unwrap()
}

/// Central finite differences of the scalar built by `f` against tape
/// gradients, over every entry of every input. Returns the largest relative
/// error, `|a - n| / max(|a|, |n|)`, with differences below `1e-9` in both
/// magnitudes counted as exact.
pub fn gradient_error(inputs: &[Tensor2], f: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let eval = |xs: &[Tensor2]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs);
        t.value(o).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (n, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[n])
            .cloned()
            .unwrap_or_else(|| Tensor2::zeros(x.rows(), x.cols()));
        for e in 0..x.data().len() {
            let mut xs = inputs.to_vec();
            xs[n].data_mut()[e] += h;
            let up = eval(&xs);
            xs[n].data_mut()[e] -= 2.0 * h;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * h);
            worst = worst.max(relative_error(analytic.data()[e], numeric));
        }
    }
    worst
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < 1e-9 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// `sum(x * probe)` for a fixed random `probe`, reducing any output to a
/// scalar whose gradient exercises every entry.
pub fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let (r, c) = tape.value(x).shape();
    let probe = tape.constant(rand_tensor(r, c, seed));
    let dots = tape.inner_product_rows(x, probe).unwrap();
    tape.sum_all(dots)
}

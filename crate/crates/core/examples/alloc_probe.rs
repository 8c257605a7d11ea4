use std::time::Instant;

fn main() {
    // Mimic 600 retained kernel-row buffers of b x n doubles.
    let b = 100;
    let n = 2200;
    let steps = 600;
    let t0 = Instant::now();
    let mut keep: Vec<Vec<f64>> = Vec::with_capacity(steps);
    for s in 0..steps {
        let mut v = vec![0.0f64; b * n];
        for (i, x) in v.iter_mut().enumerate() {
            *x = (s * 31 + i) as f64 * 1e-9;
        }
        keep.push(v);
    }
    println!("retain {} MB: {:?}", keep.len() * b * n * 8 / (1024 * 1024), t0.elapsed());
    drop(keep);

    let t1 = Instant::now();
    let mut acc = 0.0f64;
    for s in 0..steps {
        let mut v = vec![0.0f64; b * n];
        for (i, x) in v.iter_mut().enumerate() {
            *x = (s * 31 + i) as f64 * 1e-9;
        }
        acc += v[0] + v[b * n - 1];
    }
    println!("transient: {:?} ({acc})", t1.elapsed());
}

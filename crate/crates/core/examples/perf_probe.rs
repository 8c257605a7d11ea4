use gprollout::exec::ExecMode;
use gprollout::linalg;
use gprollout::rng::StreamRng;
use std::time::Instant;

fn main() {
    let n = 2200;
    let mut rng = StreamRng::new(1, "perf");
    let g: Vec<f64> = (0..n * 8).map(|_| rng.next_normal()).collect();
    // SPD via kernel-ish structure: A = G G^T + n I
    let mut a = linalg::matmul_transpose_b(ExecMode::Sequential, &g, &g, n, 8, n);
    for i in 0..n { a[i*n+i] += n as f64; }
    let t0 = Instant::now();
    let mut l = a.clone();
    linalg::cholesky_in_place(ExecMode::Sequential, &mut l, n).unwrap();
    let chol_t = t0.elapsed();
    let flops = (n as f64).powi(3) / 3.0;
    println!("cholesky n={n}: {:?} ({:.2} GFLOPS)", chol_t, flops / chol_t.as_secs_f64() / 1e9);

    let t0 = Instant::now();
    let mut y: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
    linalg::solve_lower_in_place(ExecMode::Sequential, &l, &mut y, n, 1);
    linalg::solve_lower_transpose_in_place(ExecMode::Sequential, &l, &mut y, n, 1);
    println!("alpha solves: {:?}", t0.elapsed());

    // trsm with n rhs (murray backward cost)
    let t0 = Instant::now();
    let mut b: Vec<f64> = (0..n * n).map(|_| 0.1).collect();
    linalg::solve_lower_transpose_in_place(ExecMode::Sequential, &l, &mut b, n, n);
    let trsm_t = t0.elapsed();
    println!("trsm n rhs: {:?} ({:.2} GFLOPS)", trsm_t, (n as f64).powi(3) / trsm_t.as_secs_f64() / 1e9);

    // kernel row timing: b=100 rows against n=2200, d=3
    let d = 3;
    let xt: Vec<f64> = (0..n * d).map(|_| rng.next_normal()).collect();
    let xt_cols = gprollout::kernel::to_col_major(&xt, n, d);
    let xs: Vec<f64> = (0..100 * d).map(|_| rng.next_normal()).collect();
    let w = vec![1.0; d];
    let t0 = Instant::now();
    let iters = 600;
    for _ in 0..iters {
        let k = gprollout::kernel::se_matrix(ExecMode::Sequential, &xs, &xt_cols, 100, n, d, &w, 1.0);
        std::hint::black_box(&k);
    }
    let kt = t0.elapsed();
    println!("kernel 100x2200 x{iters}: {:?} ({:.1} us per matrix)", kt, kt.as_micros() as f64 / iters as f64);

    // gemm 100x2200 * 2200x32 (root variance cost)
    let r = 32;
    let root: Vec<f64> = (0..n * r).map(|_| 0.01).collect();
    let kx: Vec<f64> = (0..100 * n).map(|_| 0.5).collect();
    let t0 = Instant::now();
    for _ in 0..iters {
        let v = linalg::matmul(ExecMode::Sequential, &kx, &root, 100, n, r);
        std::hint::black_box(&v);
    }
    let vt = t0.elapsed();
    println!("gemm 100x2200x32 x{iters}: {:?} ({:.2} GFLOPS)", vt, (2.0 * 100.0 * n as f64 * r as f64 * iters as f64) / vt.as_secs_f64() / 1e9);
}

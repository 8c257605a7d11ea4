use gprollout::array::Array;
use gprollout::exec::ExecMode;
use gprollout::gp::{GpEnsemble, VarianceKind};
use gprollout::policy::{InitScheme, MlpPolicy};
use gprollout::tape::Tape;
use gprollout::trainer::{rollout_batch, RewardParams};
use std::time::Instant;

fn main() {
    let ens = GpEnsemble::load(std::path::Path::new("/tmp/run2/model.gpm")).unwrap();
    let policy = MlpPolicy::init(2, 0, &[8, 8], 1, 1, InitScheme::He).unwrap();
    let rp = RewardParams::boom_default();
    let b = 100;
    let h = 300;
    let row = ens.normalizer.normalize_state(&[-0.9, 0.0]);
    let goal = ens.normalizer.normalize_state(&[0.0, 0.0]);
    let mut s0d = Vec::new();
    let mut gd = Vec::new();
    for _ in 0..b { s0d.extend_from_slice(&row); gd.extend_from_slice(&goal); }
    let s0 = Array::matrix(b, 2, s0d);
    let goals = Array::matrix(b, 2, gd);
    let ids: Vec<u64> = (0..b as u64).collect();

    for store in [true, false] {
        let t0 = Instant::now();
        let mut tape = Tape::with_mode(ExecMode::Sequential);
        let vars = policy.tape_params(&mut tape);
        let out = rollout_batch(&mut tape, &ens, &policy, &vars, &s0, &goals, h, 7, &ids, &rp, VarianceKind::Root, b, store).unwrap();
        let fwd = t0.elapsed();
        let t1 = Instant::now();
        let grads = tape.backward(out.loss).unwrap();
        let bwd = t1.elapsed();
        let t2 = Instant::now();
        let flat = policy.grads_flat(&grads, &vars);
        std::hint::black_box(&flat);
        println!("store_rows={store}: forward {:?} backward {:?} collect {:?} peak {} MB",
            fwd, bwd, t2.elapsed(), tape.peak_bytes() / (1024*1024));
        drop(tape);
    }
}

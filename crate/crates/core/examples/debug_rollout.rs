use gprollout::array::Array;
use gprollout::exec::ExecMode;
use gprollout::gp::{GpEnsemble, VarianceKind, predict};
use gprollout::policy::{InitScheme, MlpPolicy};
use gprollout::rng::keyed_normal;

fn main() {
    let ens = GpEnsemble::load(std::path::Path::new("/tmp/run2/model.gpm")).unwrap();
    println!("n={} d={} p={} q={}", ens.n(), ens.d(), ens.p(), ens.q());
    for (m, out) in ens.outputs.iter().enumerate() {
        let rc = out.cache.root.as_ref().unwrap();
        println!("output {m}: sig2={:.4} noise={:.2e} root rank {} residual {:.4e} target_std {:.4} scale {:.4}",
            out.model.hp.signal_var(), out.model.hp.noise_var(), rc.rank, rc.mean_excess_variance,
            out.target_std, ens.delta_scale_normalized(m));
    }
    let policy = MlpPolicy::init(2, 0, &[8,8], 1, 1, InitScheme::He).unwrap();
    let s0_phys = [-0.9f64, 0.0];
    let mut s = ens.normalizer.normalize_state(&s0_phys);
    let eps_key = 42u64;
    for k in 0..20 {
        let a = policy.act_row(&s, &[]).unwrap();
        let a_norm = ens.normalizer.normalize_action(&a);
        let xs = Array::matrix(1, 3, vec![s[0], s[1], a_norm[0]]);
        let mut next = s.clone();
        let mut line = format!("k={k:3} s=({:+.3},{:+.3}) u={:+.3}", s[0], s[1], a[0]);
        for m in 0..2 {
            let (mean_e, var_e) = predict(&ens.outputs[m].model, &ens.outputs[m].cache, &xs, VarianceKind::Exact, ExecMode::Sequential).unwrap();
            let (_, var_r) = predict(&ens.outputs[m].model, &ens.outputs[m].cache, &xs, VarianceKind::Root, ExecMode::Sequential).unwrap();
            let eps = keyed_normal(eps_key, &[k as u64, 0, m as u64]);
            let scale = ens.delta_scale_normalized(m);
            next[m] += (mean_e[0] + var_r[0].sqrt() * eps) * scale;
            line += &format!(" | m{m}: mu={:+.3} sd_e={:.3} sd_r={:.3}", mean_e[0], var_e[0].sqrt(), var_r[0].sqrt());
        }
        println!("{line}");
        s = next;
    }
}

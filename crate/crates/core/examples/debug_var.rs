use gprollout::array::Array;
use gprollout::data::{build_training_pairs, fit_normalizer};
use gprollout::env::{collect_excitation_data, BoomParams, Excitation};
use gprollout::exec::ExecMode;
use gprollout::gp::{FitConfig, GpEnsemble, VarianceKind, predict};

fn main() {
    let params = BoomParams { noise_std: (0.0, 0.0), ..BoomParams::default() };
    let log = collect_excitation_data(&params, 400.0 * params.dt, Excitation::RandomWalk, 9);
    let ds = log.to_dataset(params.dt);
    let norm = fit_normalizer(&ds);
    let pairs = build_training_pairs(&ds, &norm);
    let cfg = FitConfig { max_steps: 200, subset: 0, mode: ExecMode::Sequential, ..FitConfig::default() };
    let (ens, reports) = GpEnsemble::fit(&pairs, norm, params.dt, &cfg, pairs.len()).unwrap();
    for r in &reports {
        println!("output {}: ll {:.2} -> {:.2}, steps {}, grad {:.2e}", r.output, r.initial_ll, r.final_ll, r.steps, r.grad_inf_norm);
    }
    for (m, out) in ens.outputs.iter().enumerate() {
        println!("output {m}: log_len {:?} log_sig {:.3} log_noise {:.3} (noise var {:.3e}), target_std {:.5}, scale {:.5}",
            out.model.hp.log_lengthscales, out.model.hp.log_signal, out.model.hp.log_noise,
            out.model.hp.noise_var(), out.target_std, ens.delta_scale_normalized(m));
    }
    // variance at an in-distribution point: normalized [-0.5, 0], action 0
    let s = ens.normalizer.normalize_state(&[-0.5, 0.0]);
    let a = ens.normalizer.normalize_action(&[0.0]);
    let xs = Array::matrix(1, 3, vec![s[0], s[1], a[0]]);
    for m in 0..2 {
        let (mean, var) = predict(&ens.outputs[m].model, &ens.outputs[m].cache, &xs, VarianceKind::Exact, ExecMode::Sequential).unwrap();
        println!("output {m} at start point: mean {:.5} var {:.3e} -> delta_norm_state {:.5} noise_std_norm_state {:.5}",
            mean[0], var[0], mean[0]*ens.delta_scale_normalized(m), var[0].sqrt()*ens.delta_scale_normalized(m));
    }
    // check state stds
    println!("normalizer mean {:?} std {:?}", ens.normalizer.mean, ens.normalizer.std);
}

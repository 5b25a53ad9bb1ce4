use avmae::config::RunConfig;
use avmae::model::ModalitySelect;
use avmae::runner::{run_pretrain, run_retrieve, run_segment};
use avmae::synthetic::generate_synthetic;
use std::time::Instant;

fn oracle_config(rho: f64, seed: u64, use_global: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.data.correlation = rho;
    cfg.data.seed = seed;
    cfg.arch.use_global_token = use_global;
    cfg
}

fn main() {
    let configs: Vec<(u64, f64, bool)> = std::env::args()
        .skip(1)
        .map(|spec| {
            let parts: Vec<&str> = spec.split(':').collect();
            (parts[0].parse().unwrap(), parts[1].parse().unwrap(), parts[2].parse().unwrap())
        })
        .collect();
    for (seed, rho, glob) in configs {
        let cfg = oracle_config(rho, seed, glob);
        let data = generate_synthetic(&cfg.data, cfg.arch.patch).unwrap();
        let eval = generate_synthetic(&cfg.data.held_out(64), cfg.arch.patch).unwrap();
        let t = Instant::now();
        let out = run_pretrain(&cfg, &data, seed).unwrap();
        let train_s = t.elapsed().as_secs_f64();
        let first = &out.epochs[0];
        let last = out.epochs.last().unwrap();
        let m = run_retrieve(&out.state, &eval, &[1], None).unwrap();
        let seg = run_segment(&out.state, &eval, 2, ModalitySelect::Both, 1, seed).unwrap();
        println!(
            "seed={seed} rho={rho} global={glob} train={train_s:.0}s ratio={:.3} c:{:.3}->{:.3} r:{:.3}->{:.3} | R@1 v2a diag={:.4} block={:.4} a2v diag={:.4} block={:.4} | seg_recall={:.3}",
            last.mean_total / first.mean_total,
            first.mean_contrastive, last.mean_contrastive,
            first.mean_recon, last.mean_recon,
            m.recall["v2a"]["diag_mean"][&1], m.recall["v2a"]["block_mean"][&1],
            m.recall["a2v"]["diag_mean"][&1], m.recall["a2v"]["block_mean"][&1],
            seg.mean_boundary_recall,
        );
    }
}

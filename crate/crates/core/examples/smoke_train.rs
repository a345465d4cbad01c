use metarl::agents::{EnvDims, MetaAgent, Method, NetSizes};
use metarl::envs::EnvKind;
use metarl::rng::{stream, Stream};
use metarl::trainer::{
    collect_rollouts, lr_schedule, ppo_update, DualAdam, PpoConfig, RolloutActor, UpdateContext,
    VecEnvs,
};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let method = Method::parse(args.get(1).map(|s| s.as_str()).unwrap_or("RNN+HN")).unwrap();
    let updates: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let seed: u64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(4);
    let minibatches: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(4);
    let ecoef: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let preset: String = args.get(8).cloned().unwrap_or_else(|| "desk".into());
    let env_name: String = args.get(9).cloned().unwrap_or_else(|| "grid".into());
    let decay: bool = args.get(10).map(|s| s == "decay").unwrap_or(false);
    let clip: f64 = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let vcoef: f64 = args.get(12).and_then(|s| s.parse().ok()).unwrap_or(0.5);

    let kind = EnvKind::parse(&env_name).unwrap();
    let cfg = PpoConfig {
        policy_lr: lr,
        epochs,
        minibatches,
        entropy_coef: ecoef,
        linear_lr_decay: decay,
        max_grad_norm: if clip > 0.0 { Some(clip) } else { None },
        value_coef: vcoef,
        ..PpoConfig::default()
    };
    let sizes = match preset.as_str() {
        "tiny" => NetSizes::tiny(),
        "big" => NetSizes {
            enc_obs_embed: 32,
            enc_act_embed: 8,
            enc_rew_embed: 8,
            gru_hidden: 64,
            latent_dim: 8,
            task_proj: 25,
            state_embed: 32,
            base_hidden: vec![32, 32],
            hyper_hidden: vec![64],
            critic_hidden: vec![64, 32],
            vi_decoder_hidden: vec![32],
        },
        _ => NetSizes::desk(),
    };
    let mut rng = stream(seed, Stream::Init, &[]);
    let mut agent = MetaAgent::new(method, sizes, EnvDims::of(kind), &mut rng).unwrap();
    let mut envs = VecEnvs::new(kind, cfg.n_envs, seed, 1);
    let mut opt = DualAdam::default();

    let start = Instant::now();
    let mut window: Vec<f64> = Vec::new();
    for u in 0..updates {
        let batch = collect_rollouts(&RolloutActor::Meta(&agent), &mut envs, &cfg, u).unwrap();
        let ctx = UpdateContext {
            cfg: &cfg,
            policy_lr: lr_schedule(&cfg, u, updates),
            seed,
            phase: 1,
            update_idx: u,
            probe: false,
            artifacts: None,
        };
        let report = match ppo_update(&mut agent, &mut opt, &batch, &ctx) {
            Ok(r) => r,
            Err(e) => {
                println!("DIVERGED at update {u}: {e}");
                return;
            }
        };
        window.push(batch.mean_meta_return);
        if window.len() > 20 {
            window.remove(0);
        }
        if u % 25 == 0 || u + 1 == updates {
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            println!(
                "update {u:4}  frames {:8}  ret20 {avg:7.3}  ent {:6.4}  ({:.2} s/upd)",
                (u + 1) * batch.frames,
                report.entropy,
                start.elapsed().as_secs_f64() / (u + 1) as f64
            );
        }
    }
}

//! Named property checks behind the `verify` command: gradient exactness
//! against finite differences, initialization identities, environment and
//! GAE oracles, optimizer isolation, and the statistical machinery. Each
//! check is hermetic and deterministic.

use rand::Rng;

use crate::agents::{EnvDims, MetaAgent, Method, NetSizes, UnrollInputs};
use crate::analysis::{bootstrap_ci, selection_score, smooth_curve};
use crate::diffcore::{finite_diff_check, DiffError, Graph, ParamSet, Tensor};
use crate::envs::{
    dense_reward, known_goal_episode_return, sample_task, CorridorTask, Env, EnvKind, GridTask,
    Task,
};
use crate::nets::{
    gru_step, hypernet_forward, init_bias_hyper, init_gru, init_kaiming, init_mlp,
    kl_to_standard_normal, mlp_forward, mlp_forward_generated, BoundParams, Bottleneck, GruSpec,
    HypernetSpec, MlpSpec, OutputHead,
};
use crate::rng::{stream, Stream};
use crate::trainer::{
    collect_rollouts, compute_gae, normalize_advantages, ppo_update, DualAdam, PpoConfig,
    PretrainBudget, RolloutActor, UpdateContext, VecEnvs,
};

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type Check = (&'static str, fn() -> Result<(), String>);

const GRAD_TOL: f64 = 1e-4;
const GRAD_EPS: f64 = 1e-5;
const GRAD_SEEDS: u64 = 10;

/// Every registered check, named after the invariant it guards.
pub fn all_checks() -> Vec<Check> {
    vec![
        ("diffcore.grad_matches_fd.mlp", check_fd_mlp),
        ("diffcore.grad_matches_fd.gru", check_fd_gru),
        ("diffcore.grad_matches_fd.hypernet_composite", check_fd_hyper),
        ("diffcore.grad_matches_fd.bottleneck", check_fd_bottleneck),
        ("diffcore.grad_matches_fd.vi_decoder", check_fd_vi_decoder),
        ("diffcore.stop_gradient_value_transparent", check_stop_gradient_transparent),
        ("diffcore.determinism_bit_identical_losses", check_determinism),
        ("nets.bias_hyper_init_identity", check_bias_hyper_identity),
        ("nets.kaiming_init_is_latent_sensitive", check_kaiming_sensitive),
        ("nets.generated_params_roundtrip", check_generated_roundtrip),
        ("nets.kl_nonnegative", check_kl_nonnegative_default),
        ("nets.reparameterization_gradients", check_reparameterization),
        ("envs.grid_episode_and_meta_length", check_grid_lengths),
        ("envs.task_constant_within_meta_episode", check_task_constancy),
        ("envs.wall_clipping", check_wall_clipping),
        ("envs.corridor_reward_structure", check_corridor_rewards),
        ("envs.observation_leakage", check_observation_leakage),
        ("envs.known_goal_oracle_all_24", check_known_goal_oracle),
        ("envs.corridor_scripted_oracle", check_corridor_oracle),
        ("envs.dense_reward_monotone", check_dense_monotone),
        ("agents.method_table_conformance", check_method_table),
        ("agents.stop_gradient_separation", check_stop_gradient_separation),
        ("agents.privilege_hygiene", check_privilege_hygiene),
        ("agents.bias_hyper_behavioral_identity", check_behavioral_identity),
        ("trainer.gae_matches_brute_force", check_gae_oracle),
        ("trainer.advantage_normalization", check_advantage_normalization),
        ("trainer.frame_accounting_exact", check_frame_accounting),
        ("trainer.dual_optimizer_isolation", check_optimizer_isolation),
        ("analysis.bootstrap_contains_mean", check_bootstrap_mean),
        ("analysis.sweep_selection_is_pure", check_selection_pure),
        ("analysis.probe_does_not_perturb_training", check_probe_no_perturbation),
        ("analysis.probe_init_values", check_probe_init_values),
        ("analysis.smoothing_valid_padding", check_smoothing),
    ]
}

/// Run every check and collect results.
pub fn run_all_checks() -> Vec<CheckResult> {
    all_checks()
        .into_iter()
        .map(|(name, f)| match f() {
            Ok(()) => CheckResult { name, passed: true, detail: String::new() },
            Err(detail) => CheckResult { name, passed: false, detail },
        })
        .collect()
}

fn err_to_string(e: DiffError) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- diffcore

fn check_fd_mlp() -> Result<(), String> {
    for seed in 0..GRAD_SEEDS {
        let mut rng = stream(seed, Stream::Init, &[100]);
        let spec = MlpSpec::new(3, vec![4, 3], 2, OutputHead::CategoricalLogits);
        let mut params = ParamSet::new();
        init_mlp(&mut params, "net", &spec, &mut rng).map_err(err_to_string)?;
        let x = Tensor::randn(2, 3, 1.0, &mut rng);
        let spec2 = spec.clone();
        let builder = move |g: &mut Graph, p: &ParamSet| {
            let bound = BoundParams::bind(g, p)?;
            let xin = g.input(x.clone())?;
            let out = mlp_forward(g, &bound, "net", &spec2, xin)?;
            let sq = g.mul(out, out)?;
            g.mean_all(sq)
        };
        let e = finite_diff_check(&builder, &params, GRAD_EPS).map_err(err_to_string)?;
        if e > GRAD_TOL {
            return Err(format!("seed {seed}: rel error {e}"));
        }
    }
    Ok(())
}

fn check_fd_gru() -> Result<(), String> {
    for seed in 0..GRAD_SEEDS {
        let mut rng = stream(seed, Stream::Init, &[101]);
        let spec = GruSpec { input: 3, hidden: 4 };
        let mut params = ParamSet::new();
        init_gru(&mut params, "gru", &spec, &mut rng).map_err(err_to_string)?;
        let x1 = Tensor::randn(2, 3, 1.0, &mut rng);
        let x2 = Tensor::randn(2, 3, 1.0, &mut rng);
        let builder = move |g: &mut Graph, p: &ParamSet| {
            let bound = BoundParams::bind(g, p)?;
            let h0 = g.input(Tensor::zeros(2, 4))?;
            let a = g.input(x1.clone())?;
            let b = g.input(x2.clone())?;
            let h1 = gru_step(g, &bound, "gru", &spec, h0, a)?;
            let h2 = gru_step(g, &bound, "gru", &spec, h1, b)?;
            let sq = g.mul(h2, h2)?;
            g.sum_all(sq)
        };
        let e = finite_diff_check(&builder, &params, GRAD_EPS).map_err(err_to_string)?;
        if e > GRAD_TOL {
            return Err(format!("seed {seed}: rel error {e}"));
        }
    }
    Ok(())
}

fn check_fd_hyper() -> Result<(), String> {
    for seed in 0..GRAD_SEEDS {
        let mut rng = stream(seed, Stream::Init, &[102]);
        let spec = HypernetSpec {
            latent: 3,
            hidden: vec![5],
            target: MlpSpec::new(2, vec![3], 2, OutputHead::CategoricalLogits),
        };
        let mut params = ParamSet::new();
        // Kaiming keeps the final weights nonzero, exercising every path.
        init_kaiming(&mut params, "hyper", &spec, &mut rng).map_err(err_to_string)?;
        let latent = Tensor::randn(2, 3, 1.0, &mut rng);
        let x = Tensor::randn(2, 2, 1.0, &mut rng);
        let spec2 = spec.clone();
        let builder = move |g: &mut Graph, p: &ParamSet| {
            let bound = BoundParams::bind(g, p)?;
            let z = g.input(latent.clone())?;
            let (phi, _) = hypernet_forward(g, &bound, "hyper", &spec2, z)?;
            let xin = g.input(x.clone())?;
            let out = mlp_forward_generated(g, &spec2.target, phi, xin)?;
            let sq = g.mul(out, out)?;
            g.mean_all(sq)
        };
        let e = finite_diff_check(&builder, &params, GRAD_EPS).map_err(err_to_string)?;
        if e > GRAD_TOL {
            return Err(format!("seed {seed}: rel error {e}"));
        }
    }
    Ok(())
}

fn check_fd_bottleneck() -> Result<(), String> {
    for seed in 0..GRAD_SEEDS {
        let mut rng = stream(seed, Stream::Init, &[103]);
        let b = Bottleneck { encoder_width: 5, latent_dim: 3, projection: 4 };
        let mut params = ParamSet::new();
        b.init(&mut params, "bot", &mut rng).map_err(err_to_string)?;
        let h = Tensor::randn(2, 5, 1.0, &mut rng);
        let noise = Tensor::randn(2, 3, 1.0, &mut rng);
        let builder = move |g: &mut Graph, p: &ParamSet| {
            let bound = BoundParams::bind(g, p)?;
            let hin = g.input(h.clone())?;
            let nin = g.input(noise.clone())?;
            let nodes = b.forward(g, &bound, "bot", hin, nin)?;
            // Mix the ELBO-style path (z) and the KL.
            let zsq = g.mul(nodes.z, nodes.z)?;
            let zsum = g.sum_all(zsq)?;
            let kl = crate::nets::kl_node(g, nodes.mu, nodes.log_sigma)?;
            g.add(zsum, kl)
        };
        let e = finite_diff_check(&builder, &params, GRAD_EPS).map_err(err_to_string)?;
        if e > GRAD_TOL {
            return Err(format!("seed {seed}: rel error {e}"));
        }
    }
    Ok(())
}

fn check_fd_vi_decoder() -> Result<(), String> {
    for seed in 0..GRAD_SEEDS {
        let mut rng = stream(seed, Stream::Init, &[104]);
        let spec = MlpSpec::new(6, vec![5], 3, OutputHead::ValueScalar);
        let mut params = ParamSet::new();
        init_mlp(&mut params, "dec", &spec, &mut rng).map_err(err_to_string)?;
        let input = Tensor::randn(4, 6, 1.0, &mut rng);
        let target = Tensor::randn(4, 3, 1.0, &mut rng);
        let spec2 = spec.clone();
        let builder = move |g: &mut Graph, p: &ParamSet| {
            let bound = BoundParams::bind(g, p)?;
            let xin = g.input(input.clone())?;
            let pred = mlp_forward(g, &bound, "dec", &spec2, xin)?;
            let want = g.input(target.clone())?;
            let d = g.sub(pred, want)?;
            let sq = g.mul(d, d)?;
            g.mean_all(sq)
        };
        let e = finite_diff_check(&builder, &params, GRAD_EPS).map_err(err_to_string)?;
        if e > GRAD_TOL {
            return Err(format!("seed {seed}: rel error {e}"));
        }
    }
    Ok(())
}

fn check_stop_gradient_transparent() -> Result<(), String> {
    let mut rng = stream(0, Stream::Init, &[105]);
    for _ in 0..32 {
        let x = Tensor::randn(3, 4, 2.0, &mut rng);
        let mut g = Graph::new();
        let xin = g.input(x.clone()).map_err(err_to_string)?;
        let frozen = g.stop_gradient(xin).map_err(err_to_string)?;
        if g.value(frozen).data() != x.data() {
            return Err("stop_gradient changed forward values".into());
        }
    }
    Ok(())
}

fn check_determinism() -> Result<(), String> {
    let run = || -> Result<Vec<f64>, String> {
        let cfg = PpoConfig { n_envs: 4, minibatches: 2, epochs: 2, ..PpoConfig::default() };
        let mut rng = stream(3, Stream::Init, &[106]);
        let mut agent = MetaAgent::new(
            Method::TiNaive,
            NetSizes::tiny(),
            EnvDims::of(EnvKind::Grid),
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let mut envs = VecEnvs::new(EnvKind::Grid, 4, 3, 1);
        let mut opt = DualAdam::default();
        let mut losses = Vec::new();
        for u in 0..100 {
            let batch = collect_rollouts(&RolloutActor::Meta(&agent), &mut envs, &cfg, u)
                .map_err(|e| e.to_string())?;
            let ctx = UpdateContext {
                cfg: &cfg,
                policy_lr: cfg.policy_lr,
                seed: 3,
                phase: 1,
                update_idx: u,
                probe: false,
                artifacts: None,
            };
            let report =
                ppo_update(&mut agent, &mut opt, &batch, &ctx).map_err(|e| e.to_string())?;
            losses.push(report.policy_loss);
            losses.push(report.value_loss);
            losses.push(batch.mean_meta_return);
        }
        Ok(losses)
    };
    let a = run()?;
    let b = run()?;
    if a != b {
        let first = a.iter().zip(&b).position(|(x, y)| x != y);
        return Err(format!("losses diverged at entry {first:?}"));
    }
    Ok(())
}

// -------------------------------------------------------------------- nets

fn check_bias_hyper_identity() -> Result<(), String> {
    let spec = HypernetSpec {
        latent: 4,
        hidden: vec![6],
        target: MlpSpec::new(3, vec![4], 2, OutputHead::CategoricalLogits),
    };
    let mut rng = stream(1, Stream::Init, &[107]);
    let mut params = ParamSet::new();
    init_bias_hyper(&mut params, "hyper", &spec, &mut rng).map_err(err_to_string)?;
    let reference = crate::nets::hypernet_generate(&spec, &params, "hyper", &[0.0; 4])
        .map_err(err_to_string)?;
    let mut zrng = stream(2, Stream::Noise, &[107]);
    let mut max_diff = 0.0f64;
    for _ in 0..100 {
        let z: Vec<f64> = (0..4).map(|_| zrng.gen::<f64>() * 6.0 - 3.0).collect();
        let gp =
            crate::nets::hypernet_generate(&spec, &params, "hyper", &z).map_err(err_to_string)?;
        for (a, b) in gp.flat().iter().zip(reference.flat()) {
            max_diff = max_diff.max((a - b).abs());
        }
    }
    if max_diff != 0.0 {
        return Err(format!("max abs diff across latents: {max_diff}"));
    }
    Ok(())
}

fn check_kaiming_sensitive() -> Result<(), String> {
    let spec = HypernetSpec {
        latent: 4,
        hidden: vec![6],
        target: MlpSpec::new(3, vec![4], 2, OutputHead::CategoricalLogits),
    };
    let mut rng = stream(1, Stream::Init, &[117]);
    let mut params = ParamSet::new();
    init_kaiming(&mut params, "hyper", &spec, &mut rng).map_err(err_to_string)?;
    let a = crate::nets::hypernet_generate(&spec, &params, "hyper", &[1.0, 0.0, 0.0, 0.0])
        .map_err(err_to_string)?;
    let b = crate::nets::hypernet_generate(&spec, &params, "hyper", &[0.0, 1.0, 0.0, 0.0])
        .map_err(err_to_string)?;
    if a.flat() == b.flat() {
        return Err("Kaiming-initialized hypernetwork ignored its latent".into());
    }
    Ok(())
}

fn check_generated_roundtrip() -> Result<(), String> {
    let spec = MlpSpec::new(4, vec![3, 5], 2, OutputHead::CategoricalLogits);
    let mut rng = stream(5, Stream::Init, &[108]);
    let flat: Vec<f64> = (0..spec.param_count()).map(|_| rng.gen::<f64>() - 0.5).collect();
    let gp = crate::nets::GeneratedParams::from_flat(spec.clone(), flat.clone())
        .map_err(err_to_string)?;
    let expanded = gp.to_param_set().map_err(err_to_string)?;
    let mut holder = ParamSet::new();
    holder.adopt("net", expanded).map_err(err_to_string)?;
    let back =
        crate::nets::flatten_mlp_params(&holder, "net", &spec).map_err(err_to_string)?;
    if back != flat {
        return Err("flatten -> slice -> flatten round-trip not bit-identical".into());
    }
    Ok(())
}

/// Injectable form of the KL non-negativity property, so a deliberately
/// broken KL (e.g. a sign flip) demonstrably fails verification.
pub fn kl_nonnegativity_check(
    kl: &dyn Fn(&[f64], &[f64]) -> Result<f64, DiffError>,
) -> Result<(), String> {
    let mut rng = stream(6, Stream::Eval, &[109]);
    for _ in 0..500 {
        let dim = rng.gen_range(1..6);
        let mu: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let sigma: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 3.0 + 0.05).collect();
        let v = kl(&mu, &sigma).map_err(err_to_string)?;
        if v < 0.0 {
            return Err(format!("KL({mu:?}, {sigma:?}) = {v} < 0"));
        }
    }
    // Equality iff standard normal.
    let zero = kl(&[0.0, 0.0], &[1.0, 1.0]).map_err(err_to_string)?;
    if zero != 0.0 {
        return Err(format!("KL at the prior is {zero}, want exactly 0"));
    }
    let off = kl(&[0.3], &[1.0]).map_err(err_to_string)?;
    if off <= 0.0 {
        return Err("KL away from the prior must be strictly positive".into());
    }
    Ok(())
}

fn check_kl_nonnegative_default() -> Result<(), String> {
    kl_nonnegativity_check(&kl_to_standard_normal)
}

fn check_reparameterization() -> Result<(), String> {
    // z = mu + sigma * eps: dz/dmu = I, dz/dsigma = diag(eps).
    let mut rng = stream(7, Stream::Noise, &[110]);
    for _ in 0..10 {
        let dim = 3;
        let eps: Vec<f64> = (0..dim).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        let mut params = ParamSet::new();
        params
            .insert("mu", Tensor::randn(1, dim, 1.0, &mut rng))
            .map_err(err_to_string)?;
        params
            .insert("sigma", Tensor::new(vec![1, dim], (0..dim).map(|_| rng.gen::<f64>() + 0.2).collect()).map_err(err_to_string)?)
            .map_err(err_to_string)?;
        for pick in 0..dim {
            let eps2 = eps.clone();
            let builder = move |g: &mut Graph, p: &ParamSet| {
                let mu = g.param("mu", p.get("mu").unwrap())?;
                let sigma = g.param("sigma", p.get("sigma").unwrap())?;
                let noise = g.input(Tensor::vector(eps2.clone()))?;
                let scaled = g.mul(sigma, noise)?;
                let z = g.add(mu, scaled)?;
                let picked = g.gather_col(z, &[pick])?;
                g.sum_all(picked)
            };
            let mut g = Graph::new();
            let root = builder(&mut g, &params).map_err(err_to_string)?;
            let grads = g.backward(root).map_err(err_to_string)?;
            let dmu = grads.get("mu").unwrap().data();
            let dsigma = grads.get("sigma").unwrap().data();
            for j in 0..dim {
                let want_mu = f64::from(u8::from(j == pick));
                let want_sigma = if j == pick { eps[j] } else { 0.0 };
                if (dmu[j] - want_mu).abs() > 1e-12 || (dsigma[j] - want_sigma).abs() > 1e-12 {
                    return Err(format!(
                        "dz{pick}/dmu[{j}] = {} (want {want_mu}), dz{pick}/dsigma[{j}] = {} (want {want_sigma})",
                        dmu[j], dsigma[j]
                    ));
                }
            }
            let e = finite_diff_check(&builder, &params, GRAD_EPS).map_err(err_to_string)?;
            if e > GRAD_TOL {
                return Err(format!("finite differences disagree: {e}"));
            }
        }
    }
    Ok(())
}

// -------------------------------------------------------------------- envs

fn check_grid_lengths() -> Result<(), String> {
    let mut env = Env::new(EnvKind::Grid);
    env.reset_meta(&Task::Grid(GridTask { goal: (3, 2) }));
    let mut frames = 0;
    let mut episode_frames = 0;
    loop {
        let r = env.step(4).map_err(|e| e.to_string())?;
        frames += 1;
        episode_frames += 1;
        if r.done {
            if episode_frames != 15 {
                return Err(format!("episode length {episode_frames}, want 15"));
            }
            episode_frames = 0;
        }
        if r.meta_done {
            break;
        }
    }
    if frames != 60 {
        return Err(format!("meta-episode frames {frames}, want 60"));
    }
    Ok(())
}

fn check_task_constancy() -> Result<(), String> {
    let mut rng = stream(8, Stream::Task, &[111]);
    let task = sample_task(EnvKind::Grid, &mut rng);
    let mut env = Env::new(EnvKind::Grid);
    env.reset_meta(&task);
    let label = task.label_index();
    for t in 0..60 {
        let r = env.step((t % 5) as usize).map_err(|e| e.to_string())?;
        if task.label_index() != label {
            return Err("task changed mid-meta-episode".into());
        }
        if r.meta_done {
            break;
        }
    }
    Ok(())
}

fn check_wall_clipping() -> Result<(), String> {
    let mut rng = stream(9, Stream::Action, &[112]);
    let mut env = Env::new(EnvKind::Grid);
    env.reset_meta(&Task::Grid(GridTask { goal: (4, 4) }));
    let mut obs = vec![0.0, 0.0];
    for _ in 0..60 {
        let r = env.step(rng.gen_range(0..5)).map_err(|e| e.to_string())?;
        obs = r.obs.clone();
        if !(0.0..=1.0).contains(&obs[0]) || !(0.0..=1.0).contains(&obs[1]) {
            return Err(format!("position escaped the grid: {obs:?}"));
        }
        if r.meta_done {
            break;
        }
    }
    let _ = obs;
    Ok(())
}

fn check_corridor_rewards() -> Result<(), String> {
    let mut rng = stream(10, Stream::Task, &[113]);
    for _ in 0..20 {
        let Task::Corridor(task) = sample_task(EnvKind::MemoryCorridor, &mut rng) else {
            unreachable!()
        };
        let mut env = Env::new(EnvKind::MemoryCorridor);
        env.reset_meta(&Task::Corridor(task.clone()));
        let mut room_total = 0.0;
        let mut act_rng = stream(11, Stream::Action, &[113]);
        loop {
            let r = env.step(act_rng.gen_range(0..2)).map_err(|e| e.to_string())?;
            if r.done {
                if r.reward != 4.0 && r.reward != -3.0 {
                    return Err(format!("final reward {} not in {{4, -3}}", r.reward));
                }
                if room_total > 1.6 + 1e-12 {
                    return Err(format!("room rewards {room_total} exceed 1.6"));
                }
                room_total = 0.0;
                if r.meta_done {
                    break;
                }
            } else {
                room_total += r.reward;
            }
        }
    }
    Ok(())
}

fn check_observation_leakage() -> Result<(), String> {
    // Identical prefixes, different goals: observations must match until the
    // policies' experiences actually diverge (Grid hides the task entirely).
    let mut e1 = Env::new(EnvKind::Grid);
    let mut e2 = Env::new(EnvKind::Grid);
    let o1 = e1.reset_meta(&Task::Grid(GridTask { goal: (4, 4) }));
    let o2 = e2.reset_meta(&Task::Grid(GridTask { goal: (1, 3) }));
    if o1 != o2 {
        return Err("grid reset observation reveals the goal".into());
    }
    let r1 = e1.step(0).map_err(|e| e.to_string())?;
    let r2 = e2.step(0).map_err(|e| e.to_string())?;
    if r1.obs != r2.obs {
        return Err("grid step observation reveals the goal".into());
    }
    // Grid Show is the sanctioned exception: the first step shows the goal.
    let mut s1 = Env::new(EnvKind::GridShow);
    let mut s2 = Env::new(EnvKind::GridShow);
    let o1 = s1.reset_meta(&Task::Grid(GridTask { goal: (4, 4) }));
    let o2 = s2.reset_meta(&Task::Grid(GridTask { goal: (1, 3) }));
    if o1 == o2 {
        return Err("Grid Show must reveal the goal at the first timestep".into());
    }
    Ok(())
}

fn check_known_goal_oracle() -> Result<(), String> {
    for idx in 1..25 {
        let goal = (idx % 5, idx / 5);
        let mut env = Env::new(EnvKind::Grid);
        env.reset_meta(&Task::Grid(GridTask { goal }));
        let mut total = 0.0;
        let mut steps = 0;
        for _ in 0..goal.0 {
            total += env.step(3).map_err(|e| e.to_string())?.reward;
            steps += 1;
        }
        for _ in 0..goal.1 {
            total += env.step(0).map_err(|e| e.to_string())?.reward;
            steps += 1;
        }
        while steps < 15 {
            total += env.step(4).map_err(|e| e.to_string())?.reward;
            steps += 1;
        }
        let want = known_goal_episode_return(goal);
        if (total - want).abs() > 1e-12 {
            return Err(format!("goal {goal:?}: scripted return {total} vs closed form {want}"));
        }
    }
    Ok(())
}

fn check_corridor_oracle() -> Result<(), String> {
    let mut rng = stream(12, Stream::Task, &[114]);
    let Task::Corridor(task) = sample_task(EnvKind::MemoryCorridor, &mut rng) else {
        unreachable!()
    };
    let total = corridor_oracle_return(&task)?;
    if (total - 11.2).abs() > 1e-12 {
        return Err(format!("scripted meta-episode return {total}, want 11.2"));
    }
    Ok(())
}

pub fn corridor_oracle_return(task: &CorridorTask) -> Result<f64, String> {
    let mut env = Env::new(EnvKind::MemoryCorridor);
    env.reset_meta(&Task::Corridor(task.clone()));
    let mut total = 0.0;
    let mut t = 0usize;
    loop {
        let action = if t == 0 {
            0
        } else if t <= 16 {
            task.room_action(t - 1)
        } else {
            task.final_action()
        };
        let r = env.step(action).map_err(|e| e.to_string())?;
        total += r.reward;
        t += 1;
        if r.done {
            t = 0;
        }
        if r.meta_done {
            break;
        }
    }
    Ok(total)
}

fn check_dense_monotone() -> Result<(), String> {
    for goal_idx in 1..25 {
        let goal = (goal_idx % 5, goal_idx / 5);
        // Any monotone path: rewards strictly increase toward the goal.
        let mut pos = (0usize, 0usize);
        let mut prev = dense_reward(pos, goal);
        while pos != goal {
            if pos.0 < goal.0 {
                pos.0 += 1;
            } else if pos.0 > goal.0 {
                pos.0 -= 1;
            } else if pos.1 < goal.1 {
                pos.1 += 1;
            } else {
                pos.1 -= 1;
            }
            let r = dense_reward(pos, goal);
            if r <= prev {
                return Err(format!("dense reward not increasing toward {goal:?}"));
            }
            prev = r;
        }
        if prev != 0.0 {
            return Err("dense reward at the goal must be 0".into());
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ agents

fn check_method_table() -> Result<(), String> {
    use crate::agents::InferenceTarget::*;
    let expect = [
        (Method::Rnn, None, false, false, false),
        (Method::RnnS, None, true, false, false),
        (Method::RnnHn, None, true, true, false),
        (Method::TiNaive, Given, true, false, false),
        (Method::Ti, Learned, true, false, false),
        (Method::TiPlusPlus, Learned, true, false, true),
        (Method::TiHn, Learned, true, true, false),
        (Method::TiPlusPlusHn, Learned, true, true, true),
        (Method::Vi, Transitions, true, false, false),
        (Method::ViHn, Transitions, true, true, false),
        (Method::BiPlusPlusHn, BaseNet, true, true, true),
        (Method::MultiHn, None, true, true, false),
    ];
    for (m, target, state, hn, plus) in expect {
        let c = m.config();
        if c.target != target
            || c.condition_on_state != state
            || c.hypernetwork != hn
            || c.multi_phase_reuse != plus
        {
            return Err(format!("{} does not match its component row", m.name()));
        }
    }
    Ok(())
}

fn check_stop_gradient_separation() -> Result<(), String> {
    for method in [Method::TiNaive, Method::Ti, Method::TiHn, Method::TiPlusPlusHn, Method::Vi, Method::ViHn, Method::BiPlusPlusHn] {
        let mut rng = stream(13, Stream::Init, &[115]);
        let agent =
            MetaAgent::new(method, NetSizes::tiny(), EnvDims::of(EnvKind::Grid), &mut rng)
                .map_err(|e| e.to_string())?;
        let t_len = 3;
        let b = 2;
        let mut g = Graph::new();
        let bound = BoundParams::bind(&mut g, &agent.params).map_err(err_to_string)?;
        let mut nrng = stream(13, Stream::Noise, &[115]);
        let inputs = UnrollInputs {
            obs: (0..t_len).map(|t| Tensor::matrix(b, 2, vec![0.2 * t as f64; 2 * b]).unwrap()).collect(),
            prev_act: (0..t_len).map(|_| Tensor::zeros(b, 5)).collect(),
            prev_rew: (0..t_len).map(|_| Tensor::zeros(b, 1)).collect(),
            done: (0..t_len).map(|_| Tensor::zeros(b, 1)).collect(),
            noise: Some(
                (0..t_len).map(|_| Tensor::randn(b, agent.latent_dim(), 1.0, &mut nrng)).collect(),
            ),
        };
        let nodes = agent.unroll(&mut g, &bound, &inputs).map_err(err_to_string)?;
        let actions = vec![vec![0usize, 1]; t_len];
        let old: Vec<Tensor> = (0..t_len).map(|_| Tensor::column(&[-1.6, -1.6])).collect();
        let adv: Vec<Tensor> = (0..t_len).map(|_| Tensor::column(&[1.0, -1.0])).collect();
        let ret: Vec<Tensor> = (0..t_len).map(|_| Tensor::column(&[0.5, 0.5])).collect();
        let rl = agent
            .rl_loss(&mut g, &nodes, &actions, &old, &adv, &ret, 0.2, 0.5, 0.01)
            .map_err(err_to_string)?;
        let grads = g.backward(rl.total).map_err(err_to_string)?;
        for name in agent.inference_param_names() {
            let total: f64 = grads.get(name).unwrap().data().iter().map(|v| v.abs()).sum();
            if total != 0.0 {
                return Err(format!("{}: RL gradient leaked into {name}", method.name()));
            }
        }
    }
    Ok(())
}

fn check_privilege_hygiene() -> Result<(), String> {
    // The acting API takes no task label; feeding identical inputs under
    // different tasks must produce identical distributions.
    let mut rng = stream(14, Stream::Init, &[116]);
    let agent =
        MetaAgent::new(Method::TiNaive, NetSizes::tiny(), EnvDims::of(EnvKind::Grid), &mut rng)
            .map_err(|e| e.to_string())?;
    let mut e1 = Env::new(EnvKind::Grid);
    let mut e2 = Env::new(EnvKind::Grid);
    let o1 = e1.reset_meta(&Task::Grid(GridTask { goal: (4, 4) }));
    let o2 = e2.reset_meta(&Task::Grid(GridTask { goal: (2, 1) }));
    let obs1 = Tensor::vector(o1);
    let obs2 = Tensor::vector(o2);
    let zeros_state = Tensor::zeros(1, agent.gru_hidden());
    let prev_act = Tensor::zeros(1, 5);
    let prev_rew = Tensor::zeros(1, 1);
    let done = Tensor::vector(vec![1.0]);
    let a = agent
        .act(&obs1, &prev_act, &prev_rew, &done, &zeros_state, None)
        .map_err(|e| e.to_string())?;
    let b = agent
        .act(&obs2, &prev_act, &prev_rew, &done, &zeros_state, None)
        .map_err(|e| e.to_string())?;
    if a.probs != b.probs {
        return Err("acting path distinguishes tasks it cannot observe".into());
    }
    Ok(())
}

fn check_behavioral_identity() -> Result<(), String> {
    for method in [Method::RnnHn, Method::TiHn, Method::TiPlusPlusHn, Method::ViHn, Method::BiPlusPlusHn] {
        let mut rng = stream(15, Stream::Init, &[method as u64]);
        let agent =
            MetaAgent::new(method, NetSizes::tiny(), EnvDims::of(EnvKind::Grid), &mut rng)
                .map_err(|e| e.to_string())?;
        let h1 = Tensor::zeros(1, agent.gru_hidden());
        let h2 = Tensor::new(
            vec![1, agent.gru_hidden()],
            (0..agent.gru_hidden()).map(|i| ((i as f64) * 0.81).sin() * 0.7).collect(),
        )
        .map_err(err_to_string)?;
        let obs = Tensor::vector(vec![0.25, 0.5]);
        let prev_act = Tensor::zeros(1, 5);
        let prev_rew = Tensor::zeros(1, 1);
        let done = Tensor::vector(vec![0.0]);
        let a = agent
            .act(&obs, &prev_act, &prev_rew, &done, &h1, None)
            .map_err(|e| e.to_string())?;
        let b = agent
            .act(&obs, &prev_act, &prev_rew, &done, &h2, None)
            .map_err(|e| e.to_string())?;
        if a.probs != b.probs {
            return Err(format!("{}: histories leak through at init", method.name()));
        }
    }
    Ok(())
}

// ----------------------------------------------------------------- trainer

fn check_gae_oracle() -> Result<(), String> {
    let mut rng = stream(16, Stream::Eval, &[118]);
    for case in 0..100 {
        let t_len = rng.gen_range(1..=20);
        let rewards: Vec<f64> = (0..t_len).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let values: Vec<f64> = (0..t_len).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
        let bootstrap = rng.gen::<f64>() - 0.5;
        let meta_dones: Vec<bool> = (0..t_len).map(|_| rng.gen_bool(0.2)).collect();
        let (fast, _) = compute_gae(&rewards, &values, bootstrap, &meta_dones, 0.99, 0.95);
        // Brute-force double sum.
        let delta = |t: usize| {
            let mask = if meta_dones[t] { 0.0 } else { 1.0 };
            let next = if t + 1 == t_len { bootstrap } else { values[t + 1] };
            rewards[t] + 0.99 * next * mask - values[t]
        };
        for t in 0..t_len {
            let mut want = 0.0;
            let mut coeff = 1.0;
            for l in t..t_len {
                want += coeff * delta(l);
                if meta_dones[l] {
                    break;
                }
                coeff *= 0.99 * 0.95;
            }
            if (fast[t] - want).abs() > 1e-10 {
                return Err(format!("case {case}, t {t}: {} vs {}", fast[t], want));
            }
        }
    }
    Ok(())
}

fn check_advantage_normalization() -> Result<(), String> {
    let mut rng = stream(17, Stream::Eval, &[119]);
    let mut adv: Vec<f64> = (0..960).map(|_| rng.gen::<f64>() * 10.0 - 3.0).collect();
    normalize_advantages(&mut adv);
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let std = (adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n).sqrt();
    if mean.abs() >= 1e-10 {
        return Err(format!("post-normalization |mean| = {}", mean.abs()));
    }
    if (std - 1.0).abs() >= 1e-10 {
        return Err(format!("post-normalization |std - 1| = {}", (std - 1.0).abs()));
    }
    Ok(())
}

fn check_frame_accounting() -> Result<(), String> {
    let cfg = PpoConfig::default();
    let budget = PretrainBudget { multitask_updates: 100, total_frames: 192_000 };
    let (pre, meta) = budget.split(&cfg, EnvKind::Grid).map_err(|e| e.to_string())?;
    if pre != 96_000 {
        return Err(format!("100-update grid pretrain consumed {pre} frames, want 96,000"));
    }
    if pre + meta != budget.total_frames {
        return Err("pretrain + meta frames differ from the budget".into());
    }
    Ok(())
}

fn check_optimizer_isolation() -> Result<(), String> {
    let cfg = PpoConfig { n_envs: 4, minibatches: 2, epochs: 1, ..PpoConfig::default() };
    let mut rng = stream(18, Stream::Init, &[120]);
    let template =
        MetaAgent::new(Method::TiNaive, NetSizes::tiny(), EnvDims::of(EnvKind::Grid), &mut rng)
            .map_err(|e| e.to_string())?;
    let mut envs = VecEnvs::new(EnvKind::Grid, 4, 19, 1);
    let batch = collect_rollouts(&RolloutActor::Meta(&template), &mut envs, &cfg, 0)
        .map_err(|e| e.to_string())?;

    // Policy rate zeroed: policy parameters must stay bit-identical while
    // inference parameters move, and vice versa.
    let scenarios = [(0.0, cfg.inference_lr, true), (cfg.policy_lr, 0.0, false)];
    for (plr, ilr, frozen_is_policy) in scenarios {
        let mut agent = MetaAgent::new(
            Method::TiNaive,
            NetSizes::tiny(),
            EnvDims::of(EnvKind::Grid),
            &mut stream(18, Stream::Init, &[120]),
        )
        .map_err(|e| e.to_string())?;
        let before = agent.params.clone();
        let mut opt = DualAdam::default();
        let run_cfg = PpoConfig { inference_lr: ilr, ..cfg.clone() };
        let ctx = UpdateContext {
            cfg: &run_cfg,
            policy_lr: plr,
            seed: 19,
            phase: 1,
            update_idx: 0,
            probe: false,
            artifacts: None,
        };
        ppo_update(&mut agent, &mut opt, &batch, &ctx).map_err(|e| e.to_string())?;
        let (frozen, moving): (Vec<&String>, Vec<&String>) = if frozen_is_policy {
            (agent.policy_param_names().iter().collect(), agent.inference_param_names().iter().collect())
        } else {
            (agent.inference_param_names().iter().collect(), agent.policy_param_names().iter().collect())
        };
        for name in frozen {
            if agent.params.get(name) != before.get(name) {
                return Err(format!("zero-rate optimizer changed {name}"));
            }
        }
        let any_moved = moving
            .iter()
            .any(|name| agent.params.get(name.as_str()) != before.get(name.as_str()));
        if !any_moved {
            return Err("active optimizer moved nothing".into());
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- analysis

fn check_bootstrap_mean() -> Result<(), String> {
    let values = [2.0, -1.0, 0.5, 3.25, 7.0];
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let (lo, hi) = bootstrap_ci(&values, 0.68, 2000, 21).map_err(|e| e.to_string())?;
    if !(lo <= mean && mean <= hi) {
        return Err(format!("interval ({lo}, {hi}) misses the sample mean {mean}"));
    }
    Ok(())
}

fn check_selection_pure() -> Result<(), String> {
    use crate::analysis::RunRecord;
    let records: Vec<RunRecord> = (0..50)
        .map(|u| RunRecord {
            update: u,
            frames: u * 960,
            mean_return: (u as f64 * 0.31).sin() + u as f64 * 0.05,
            policy_loss: 0.0,
            value_loss: 0.0,
            entropy: 0.0,
            j_infer: None,
            j_prior: None,
            latent_grad_norm: None,
        })
        .collect();
    let a = selection_score(&records, 0.1);
    let b = selection_score(&records, 0.1);
    if a != b {
        return Err("selection metric is not a pure function of the curve".into());
    }
    Ok(())
}

fn check_probe_no_perturbation() -> Result<(), String> {
    let run = |probe: bool| -> Result<f64, String> {
        let cfg = PpoConfig { n_envs: 4, minibatches: 2, epochs: 2, ..PpoConfig::default() };
        let mut rng = stream(22, Stream::Init, &[121]);
        let mut agent =
            MetaAgent::new(Method::RnnHn, NetSizes::tiny(), EnvDims::of(EnvKind::Grid), &mut rng)
                .map_err(|e| e.to_string())?;
        let mut envs = VecEnvs::new(EnvKind::Grid, 4, 23, 1);
        let mut opt = DualAdam::default();
        for u in 0..3 {
            let batch = collect_rollouts(&RolloutActor::Meta(&agent), &mut envs, &cfg, u)
                .map_err(|e| e.to_string())?;
            let ctx = UpdateContext {
                cfg: &cfg,
                policy_lr: cfg.policy_lr,
                seed: 23,
                phase: 1,
                update_idx: u,
                probe,
                artifacts: None,
            };
            ppo_update(&mut agent, &mut opt, &batch, &ctx).map_err(|e| e.to_string())?;
        }
        // Order-sensitive checksum over all parameters.
        let mut acc = 0.0;
        let mut k = 1.0;
        for (_, t) in agent.params.iter() {
            for v in t.data() {
                acc += v * k;
                k = -k;
            }
        }
        Ok(acc)
    };
    let with = run(true)?;
    let without = run(false)?;
    if with != without {
        return Err(format!("probe changed training: {with} vs {without}"));
    }
    Ok(())
}

fn check_probe_init_values() -> Result<(), String> {
    let cfg = PpoConfig { n_envs: 4, minibatches: 1, epochs: 1, ..PpoConfig::default() };
    let probe_of = |init| -> Result<f64, String> {
        let mut rng = stream(24, Stream::Init, &[122]);
        let mut agent = MetaAgent::with_init(
            Method::RnnHn,
            NetSizes::tiny(),
            EnvDims::of(EnvKind::Grid),
            init,
            &mut rng,
        )
        .map_err(|e| e.to_string())?;
        let mut envs = VecEnvs::new(EnvKind::Grid, 4, 25, 1);
        let batch = collect_rollouts(&RolloutActor::Meta(&agent), &mut envs, &cfg, 0)
            .map_err(|e| e.to_string())?;
        let mut opt = DualAdam::default();
        let ctx = UpdateContext {
            cfg: &cfg,
            policy_lr: cfg.policy_lr,
            seed: 25,
            phase: 1,
            update_idx: 0,
            probe: true,
            artifacts: None,
        };
        let report =
            ppo_update(&mut agent, &mut opt, &batch, &ctx).map_err(|e| e.to_string())?;
        report.latent_grad_norm.ok_or_else(|| "probe value missing".to_string())
    };
    let bias = probe_of(crate::agents::HyperInit::BiasHyper)?;
    if bias != 0.0 {
        return Err(format!("Bias-HyperInit probe at init is {bias}, want exactly 0"));
    }
    let kaiming = probe_of(crate::agents::HyperInit::Kaiming)?;
    if kaiming <= 0.0 {
        return Err(format!("Kaiming probe at init is {kaiming}, want > 0"));
    }
    Ok(())
}

fn check_smoothing() -> Result<(), String> {
    let out = smooth_curve(&[0.0, 1.0, 0.0, 1.0], 2).map_err(|e| e.to_string())?;
    if out != vec![0.5, 0.5, 0.5] {
        return Err(format!("window-2 smoothing gave {out:?}"));
    }
    let ident = smooth_curve(&[4.0, 2.0], 1).map_err(|e| e.to_string())?;
    if ident != vec![4.0, 2.0] {
        return Err("window-1 smoothing must be the identity".into());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass_on_a_pristine_build() {
        let results = run_all_checks();
        let failures: Vec<_> =
            results.iter().filter(|r| !r.passed).map(|r| (r.name, r.detail.clone())).collect();
        assert!(failures.is_empty(), "failed checks: {failures:?}");
    }

    #[test]
    fn check_count_covers_module_invariants() {
        // The modules list 27 invariants between them (3 diffcore, 4 nets,
        // 5 envs, 4 agents, 4 trainer, 4 analysis, 3 interface-level).
        assert!(all_checks().len() >= 27, "only {} checks registered", all_checks().len());
    }

    #[test]
    fn sign_flipped_kl_fails_the_nonnegativity_check() {
        let flipped = |mu: &[f64], sigma: &[f64]| kl_to_standard_normal(mu, sigma).map(|v| -v);
        assert!(kl_nonnegativity_check(&flipped).is_err());
    }
}

use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use pour_core::coarse::{CoarseModel, FeatureMode};
use pour_core::fine::FineModel;
use pour_core::pipeline::session::{Clock, ServiceConfig, SessionServer};
use pour_core::pipeline::{
    cmd_ablate, cmd_adapt, cmd_collect, cmd_eval, cmd_train, cmd_train_baseline, deep_merge, ExperimentConfig, Layout,
    PolicyKind, ProgressiveFactory,
};
use pour_core::sim::DT;

/// Progressive imitation learning for granular pouring.
#[derive(Parser)]
#[command(name = "pour", version)]
struct Cli {
    /// Config layers applied over the built-in defaults, in order.
    #[arg(short, long = "config", global = true)]
    configs: Vec<PathBuf>,
    /// Single-key overrides such as `coarse.epochs=3`, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Replaces every seed in the config (collection, training, evaluation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// Disable data parallelism.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Record oracle demonstrations for training, held-out and one-shot sets.
    Collect {
        /// Training scenes (defaults to the config).
        #[arg(long, value_delimiter = ',')]
        scenes: Vec<String>,
    },
    /// Train the coarse and fine models.
    Train {
        /// Also train the end-to-end baseline.
        #[arg(long)]
        baseline: bool,
    },
    /// Adapt the trained models to novel scenes.
    Adapt {
        /// Novel scenes (defaults to every novel scene in the config).
        #[arg(long = "scene", value_delimiter = ',')]
        scenes: Vec<String>,
    },
    /// Roll out a stored policy and report success rates.
    Eval {
        #[arg(long, value_enum, default_value_t = PolicyArg::Progressive)]
        policy: PolicyArg,
        #[arg(long, value_delimiter = ',')]
        scenes: Vec<String>,
        /// Episodes per scene.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Run the feature, baseline and adaptation ablations.
    Ablate,
    /// Start the teleoperation session service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        /// Scenes offered to clients (defaults to every scene in the config).
        #[arg(long, value_delimiter = ',')]
        scenes: Vec<String>,
        /// Where recordings go (defaults to `<output>/data/teleop`).
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Step only on client `step` messages.
        #[arg(long)]
        lockstep: bool,
        /// Streaming rate in Hz for real-time sessions.
        #[arg(long, default_value_t = 1.0 / DT)]
        hz: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PolicyArg {
    Progressive,
    Baseline,
    Adapted,
}

fn set_layer(assignment: &str) -> Result<String> {
    let (key, value) = assignment.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {assignment}"))?;
    let value: toml::Value = format!("v = {value}")
        .parse::<toml::Table>()
        .map(|mut t| t.remove("v").expect("parsed key"))
        .or_else(|_| Ok::<_, anyhow::Error>(toml::Value::String(value.to_string())))?;
    let mut v = value;
    for part in key.trim().split('.').rev() {
        let mut t = toml::Table::new();
        t.insert(part.to_string(), v);
        v = toml::Value::Table(t);
    }
    Ok(toml::to_string(&v)?)
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut layers = cli
        .configs
        .iter()
        .map(|p| std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    for s in &cli.sets {
        layers.push(set_layer(s)?);
    }
    let mut extra = toml::Value::Table(toml::Table::new());
    if let Some(seed) = cli.seed {
        let s = toml::Value::Integer(seed as i64);
        for section in ["collect", "coarse", "fine", "translator", "eval"] {
            let mut t = toml::Table::new();
            t.insert("seed".into(), s.clone());
            deep_merge(&mut extra, toml::Value::Table([(section.to_string(), toml::Value::Table(t))].into_iter().collect()));
        }
    }
    if let Some(out) = &cli.output {
        let t = [("output_dir".to_string(), toml::Value::String(out.display().to_string()))].into_iter().collect();
        deep_merge(&mut extra, toml::Value::Table(t));
    }
    if cli.sequential {
        deep_merge(&mut extra, toml::Value::Table([("parallel".to_string(), toml::Value::Boolean(false))].into_iter().collect()));
    }
    layers.push(toml::to_string(&extra)?);
    Ok(ExperimentConfig::from_layers(&layers.iter().map(String::as_str).collect::<Vec<_>>())?)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = load_config(&cli)?;
    let layout = Layout::new(&cfg.output_dir);
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join("config.resolved.toml"), cfg.to_toml())?;
    match cli.cmd {
        Cmd::Collect { scenes } => {
            if !scenes.is_empty() {
                cfg.scenes.train = scenes;
                cfg.validate()?;
            }
            let s = cmd_collect(&cfg)?;
            println!("collected {} training, {} held-out, {} one-shot trajectories ({} reused)", s.train, s.test, s.oneshot, s.reused);
        }
        Cmd::Train { baseline } => {
            let s = cmd_train(&cfg)?;
            if let Some(kept) = s.coarse_epochs.get(s.coarse_kept_epoch.wrapping_sub(1)) {
                let n = s.coarse_epochs.len();
                println!("coarse: {n} epochs, kept {}, held-out loss {:.4}, accuracy {:?}", kept.epoch, kept.val_loss, kept.val_accuracy);
            }
            if let Some(kept) = s.fine_epochs.get(s.fine_kept_epoch.wrapping_sub(1)) {
                let n = s.fine_epochs.len();
                println!("fine: {n} epochs, kept {}, held-out MSE {:.4} (mean-action {:.4})", kept.epoch, kept.val_mse, s.fine_mean_baseline_mse);
            }
            for w in &s.warnings {
                println!("warning: {w}");
            }
            if baseline {
                let log = cmd_train_baseline(&cfg)?;
                if let Some(kept) = log.epochs.get(log.kept_epoch.wrapping_sub(1)) {
                    println!("baseline: {} epochs, kept {}, held-out MSE {:.4}", log.epochs.len(), kept.epoch, kept.val_mse);
                }
            }
        }
        Cmd::Adapt { scenes } => {
            let ids = if scenes.is_empty() { cfg.scenes.novel.values().flatten().cloned().collect() } else { scenes };
            if ids.is_empty() {
                bail!("no novel scenes configured");
            }
            for id in ids {
                let s = cmd_adapt(&cfg, &id)?;
                let fine = s.fine_epochs.get(s.fine_kept_epoch.wrapping_sub(1)).map_or(f32::NAN, |e| e.val_mse);
                println!("{id} ({}): adapted, one-shot fine MSE {fine:.4}", s.category);
            }
        }
        Cmd::Eval { policy, scenes, seeds } => {
            let kind = match policy {
                PolicyArg::Progressive => PolicyKind::Progressive,
                PolicyArg::Baseline => PolicyKind::Baseline,
                PolicyArg::Adapted => PolicyKind::Adapted,
            };
            let ids = (!scenes.is_empty()).then_some(scenes);
            let r = cmd_eval(&cfg, kind, ids.as_deref(), seeds)?;
            print!("{}", std::fs::read_to_string(layout.eval(kind.label()).join("table.md"))?);
            println!("mean success {:.1}%", 100.0 * r.mean_rate);
        }
        Cmd::Ablate => {
            let r = cmd_ablate(&cfg)?;
            let dir = layout.ablate();
            for (name, ok) in [("features", r.features.is_ok()), ("policies", r.policies.is_ok()), ("adaptation", r.adaptation.is_ok())] {
                if ok {
                    println!("{name}:\n{}", std::fs::read_to_string(dir.join(format!("{name}.md")))?);
                }
            }
            let errors: Vec<String> =
                [r.features.err(), r.policies.err(), r.adaptation.err()].into_iter().flatten().collect();
            if !errors.is_empty() {
                bail!("{} ablation(s) failed: {}", errors.len(), errors.join("; "));
            }
        }
        Cmd::Serve { bind, scenes, archive, lockstep, hz } => {
            let ids = if scenes.is_empty() { cfg.all_scene_ids() } else { scenes };
            let mut svc = ServiceConfig::new(cfg.scenes(&ids)?, archive.unwrap_or_else(|| layout.root.join("data/teleop")));
            svc.clock = if lockstep { Clock::Lockstep } else { Clock::Realtime { hz } };
            let models = layout.models();
            if models.join("coarse.manifest.json").is_file() && models.join("fine.manifest.json").is_file() {
                let par = cfg.parallelism();
                let coarse = CoarseModel::load(&models, "coarse", par)?;
                let (fine, bounds) = FineModel::load(&models, "fine", par)?;
                svc.policy = Some(Arc::new(ProgressiveFactory { coarse, fine, bounds, mode: FeatureMode::Soft }));
            } else {
                log::warn!("no trained models in {}; watch-policy sessions are disabled", models.display());
            }
            let server = SessionServer::bind(&bind, svc)?;
            println!("listening on {}", server.local_addr());
            server.wait();
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_builds_nested_tables() {
        assert_eq!(set_layer("coarse.epochs=3").unwrap().trim(), "[coarse]\nepochs = 3");
        assert!(set_layer("name=run-a").unwrap().contains("name = \"run-a\""));
        assert!(set_layer("oops").is_err());
    }

    #[test]
    fn seed_and_output_override_config() {
        let cli = Cli::parse_from(["pour", "--seed", "9", "--output", "/tmp/x", "--set", "coarse.epochs=2", "ablate"]);
        let cfg = load_config(&cli).unwrap();
        assert_eq!((cfg.collect.seed, cfg.coarse.hyper.seed, cfg.eval.seed), (9, 9, 9));
        assert_eq!(cfg.output_dir, PathBuf::from("/tmp/x"));
        assert_eq!(cfg.coarse.hyper.epochs, 2);
    }
}

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use featspeak::lm::{pretrain_decoder, Tokenizer};
use featspeak::toy::ToyStackConfig;
use featspeak::trainer::{shapes_pretrain_samples, shapes_vocabulary};
use featspeak_server::{router, AppState, Registry, ServiceConfig};

#[derive(Parser)]
#[command(
    name = "featspeak",
    version,
    about = "Describe vision-backbone features in words"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Serve the HTTP API for the models in a service config.
    Serve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Train a translator from a training config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pretrain the small shapes-caption decoder and write its tokenizer and weights.
    PretrainLm {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
    },
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve { config, port, host } => serve(&config, &host, port),
        Command::Train { config, resume } => {
            let s = featspeak::trainer::run_training(&config, resume.as_deref())?;
            println!(
                "trained {} steps, final loss {:.4}, checkpoint {}",
                s.steps,
                s.final_loss,
                s.checkpoint.display()
            );
            Ok(())
        }
        Command::PretrainLm { out, steps } => pretrain_lm(&out, steps),
    }
}

fn serve(config: &Path, host: &str, port: u16) -> anyhow::Result<()> {
    let cfg = ServiceConfig::read(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let registry = Registry::load(&cfg, base)
        .with_context(|| format!("loading models from {}", config.display()))?;
    if registry.is_empty() {
        bail!("{} lists no models", config.display());
    }
    let state = Arc::new(AppState::new(registry, cfg.server.clone()));
    let addr: SocketAddr = format!("{host}:{port}").parse()?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let sweeper = state.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(std::time::Duration::from_secs(60));
            loop {
                tick.tick().await;
                let n = sweeper.sessions.evict_expired();
                if n > 0 {
                    log::info!("evicted {n} expired sessions");
                }
            }
        });
        let listener = tokio::net::TcpListener::bind(addr).await?;
        log::info!("listening on http://{addr}");
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

fn pretrain_lm(out: &Path, steps: Option<usize>) -> anyhow::Result<()> {
    let mut cfg = ToyStackConfig::default();
    if let Some(s) = steps {
        cfg.pretrain.steps = s;
    }
    std::fs::create_dir_all(out)?;
    let tokenizer = Tokenizer::new(shapes_vocabulary());
    tokenizer.save(&out.join("shapes-tokenizer.json"))?;
    let samples = shapes_pretrain_samples(&tokenizer, cfg.pretrain_samples, cfg.pretrain.seed);
    let (lm, loss) = pretrain_decoder(
        &samples,
        tokenizer,
        "shapes-decoder",
        cfg.decoder,
        &cfg.pretrain,
    )?;
    lm.save(&out.join("shapes-decoder.safetensors"))?;
    println!(
        "decoder written to {} (last batch loss {loss:.4})",
        out.display()
    );
    Ok(())
}

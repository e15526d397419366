use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::Context;
use candle_core::Device;
use clap::Parser;
use mrc_core::checkpoint::{load_inference_model, resolve_checkpoint};
use mrc_explorer::{router, AppState};

/// Serve a directory of bitstreams for interactive decoding.
#[derive(Parser)]
#[command(name = "mrc-explorer", version)]
struct Args {
    /// Directory holding `<id>.mrc` files (and optional `<id>.png` originals).
    #[arg(long)]
    store: PathBuf,
    /// Checkpoint file or run directory (default: $MRC_MODEL_DIR).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = 256)]
    cache: usize,
    /// Concurrent decode jobs (default: available cores).
    #[arg(long)]
    workers: Option<usize>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let ckpt = resolve_checkpoint(args.model.as_deref())?;
    let model = load_inference_model(&ckpt, &Device::Cpu).with_context(|| format!("loading {}", ckpt.display()))?;
    let workers = args
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    let state = Arc::new(AppState::new(model, &args.store, args.cache, workers));
    let listener = tokio::net::TcpListener::bind(args.addr).await?;
    log::info!("serving {} on {}", args.store.display(), args.addr);
    axum::serve(listener, router(state)).await?;
    Ok(())
}

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use clap::Parser;

use crowdmushra_service::http::{router, AppState};
use crowdmushra_service::{Service, SystemClock};

/// Serves crowdsourced MUSHRA sessions from an append-only event log.
#[derive(Debug, Parser)]
#[command(name = "crowdmushra-server", version)]
struct Args {
    #[arg(long, env = "CROWDMUSHRA_BIND", default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    /// Directory holding the event log.
    #[arg(long, env = "CROWDMUSHRA_DATA_DIR", default_value = "data")]
    data_dir: PathBuf,
    /// Root that manifest audio paths are relative to (defaults to the data directory).
    #[arg(long, env = "CROWDMUSHRA_AUDIO_ROOT")]
    audio_root: Option<PathBuf>,
    #[arg(long, env = "CROWDMUSHRA_ADMIN_TOKEN", hide_env_values = true)]
    admin_token: String,
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args = Args::parse();
    std::fs::create_dir_all(&args.data_dir)?;
    let audio_root = args.audio_root.unwrap_or_else(|| args.data_dir.clone());
    let service = Service::open(&args.data_dir.join("events.jsonl"), Arc::new(SystemClock), audio_root)?;
    eprintln!(
        "replayed {} events, listening on {}",
        service.event_count(),
        args.bind
    );
    let app = router(AppState {
        service: Arc::new(service),
        admin_token: args.admin_token,
    });
    let listener = tokio::net::TcpListener::bind(args.bind).await?;
    axum::serve(listener, app).await?;
    Ok(())
}

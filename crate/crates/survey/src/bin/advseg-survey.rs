use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use advseg_survey::{server, Survey};
use clap::Parser;

/// Serves the pairwise realism survey.
#[derive(Parser)]
#[command(version)]
struct Args {
    /// Directory laid out as {dataset}/{baseline,ours}/{stem}.png
    #[arg(long)]
    content: PathBuf,
    /// JSON-lines vote log (created if missing)
    #[arg(long, default_value = "votes.jsonl")]
    log: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Static frontend assets served at /
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

#[tokio::main]
async fn main() {
    let args = Args::parse();
    let survey = match Survey::open(&args.content, &args.log, args.seed) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    if survey.datasets().is_empty() {
        eprintln!("warning: no dataset in {} has both baseline and ours images", args.content.display());
    }
    let app = server::router(Arc::new(Mutex::new(survey)), args.static_dir);
    let listener = match tokio::net::TcpListener::bind(args.addr).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("error: cannot bind {}: {e}", args.addr);
            std::process::exit(1);
        }
    };
    eprintln!("listening on http://{}", args.addr);
    if let Err(e) = axum::serve(listener, app).await {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}

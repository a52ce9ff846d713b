use clap::Parser;
use tase_cli::{run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            eprintln!(
                "error kind=config code=2 message={}",
                serde_json::to_string(&e.kind().to_string()).unwrap_or_default()
            );
            std::process::exit(2);
        }
        Err(e) => e.exit(),
    };
    if let Some(n) = std::env::var("TASE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    if let Err(e) = run(cli) {
        eprintln!("{}", e.line());
        std::process::exit(e.exit_code());
    }
}

use std::io::Write;
use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = cfd_cli::Cli::parse();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let code = match cfd_cli::execute(cli, &mut out) {
        Ok(code) => code,
        Err(e) => {
            let _ = out.flush();
            eprintln!("error: {e:#}");
            2
        }
    };
    let _ = out.flush();
    ExitCode::from(code)
}

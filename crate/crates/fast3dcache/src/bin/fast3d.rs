use std::process::ExitCode;

use fast3dcache::cli::run_cli;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter("FAST3D_LOG")).init();
    let stdout = std::io::stdout();
    match run_cli(std::env::args_os(), &mut stdout.lock()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.class(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(2)
        }
    }
}

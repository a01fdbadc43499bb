use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("UPAINT_LOG", "info"))
        .format_timestamp(None)
        .init();
    ExitCode::from(upaint_cli::run_command(std::env::args_os()) as u8)
}

use std::process::ExitCode;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match lapyr_cli::run(std::env::args_os()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            if let Some(clap_err) = err.downcast_ref::<clap::Error>() {
                // --help and --version arrive here too
                let code = if clap_err.use_stderr() { lapyr_cli::EXIT_USAGE } else { 0 };
                let _ = clap_err.print();
                return ExitCode::from(code as u8);
            }
            eprintln!("error: {err:#}");
            ExitCode::from(lapyr_cli::exit_code(&err) as u8)
        }
    }
}

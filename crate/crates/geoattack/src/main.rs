use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = geoattack::cli::Cli::parse();
    match geoattack::cli::run(cli) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::ExitCode::FAILURE
        }
    }
}

use clap::{CommandFactory, Parser};
use hdiv_cli::{run, Cli, CliError};

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => {}
        Err(CliError::Usage(msg)) => {
            Cli::command()
                .error(clap::error::ErrorKind::MissingRequiredArgument, msg)
                .exit();
        }
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

use clap::Parser;

fn main() {
    let cli = sdeguard_cli::Cli::parse();
    if let Err(e) = sdeguard_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

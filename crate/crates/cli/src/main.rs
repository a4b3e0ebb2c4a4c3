use clap::Parser;

fn main() {
    let cli = dsrpgo_cli::Cli::parse();
    if let Err(e) = dsrpgo_cli::configure_threads().and_then(|()| dsrpgo_cli::run(cli)) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

use clap::Parser;

fn main() {
    tracing_subscriber::fmt().with_writer(std::io::stderr).init();
    let cli = dealer_cli::Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = dealer_cli::run(cli, &mut stdout) {
        eprintln!("error: {}", e.message);
        std::process::exit(e.code);
    }
}

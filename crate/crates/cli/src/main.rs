use clap::Parser;

fn main() {
    let cli = bhct_cli::Cli::parse();
    if let Err(e) = bhct_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

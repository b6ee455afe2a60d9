fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(biflow_cli::run_subcommand(&args));
}

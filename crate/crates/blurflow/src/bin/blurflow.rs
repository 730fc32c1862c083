fn main() {
    std::process::exit(blurflow::cli::run_cli(std::env::args()));
}

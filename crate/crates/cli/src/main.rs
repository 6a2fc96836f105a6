fn main() {
    std::process::exit(labordyn_cli::run_from_args(std::env::args()));
}

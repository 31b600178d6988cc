fn main() {
    std::process::exit(tpc_core::cli::run(std::env::args().collect()));
}

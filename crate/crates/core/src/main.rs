fn main() {
    std::process::exit(robust_sae::cli::run(std::env::args()));
}

fn main() {
    std::process::exit(fhvae::cli::run(std::env::args_os()));
}

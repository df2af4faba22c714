fn main() {
    std::process::exit(idvae::cli::run(std::env::args_os()));
}

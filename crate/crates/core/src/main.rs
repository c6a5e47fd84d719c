fn main() {
    std::process::exit(latentcloud::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(routeguard::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(emenv::cli::run(std::env::args_os()));
}

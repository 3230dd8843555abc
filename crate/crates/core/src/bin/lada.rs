fn main() {
    std::process::exit(lada::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(memplan::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(drrseg::cli::run(std::env::args_os()));
}

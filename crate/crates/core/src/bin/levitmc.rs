fn main() {
    std::process::exit(levitmc::cli::run(std::env::args_os()));
}

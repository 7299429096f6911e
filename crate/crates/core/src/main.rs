fn main() {
    std::process::exit(hfd::cli::run(std::env::args_os()));
}

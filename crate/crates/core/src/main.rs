fn main() {
    std::process::exit(panoda::cli::run(std::env::args_os()));
}

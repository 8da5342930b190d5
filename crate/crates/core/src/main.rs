fn main() {
    std::process::exit(shrinknet::cli::run(std::env::args_os()));
}

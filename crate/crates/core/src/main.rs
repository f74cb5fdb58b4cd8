fn main() {
    std::process::exit(trendlab::cli::main_with_args(std::env::args_os()));
}

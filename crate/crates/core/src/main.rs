fn main() {
    std::process::exit(mvzero::cli::run(std::env::args_os()));
}

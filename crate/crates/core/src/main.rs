fn main() {
    std::process::exit(omiga::cli::run(std::env::args_os()));
}

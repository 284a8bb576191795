fn main() {
    std::process::exit(fedfair_core::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(vsd::cli::run(std::env::args_os()));
}

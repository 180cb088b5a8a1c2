fn main() {
    std::process::exit(mfeit::cli::run(std::env::args_os()));
}

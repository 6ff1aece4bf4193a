fn main() {
    std::process::exit(freekd::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(discene::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(xmic::cli::run(std::env::args_os()));
}

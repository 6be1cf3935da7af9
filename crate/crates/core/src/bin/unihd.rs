fn main() {
    std::process::exit(unihd::cli::run(std::env::args_os()));
}

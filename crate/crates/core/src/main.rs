fn main() {
    std::process::exit(savd::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(rapstream::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(modir::cli::run(std::env::args_os()));
}

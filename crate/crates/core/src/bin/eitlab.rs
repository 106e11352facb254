fn main() {
    std::process::exit(eitlab::cli::run(std::env::args_os()));
}

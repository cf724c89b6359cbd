fn main() {
    std::process::exit(glvd_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(eventshift_cli::run(std::env::args_os()));
}

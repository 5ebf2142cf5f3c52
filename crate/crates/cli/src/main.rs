fn main() {
    std::process::exit(percept_cli::run(std::env::args_os()));
}

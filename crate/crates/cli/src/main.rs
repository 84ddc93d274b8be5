fn main() {
    std::process::exit(intent_cli::run(std::env::args_os()));
}

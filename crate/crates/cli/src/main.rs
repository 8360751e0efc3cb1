fn main() {
    std::process::exit(anatomy_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(stepground_cli::run(std::env::args_os()));
}

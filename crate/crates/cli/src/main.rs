fn main() {
    std::process::exit(melstego_cli::run(std::env::args_os()));
}

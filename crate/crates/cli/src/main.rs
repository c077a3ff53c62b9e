fn main() {
    std::process::exit(trimod_cli::run(std::env::args_os()));
}

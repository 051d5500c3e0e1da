fn main() {
    std::process::exit(lenrank_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(satdino::cli::run(std::env::args_os()));
}

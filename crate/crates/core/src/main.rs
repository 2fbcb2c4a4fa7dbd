fn main() {
    std::process::exit(enkt::cli::run(std::env::args_os()));
}

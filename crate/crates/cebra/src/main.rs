fn main() {
    std::process::exit(cebra::cli::run(std::env::args_os()));
}

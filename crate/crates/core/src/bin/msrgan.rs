fn main() {
    std::process::exit(msrgan::cli::run(std::env::args_os()));
}

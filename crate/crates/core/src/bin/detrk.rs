fn main() {
    std::process::exit(detrk::cli::run(std::env::args_os()));
}

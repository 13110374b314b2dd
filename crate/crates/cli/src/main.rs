fn main() {
    std::process::exit(hdrplus_cli::run(std::env::args_os()));
}

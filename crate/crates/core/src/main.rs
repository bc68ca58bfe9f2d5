fn main() {
    std::process::exit(setvec::cli::run_from(std::env::args_os()));
}

fn main() {
    std::process::exit(trm_lab::cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(mfsan::cli::run(std::env::args_os()));
}

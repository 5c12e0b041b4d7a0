fn main() {
    std::process::exit(hipaachecker::cli::run(std::env::args_os()));
}

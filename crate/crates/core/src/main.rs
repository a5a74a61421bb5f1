fn main() {
    std::process::exit(dsqa::cli::run(std::env::args_os()));
}

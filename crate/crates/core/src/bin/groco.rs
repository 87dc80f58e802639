fn main() {
    std::process::exit(groco::cli::run(std::env::args_os()));
}

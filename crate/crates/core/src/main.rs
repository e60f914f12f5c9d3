fn main() {
    std::process::exit(unpose::cli::run(std::env::args_os()));
}

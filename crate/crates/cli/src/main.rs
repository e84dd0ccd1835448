fn main() {
    std::process::exit(mcdiff_cli::run(std::env::args_os()));
}

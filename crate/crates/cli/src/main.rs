fn main() {
    std::process::exit(cvgl_cli::run(std::env::args_os()));
}

fn main() {
    std::process::exit(krrlab_cli::run(std::env::args_os()));
}

fn main() {
    env_logger::init();
    std::process::exit(colormamba_cli::run(std::env::args_os()));
}

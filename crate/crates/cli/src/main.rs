fn main() {
    env_logger::init();
    std::process::exit(storwin_cli::app::main_with(std::env::args_os()));
}

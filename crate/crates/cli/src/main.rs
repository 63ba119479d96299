fn main() {
    env_logger::init();
    std::process::exit(pilot_cli::run_cli(std::env::args_os()));
}

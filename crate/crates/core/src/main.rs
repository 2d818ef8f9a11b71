fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LOCKIT_LOG", "warn")).init();
    std::process::exit(lockit::cli::main_with_args(std::env::args_os()));
}

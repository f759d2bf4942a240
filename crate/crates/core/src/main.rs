fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = depthforge::cli::configure_threads() {
        eprintln!("error: {e}");
        std::process::exit(depthforge::cli::EXIT_CONFIG);
    }
    std::process::exit(depthforge::cli::run(std::env::args_os()));
}

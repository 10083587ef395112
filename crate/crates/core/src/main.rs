fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(mipic_core::cli::LOG_ENV, "info"))
        .format_timestamp(None)
        .init();
    std::process::exit(mipic_core::cli::run(std::env::args_os()));
}

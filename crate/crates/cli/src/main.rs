fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = grfp_cli::run(std::env::args_os()) {
        if let Some(c) = e.downcast_ref::<clap::Error>() {
            c.exit();
        }
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

use clap::Parser;

#[global_allocator]
static ALLOC: featseg_core::eval::TrackingAllocator = featseg_core::eval::TrackingAllocator;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = featseg_workbench::cli::Cli::parse();
    if let Err(e) = featseg_workbench::cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

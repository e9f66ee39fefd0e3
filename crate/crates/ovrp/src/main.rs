fn main() {
    init_thread_pool();
    let code = ovrp::cli::run(std::env::args_os());
    std::process::exit(code);
}

/// `OVRP_THREADS` caps the worker count; the default is the machine's
/// available parallelism.
fn init_thread_pool() {
    if let Ok(raw) = std::env::var("OVRP_THREADS") {
        match raw.trim().parse::<usize>() {
            Ok(n) if n >= 1 => {
                if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
                    eprintln!("warning: could not apply OVRP_THREADS={n}: {e}");
                }
            }
            _ => eprintln!("warning: ignoring invalid OVRP_THREADS value '{raw}'"),
        }
    }
}

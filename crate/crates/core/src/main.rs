use std::io;

fn main() {
    if let Ok(n) = std::env::var("DAVEGAN_THREADS") {
        std::env::set_var("MATMUL_NUM_THREADS", n);
    }
    let code = davegan::cli::run(std::env::args_os(), &mut io::stdout(), &mut io::stderr());
    std::process::exit(code);
}

use clap::Parser;

fn main() {
    let cli = match lbdnn::cli::Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { lbdnn::cli::EXIT_CONFIG } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    std::process::exit(lbdnn::cli::run(cli));
}

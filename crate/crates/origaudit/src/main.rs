fn main() {
    if let Err(err) = origaudit::cli::run() {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}
